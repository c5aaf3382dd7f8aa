from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from tbiseg import cli
from tbiseg.pipeline import (
    Pipeline,
    PipelineConfig,
    StageError,
    env_overrides,
    load_config,
    run_setting,
    scaled_neck_exclude,
)
from tbiseg.volume import Mask, Volume, read_mask, read_nifti, write_nifti

TINY = {
    "synth": {
        "n_train": 4,
        "n_test": 3,
        "train_no_lesion_fraction": 0.25,
        "test_no_lesion_fraction": 0.34,
        "phantom": {"shape": [32, 32, 32], "lesion_radius_range": [2.0, 4.0]},
    },
    "unet": {"base_width": 2, "depth": 2},
    "unetpp": {"base_width": 2, "depth": 2},
    "train": {"epochs": 2, "iterations_per_epoch": 2, "patch_size": [16, 16, 16]},
    "classifier": {
        "densenet": {"growth_rate": 2, "layers_per_block": 1, "blocks": 1, "stem_channels": 2},
        "train": {"epochs": 2, "iterations_per_epoch": 2, "batch_size": 4},
        "slice_shape": [32, 32],
        "gbt_trees": 5,
        "max_fp_voxels": 300,
    },
}


def tiny_config(work, **over) -> PipelineConfig:
    return load_config(None, {**TINY, "work_dir": str(work), **over}, environ={})


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """Settings 1, 7 and 6 of the tiny pipeline in one shared work dir."""
    work = tmp_path_factory.mktemp("tiny")
    out = {}
    for s in (1, 7, 6):
        out[s] = run_setting(tiny_config(work, setting=s))
    return work, out


# configuration -----------------------------------------------------------------


def test_config_precedence(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seed": 3, "folds": 3, "jobs": 2}))
    env = {"LF_SEED": "7", "LF_FOLDS": "4"}
    cfg = load_config(f, {"seed": 11}, environ=env)
    assert cfg.seed == 11 and cfg.folds == 4 and cfg.jobs == 2
    assert load_config(None, environ={}).folds == 2  # desk profile
    paper = load_config(None, {"profile": "paper"}, environ={})
    assert paper.folds == 5 and paper.unet["base_width"] == 32 and paper.classifier.neck_exclude == 45


def test_config_errors(tmp_path):
    with pytest.raises(ValueError):
        env_overrides({"LF_SETTING": "x"})
    with pytest.raises(ValueError):
        load_config(None, {"setting": 9}, environ={})
    with pytest.raises(ValueError):
        load_config(None, {"post": {"connectivity": 18}}, environ={})
    with pytest.raises(ValueError):
        load_config(None, {"unknown_key": 1}, environ={})


def test_config_json_roundtrip():
    cfg = tiny_config("w")
    assert PipelineConfig.from_dict(json.loads(cfg.to_json())) == cfg


def test_neck_exclude_scaling():
    assert scaled_neck_exclude(256) == 45
    assert scaled_neck_exclude(64) == 11


# pipeline -----------------------------------------------------------------------------


def test_tiny_pipeline_outputs(tiny_run):
    work, out = tiny_run
    for s, (metrics, masks) in out.items():
        assert metrics.n == 3 and len(masks) == 3
        assert 0 <= metrics.accuracy <= 1
        assert (work / f"evaluate-s{s}").is_dir()
    assert list((work / "provenance").glob("setting1-*.json"))


def test_rerun_is_noop(tiny_run):
    work, _ = tiny_run
    markers = sorted(work.glob("*/*/stage.json"))
    before = {p: p.stat().st_mtime_ns for p in markers}
    run_setting(tiny_config(work, setting=1))
    assert {p: p.stat().st_mtime_ns for p in markers} == before
    assert sorted(work.glob("*/*/stage.json")) == markers


def test_deterministic_across_work_dirs(tiny_run, tmp_path):
    work, out = tiny_run
    _, masks = run_setting(tiny_config(tmp_path, setting=1))
    for cid, path in out[1][1].items():
        assert np.array_equal(read_mask(path).data, read_mask(masks[cid]).data)
    a = sorted(p.relative_to(work) for p in work.glob("*-s1/*"))
    b = sorted(p.relative_to(tmp_path) for p in tmp_path.glob("*-s1/*"))
    assert a == b  # identical stage keys


def test_setting7_fusion_from_files(tiny_run):
    work, _ = tiny_run
    fused = sorted(work.glob("ensemble-fused/*/*_prob.nii"))
    folds = sorted(work.glob("predict-unet-f*/*"))
    pp = next(work.glob("predict-unetpp-f0/*"))
    assert fused
    for f in fused:
        fold_mean = np.mean([read_nifti(d / f.name).data for d in folds], axis=0)
        expect = 0.5 * fold_mean + 0.5 * read_nifti(pp / f.name).data
        assert np.allclose(read_nifti(f).data, expect, atol=1e-6)


def test_filter_reports_written(tiny_run):
    work, _ = tiny_run
    reports = sorted(work.glob("postprocess-s6/*/*_report.json"))
    assert len(reports) == 3
    for r in reports:
        kinds = [rep["filter"] for rep in json.loads(r.read_text())]
        assert kinds == ["slice", "radiomics"]


def test_missing_upstream_raises(tmp_path):
    pipe = Pipeline(tiny_config(tmp_path), auto=False, targets=["train-seg"])
    with pytest.raises(StageError) as exc:
        pipe.seg_models("unet")
    assert "missing upstream artifact" in str(exc.value)


# CLI ------------------------------------------------------------------------------------


def _cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("LF_SETTING", raising=False)
    cfg = _cfg_file(tmp_path)
    work = str(tmp_path / "w")
    assert cli.main(["train-seg", "--config", str(cfg), "--work-dir", work]) == cli.EXIT_FAILURE
    assert "missing upstream artifact" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--no-such-flag"])
    assert exc.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--setting", "8"])
    assert exc.value.code == cli.EXIT_USAGE
    monkeypatch.setenv("LF_SETTING", "9")
    assert cli.main(["run", "--config", str(cfg), "--work-dir", work]) == cli.EXIT_USAGE
    assert cli.main(["ensemble", "--inputs", "a.nii"]) == cli.EXIT_USAGE  # no --output


def test_cli_stagewise(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("LF_SETTING", raising=False)
    cfg = _cfg_file(tmp_path)
    base = ["--config", str(cfg), "--work-dir", str(tmp_path / "w")]
    for cmd in (["synth"], ["preprocess"], ["train-seg", "--arch", "unet"], ["predict", "--arch", "unet"], ["ensemble"], ["postprocess"]):
        assert cli.main(cmd + base) == cli.EXIT_OK, cmd
    capsys.readouterr()
    assert cli.main(["evaluate"] + base) == cli.EXIT_OK
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["n"] == 3
    # the slice classifier has not been trained, so setting 3 cannot post-process
    assert cli.main(["postprocess", "--setting", "3"] + base) == cli.EXIT_FAILURE


def test_cli_env_setting(tmp_path, monkeypatch, capsys):
    cfg = _cfg_file(tmp_path)
    monkeypatch.setenv("LF_SETTING", "2")
    monkeypatch.setenv("LF_WORK_DIR", str(tmp_path / "envwork"))
    assert cli.main(["run", "--config", str(cfg)]) == cli.EXIT_OK
    assert "setting 2:" in capsys.readouterr().out
    assert (tmp_path / "envwork" / "evaluate-s2").is_dir()


def test_cli_ensemble_and_binarize_files(tmp_path, rng):
    v = Volume(rng.random((6, 5, 4)).astype(np.float32), (1.0, 1.0, 2.0))
    write_nifti(v, tmp_path / "a.nii")
    assert cli.main(["ensemble", "--inputs", str(tmp_path / "a.nii"), "--output", str(tmp_path / "o.nii")]) == 0
    out = read_nifti(tmp_path / "o.nii")
    assert np.max(np.abs(out.data - v.data)) <= 1e-7 and out.spacing == v.spacing
    assert cli.main(["postprocess", "--input", str(tmp_path / "o.nii"), "--output", str(tmp_path / "m.nii")]) == 0
    assert np.array_equal(read_mask(tmp_path / "m.nii").data, (v.data > 0.5).astype(np.uint8))


def _perfect_manifest(tmp_path):
    entries = {}
    for i, has in enumerate([True, True, False]):
        d = np.zeros((8, 8, 8), np.uint8)
        if has:
            d[2 : 4 + i, 2:5, 2:5] = 1
        p = tmp_path / f"c{i}_mask.nii"
        write_nifti(Mask(d).to_volume(), p)
        img = tmp_path / f"c{i}_image.nii"
        write_nifti(Volume(np.ones((8, 8, 8), np.float32)), img)
        entries[f"c{i}"] = {"image": img.name, "mask": p.name, "prediction": p.name, "has_lesion": has}
    path = tmp_path / "perfect.json"
    path.write_text(json.dumps(entries))
    return path


def test_cli_evaluate_and_report_manifest(tmp_path, capsys):
    man = _perfect_manifest(tmp_path)
    assert cli.main(["evaluate", "--manifest", str(man), "--output", str(tmp_path / "ev")]) == 0
    m = json.loads(capsys.readouterr().out)
    assert m["accuracy"] == 1.0 and m["overall_dsc_mean"] == 1.0
    assert m["n_lesion"] == 2 and m["n_no_lesion"] == 1 and m["dsc_no_lesion_mean"] == 1.0
    assert (tmp_path / "ev" / "cases.csv").exists()

    out = tmp_path / "rep"
    assert cli.main(["report", "--manifest", f"a={man}", "--manifest", f"b={man}", "--output", str(out)]) == 0
    rep = json.loads(Path(out / "report.json").read_text())
    assert rep["settings"]["a"]["dsc_lesion_mean"] == 1.0
    assert rep["settings"]["a"]["pearson_log_size"] is None  # constant Dice: undefined
    assert rep["paired_ttests_dsc_lesion"][0]["t"] is None  # zero-variance differences
    for name in ("results_table.csv", "lesion_size_scatter.csv", "heatmap_fp_a.nii", "heatmap_fn_b.nii"):
        assert (out / name).exists()
