"""End-to-end orchestration of the seven pipeline settings.

Every stage writes its artifacts to ``<work_dir>/<stage>/<key>/`` where the
key hashes the stage's parameters together with the keys of its upstream
stages. A finished stage leaves a ``stage.json`` record; re-running an
unchanged stage is a no-op.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy

from . import __version__
from .evaluation import (
    CaseResult,
    ChallengeMetrics,
    case_result,
    challenge_metrics,
    dice,
    error_heatmap,
    paired_ttest,
    pearson_log_size,
    read_manifest,
    write_manifest,
    write_results_table,
    DegenerateError,
)
from .models import build_model, predict_probability
from .postprocess import (
    SliceClassifier,
    binarize,
    connected_components,
    ensemble_average,
    radiomics_filter,
    setting7_ensemble,
    slice_filter,
)
from .preprocess import PreprocessedCase, preprocess_case
from .radiomics import (
    FEATURE_NAMES,
    GBTModel,
    _intensity_stats,
    component_feature_matrix,
    select_top_k,
    shape_features,
    train_gbt,
    write_feature_csv,
)
from .synthgen import PhantomConfig, generate_cohort
from .training import (
    AugmentConfig,
    TrainConfig,
    make_folds,
    slice_accuracy,
    slice_dataset,
    train_segmentation,
    train_slice_classifier,
    write_loss_trace,
)
from .volume import BoundingBox, Mask, Volume, read_mask, read_nifti, write_nifti

__all__ = [
    "PipelineConfig",
    "SynthParams",
    "ClassifierParams",
    "PostprocessParams",
    "Pipeline",
    "StageError",
    "run_setting",
    "profile_defaults",
    "load_config",
    "SETTINGS",
    "ENV_PREFIX",
]

log = logging.getLogger(__name__)

ENV_PREFIX = "LF_"

# setting -> (segmentation source, slice filter, radiomics filter)
SETTINGS: Dict[int, Tuple[str, bool, bool]] = {
    1: ("unet", False, False),
    2: ("unetpp", False, False),
    3: ("unet", True, False),
    4: ("unetpp", True, False),
    5: ("unet", True, True),
    6: ("unetpp", True, True),
    7: ("fused", False, False),
}


class StageError(RuntimeError):
    """A stage failed or an upstream artifact is missing."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class SynthParams:
    n_train: int = 20
    n_test: int = 5
    train_no_lesion_fraction: float = 0.2
    test_no_lesion_fraction: float = 0.2
    phantom: Dict[str, object] = field(default_factory=dict)  # PhantomConfig overrides


@dataclass
class ClassifierParams:
    densenet: Dict[str, object] = field(default_factory=lambda: {"growth_rate": 8, "layers_per_block": 2, "blocks": 2, "stem_channels": 8})
    train: Dict[str, object] = field(
        default_factory=lambda: {"epochs": 30, "batch_size": 16, "iterations_per_epoch": 10, "initial_lr": 3e-2, "momentum": 0.9}
    )
    slice_shape: Tuple[int, int] = (48, 48)
    neck_exclude: Optional[int] = None  # None: 45 slices scaled to the z-extent (45 * nz / 256)
    gbt_trees: int = 50
    gbt_depth: int = 3
    gbt_learning_rate: float = 0.3
    top_k: int = 25
    max_fp_voxels: int = 3000
    feature_radius: int = 2


@dataclass
class PostprocessParams:
    threshold: float = 0.5
    connectivity: int = 26
    volume_gate_mm3: float = 2000.0
    slice_fraction: float = 0.5
    voxel_gate: int = 1000
    ensemble_mode: str = "architecture"


@dataclass
class PipelineConfig:
    setting: int = 1
    profile: str = "desk"
    work_dir: str = "work"
    train_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    seed: int = 0
    folds: int = 2
    jobs: int = 1
    target_spacing: Optional[Tuple[float, float, float]] = None
    inference_overlap: float = 0.5
    min_volume_mm3: float = 0.0
    synth: SynthParams = field(default_factory=SynthParams)
    unet: Dict[str, object] = field(default_factory=lambda: {"base_width": 8, "depth": 3})
    unetpp: Dict[str, object] = field(default_factory=lambda: {"base_width": 8, "depth": 3})
    train: Dict[str, object] = field(default_factory=lambda: {"epochs": 30, "iterations_per_epoch": 10})
    augment: Dict[str, object] = field(default_factory=dict)
    classifier: ClassifierParams = field(default_factory=ClassifierParams)
    post: PostprocessParams = field(default_factory=PostprocessParams)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of 1..7, got {self.setting}")
        if self.profile not in ("desk", "paper"):
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        p = self.post
        if min(p.volume_gate_mm3, p.voxel_gate, p.slice_fraction, p.threshold) < 0:
            raise ValueError("gates and thresholds must be >= 0")
        if p.connectivity not in (6, 26):
            raise ValueError("connectivity must be 6 or 26")
        if p.ensemble_mode not in ("architecture", "per_map"):
            raise ValueError("ensemble_mode must be 'architecture' or 'per_map'")
        # surface config errors before any stage runs
        TrainConfig(**_tuples(self.train))
        TrainConfig(**_tuples(self.classifier.train))
        AugmentConfig(**_tuples(self.augment))
        PhantomConfig(**_tuples(self.synth.phantom))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _build(cls, d)


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _build(cls, d: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        f = known[name]
        factory = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if factory is not None and dataclasses.is_dataclass(factory) and isinstance(value, dict):
            value = _build(factory, value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def profile_defaults(profile: str) -> dict:
    """Baked-in overrides for ``desk`` (laptop scale) and ``paper`` (published scale)."""
    if profile == "desk":
        return {"profile": "desk"}
    if profile == "paper":
        return {
            "profile": "paper",
            "folds": 5,
            "unet": {"base_width": 32, "depth": 5},
            "unetpp": {"base_width": 32, "depth": 5},
            "train": {"epochs": 1000, "iterations_per_epoch": 250, "patch_size": [128, 160, 112]},
            "classifier": {"neck_exclude": 45, "slice_shape": [256, 256], "train": {"epochs": 100, "iterations_per_epoch": 250}},
        }
    raise ValueError(f"unknown profile {profile!r}")


_ENV_KEYS = {
    "SETTING": ("setting", int),
    "PROFILE": ("profile", str),
    "SEED": ("seed", int),
    "JOBS": ("jobs", int),
    "WORK_DIR": ("work_dir", str),
    "FOLDS": ("folds", int),
    "TRAIN_MANIFEST": ("train_manifest", str),
    "TEST_MANIFEST": ("test_manifest", str),
}


def env_overrides(environ=None) -> dict:
    """Values from ``LF_SETTING``, ``LF_PROFILE``, ``LF_SEED``, ``LF_JOBS``,
    ``LF_WORK_DIR``, ``LF_FOLDS``, ``LF_TRAIN_MANIFEST``, ``LF_TEST_MANIFEST``."""
    environ = os.environ if environ is None else environ
    out = {}
    for suffix, (key, typ) in _ENV_KEYS.items():
        raw = environ.get(ENV_PREFIX + suffix)
        if raw is not None and raw != "":
            try:
                out[key] = typ(raw)
            except ValueError:
                raise ValueError(f"{ENV_PREFIX}{suffix}={raw!r} is not a valid {typ.__name__}") from None
    return out


def load_config(path=None, overrides: Optional[dict] = None, environ=None) -> PipelineConfig:
    """Layer profile defaults < config file < environment < explicit overrides."""
    file_cfg = json.loads(Path(path).read_text()) if path else {}
    env = env_overrides(environ)
    overrides = overrides or {}
    profile = overrides.get("profile") or env.get("profile") or file_cfg.get("profile") or "desk"
    d = _merge(profile_defaults(profile), file_cfg)
    d = _merge(d, env)
    d = _merge(d, overrides)
    base = PipelineConfig().to_dict()
    return PipelineConfig.from_dict(_merge(base, d))


def scaled_neck_exclude(nz: int, reference: int = 45, reference_nz: int = 256) -> int:
    """Neck slices to drop for a volume with ``nz`` axial slices."""
    return int(round(reference * nz / reference_nz))


def derive_seed(master: int, tag: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{master}:{tag}".encode()).digest()[:4], "little")


# ---------------------------------------------------------------------------
# Case storage
# ---------------------------------------------------------------------------


def save_case(case: PreprocessedCase, path) -> None:
    arrays = {
        "image": case.image.data,
        "image_spacing": np.asarray(case.image.spacing),
        "full_image": case.full_image.data,
        "full_spacing": np.asarray(case.full_image.spacing),
        "full_origin": np.asarray(case.full_image.origin),
        "box": np.asarray([case.box.lower, case.box.upper]),
        "original_shape": np.asarray(case.original_shape),
        "original_spacing": np.asarray(case.original_spacing),
        "cropped_shape": np.asarray(case.cropped_shape),
    }
    if case.mask is not None:
        arrays["mask"] = case.mask.data
        arrays["full_mask"] = case.full_mask.data
    np.savez(path, **arrays)


def load_case(case_id: str, path) -> PreprocessedCase:
    z = np.load(path)
    full_sp = tuple(z["full_spacing"])
    origin = tuple(z["full_origin"])
    img = Volume(z["image"], tuple(z["image_spacing"]))
    mask = full_mask = None
    if "mask" in z:
        mask = Mask(z["mask"], img.spacing)
        full_mask = Mask(z["full_mask"], full_sp, origin)
    return PreprocessedCase(
        case_id=case_id,
        image=img,
        full_image=Volume(z["full_image"], full_sp, origin),
        box=BoundingBox(tuple(z["box"][0]), tuple(z["box"][1])),
        original_shape=tuple(int(a) for a in z["original_shape"]),
        original_spacing=tuple(float(a) for a in z["original_spacing"]),
        cropped_shape=tuple(int(a) for a in z["cropped_shape"]),
        mask=mask,
        full_mask=full_mask,
    )


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Stage workers (module level so they can run in worker processes)
# ---------------------------------------------------------------------------


def _train_seg_worker(args) -> Tuple[str, list]:
    kind, spec, train_cfg, aug_cfg, case_paths, out_dir = args
    cases = [load_case(cid, p) for cid, p in case_paths]
    g = build_model(kind, spec)
    result = train_segmentation(g, cases, TrainConfig(**_tuples(train_cfg)), AugmentConfig(**_tuples(aug_cfg)))
    g.save(Path(out_dir) / "model.ckpt")
    write_loss_trace(Path(out_dir) / "loss.csv", result.trace)
    return out_dir, result.trace


@dataclass
class Stage:
    name: str
    key: str
    dir: Path
    record: dict


class Pipeline:
    """Stage graph over one :class:`PipelineConfig`.

    With ``auto=True`` missing upstream stages are built on demand. With
    ``auto=False`` only stages named in ``targets`` may be built and a
    missing upstream artifact raises :class:`StageError`.
    """

    def __init__(self, cfg: PipelineConfig, auto: bool = True, targets: Sequence[str] = (), progress: Optional[Callable[[str], None]] = None):
        self.cfg = cfg
        self.work = Path(cfg.work_dir)
        self.auto = auto
        self.targets = set(targets)
        self.progress = progress or (lambda msg: log.info(msg))
        self._cache: Dict[str, Stage] = {}

    # generic stage machinery ---------------------------------------------
    def _stage(self, family: str, name: str, params: dict, deps: Sequence[Stage], build: Callable[[Path], dict]) -> Stage:
        blob = json.dumps({"name": name, "params": params, "deps": [d.key for d in deps]}, sort_keys=True, default=str)
        key = hashlib.sha256(blob.encode()).hexdigest()[:16]
        if key in self._cache:
            return self._cache[key]
        d = self.work / name / key
        marker = d / "stage.json"
        if marker.exists():
            st = Stage(name, key, d, json.loads(marker.read_text()))
            self._cache[key] = st
            return st
        if not self.auto and family not in self.targets:
            raise StageError(family, f"missing upstream artifact: stage '{family}' ({name}) has not been run")
        if d.exists():
            shutil.rmtree(d)  # leftovers of an interrupted run
        d.mkdir(parents=True)
        self.progress(f"running {name} -> {d}")
        try:
            info = build(d) or {}
        except StageError:
            raise
        except Exception as exc:
            raise StageError(family, f"{name} failed: {exc}") from exc
        record = {
            "stage": name,
            "key": key,
            "params": params,
            "deps": {dep.name: dep.key for dep in deps},
            "info": info,
            "outputs": sorted(str(p.relative_to(d)) for p in d.rglob("*") if p.is_file()),
        }
        marker.write_text(json.dumps(record, indent=1, sort_keys=True, default=str))
        st = Stage(name, key, d, record)
        self._cache[key] = st
        return st

    # data -----------------------------------------------------------------
    def data(self) -> Stage:
        cfg = self.cfg
        if cfg.train_manifest or cfg.test_manifest:
            if not (cfg.train_manifest and cfg.test_manifest):
                raise StageError("synth", "both train_manifest and test_manifest are required")
            params = {
                "train": _file_digest(cfg.train_manifest),
                "test": _file_digest(cfg.test_manifest),
            }

            def build(d: Path):
                for split, src in (("train", cfg.train_manifest), ("test", cfg.test_manifest)):
                    write_manifest(d / f"{split}.json", read_manifest(src))
                return {}

            return self._stage("synth", "data", params, [], build)

        params = {"synth": asdict(cfg.synth), "seed": cfg.seed}

        def build(d: Path):
            phantom = PhantomConfig(**_tuples(cfg.synth.phantom))
            s = cfg.synth
            splits = {
                "train": generate_cohort(s.n_train, phantom, s.train_no_lesion_fraction, derive_seed(cfg.seed, "train-data")),
                "test": generate_cohort(s.n_test, phantom, s.test_no_lesion_fraction, derive_seed(cfg.seed, "test-data")),
            }
            for split, cohort in splits.items():
                (d / split).mkdir()
                entries = {}
                for v, m, cid in cohort:
                    write_nifti(v, d / split / f"{cid}_image.nii")
                    write_nifti(m.to_volume(), d / split / f"{cid}_mask.nii")
                    entries[cid] = {"image": f"{split}/{cid}_image.nii", "mask": f"{split}/{cid}_mask.nii", "has_lesion": m.any()}
                write_manifest(d / f"{split}.json", entries)
            return {"n_train": s.n_train, "n_test": s.n_test}

        return self._stage("synth", "data", params, [], build)

    def manifest(self, split: str) -> Dict[str, dict]:
        return read_manifest(self.data().dir / f"{split}.json")

    # preprocessing --------------------------------------------------------
    def preprocess(self) -> Stage:
        data = self.data()
        params = {"target_spacing": self.cfg.target_spacing, "bias_order": 2}

        def build(d: Path):
            for split in ("train", "test"):
                (d / split).mkdir()
                for cid, e in read_manifest(data.dir / f"{split}.json").items():
                    v = read_nifti(e["image"])
                    m = read_mask(e["mask"]) if e.get("mask") else None
                    if split == "train" and m is None:
                        raise StageError("preprocess", f"training case {cid} has no mask")
                    save_case(preprocess_case(cid, v, m, self.cfg.target_spacing), d / split / f"{cid}.npz")
            return {}

        return self._stage("preprocess", "preprocess", params, [data], build)

    def cases(self, split: str) -> List[PreprocessedCase]:
        pre = self.preprocess()
        return [load_case(p.stem, p) for p in sorted((pre.dir / split).glob("*.npz"))]

    def _case_paths(self, split: str) -> List[Tuple[str, str]]:
        pre = self.preprocess()
        return [(p.stem, str(p)) for p in sorted((pre.dir / split).glob("*.npz"))]

    def folds(self):
        ids = [cid for cid, _ in self._case_paths("train")]
        return make_folds(ids, self.cfg.folds, derive_seed(self.cfg.seed, "folds"))

    # segmentation training ------------------------------------------------
    def _seg_job(self, kind: str, fold: int):
        cfg = self.cfg
        spec = dict(cfg.unet if kind == "unet" else cfg.unetpp)
        spec["seed"] = derive_seed(cfg.seed, f"{kind}-init-{fold}")
        train_cfg = _merge(cfg.train, {"seed": derive_seed(cfg.seed, f"{kind}-train-{fold}")})
        folds = self.folds()
        train_ids = set(folds.train_ids(fold))
        paths = [(cid, p) for cid, p in self._case_paths("train") if cid in train_ids]
        params = {"kind": kind, "spec": spec, "train": train_cfg, "augment": cfg.augment, "fold": fold, "folds": cfg.folds, "ids": sorted(train_ids)}
        return params, (kind, spec, train_cfg, dict(cfg.augment), paths)

    def seg_models(self, kind: str) -> List[Stage]:
        """Trained fold models: all folds for ``unet``, fold 0 for ``unetpp``."""
        folds = range(self.cfg.folds) if kind == "unet" else [0]
        pre = self.preprocess()
        jobs = [(f, *self._seg_job(kind, f)) for f in folds]
        name = lambda f: f"train-seg-{kind}-f{f}"  # noqa: E731

        pending = []
        if self.cfg.jobs > 1:
            # find stages that still need building and train them concurrently
            for f, params, args in jobs:
                blob = json.dumps({"name": name(f), "params": params, "deps": [pre.key]}, sort_keys=True, default=str)
                key = hashlib.sha256(blob.encode()).hexdigest()[:16]
                if not (self.work / name(f) / key / "stage.json").exists():
                    pending.append((f, params, args))
        prebuilt: Dict[int, list] = {}
        if len(pending) > 1 and (self.auto or "train-seg" in self.targets):
            tmp = self.work / "_parallel"
            tmp.mkdir(parents=True, exist_ok=True)
            worker_args = [(*args, str(tmp / f"{kind}-f{f}")) for f, _, args in pending]
            for a in worker_args:
                Path(a[-1]).mkdir(exist_ok=True)
            with ProcessPoolExecutor(max_workers=min(self.cfg.jobs, len(pending))) as ex:
                for (f, _, _), (out, trace) in zip(pending, ex.map(_train_seg_worker, worker_args)):
                    prebuilt[f] = [out, trace]

        stages = []
        for f, params, args in jobs:

            def build(d: Path, f=f, args=args):
                if f in prebuilt:
                    out, trace = prebuilt[f]
                    for p in Path(out).iterdir():
                        shutil.move(str(p), d / p.name)
                    shutil.rmtree(out)
                else:
                    _, trace = _train_seg_worker((*args, str(d)))
                (d / "spec.json").write_text(json.dumps({"kind": kind, "spec": args[1]}, sort_keys=True))
                return {"final_loss": trace[-1][2]}

            stages.append(self._stage("train-seg", name(f), params, [pre], build))
        return stages

    def _load_model(self, st: Stage):
        meta = json.loads((st.dir / "spec.json").read_text())
        g = build_model(meta["kind"], meta["spec"])
        g.load(st.dir / "model.ckpt")
        return g

    # inference ------------------------------------------------------------
    def _predict_cases(self, g, cases: Sequence[PreprocessedCase], out: Path) -> None:
        patch = tuple(_tuples(self.cfg.train).get("patch_size", TrainConfig().patch_size))
        for c in cases:
            prob = predict_probability(g, c.image, patch=patch, overlap=self.cfg.inference_overlap)
            full = c.full_image.with_data(np.clip(c.to_original(prob.data), 0.0, 1.0).astype(np.float32))
            write_nifti(full, out / f"{c.case_id}_prob.nii")

    def predictions(self, kind: str) -> List[Stage]:
        """Test-set probability maps, one stage per trained model."""
        models = self.seg_models(kind)
        pre = self.preprocess()
        out = []
        for st in models:

            def build(d: Path, st=st):
                self._predict_cases(self._load_model(st), self.cases("test"), d)
                return {}

            params = {"model": st.name, "overlap": self.cfg.inference_overlap}
            out.append(self._stage("predict", f"predict-{st.name[len('train-seg-'):]}", params, [st, pre], build))
        return out

    def oof_predictions(self) -> Stage:
        """Out-of-fold U-Net probability maps for every training case."""
        models = self.seg_models("unet")
        pre = self.preprocess()
        folds = self.folds()

        def build(d: Path):
            cases = {c.case_id: c for c in self.cases("train")}
            for f, st in enumerate(models):
                self._predict_cases(self._load_model(st), [cases[cid] for cid in folds.val_ids(f)], d)
            return {}

        return self._stage("predict", "predict-oof-unet", {"overlap": self.cfg.inference_overlap}, [*models, pre], build)

    # fusion ---------------------------------------------------------------
    def prob_maps(self, source: str) -> Stage:
        """Per-test-case probability maps for ``unet`` (fold mean), ``unetpp`` or ``fused``."""
        if source == "unet":
            deps = self.predictions("unet")

            def build(d: Path):
                for p in sorted(deps[0].dir.glob("*_prob.nii")):
                    maps = [read_nifti(st.dir / p.name) for st in deps]
                    write_nifti(ensemble_average(maps), d / p.name)
                return {"maps": len(deps)}

            return self._stage("ensemble", "ensemble-unet", {"mode": "fold-mean"}, deps, build)
        if source == "unetpp":
            return self.predictions("unetpp")[0]
        if source == "fused":
            folds = self.predictions("unet")
            pp = self.predictions("unetpp")[0]
            mode = self.cfg.post.ensemble_mode

            def build(d: Path):
                for p in sorted(pp.dir.glob("*_prob.nii")):
                    fold_maps = [read_nifti(st.dir / p.name) for st in folds]
                    write_nifti(setting7_ensemble(fold_maps, read_nifti(p), mode), d / p.name)
                return {}

            return self._stage("ensemble", "ensemble-fused", {"mode": mode}, [*folds, pp], build)
        raise ValueError(f"unknown probability source {source!r}")

    # classifiers ----------------------------------------------------------
    def slice_classifier(self) -> Stage:
        cfg = self.cfg.classifier
        pre = self.preprocess()
        spec = _merge(cfg.densenet, {"seed": derive_seed(self.cfg.seed, "densenet-init")})
        train_cfg = _merge(cfg.train, {"seed": derive_seed(self.cfg.seed, "densenet-train")})
        params = {"spec": spec, "train": train_cfg, "slice_shape": list(cfg.slice_shape), "neck_exclude": cfg.neck_exclude}

        def build(d: Path):
            cohort = [(c.full_image, c.full_mask) for c in self.cases("train")]
            neck = cfg.neck_exclude if cfg.neck_exclude is not None else scaled_neck_exclude(cohort[0][0].shape[2])
            g = build_model("densenet", spec)
            res = train_slice_classifier(g, cohort, TrainConfig(**_tuples(train_cfg)), tuple(cfg.slice_shape), neck)
            g.save(d / "model.ckpt")
            (d / "spec.json").write_text(json.dumps({"kind": "densenet", "spec": spec}, sort_keys=True))
            write_loss_trace(d / "loss.csv", res.trace)
            X, y = slice_dataset(cohort, tuple(cfg.slice_shape), neck)
            return {"neck_exclude": neck, "train_accuracy": slice_accuracy(g, X, y), "slices": int(len(y)), "positive": int(y.sum())}

        return self._stage("train-clf", "train-clf", params, [pre], build)

    def fp_classifier(self) -> Stage:
        cfg = self.cfg.classifier
        post = self.cfg.post
        oof = self.oof_predictions()
        params = {
            "trees": cfg.gbt_trees,
            "depth": cfg.gbt_depth,
            "lr": cfg.gbt_learning_rate,
            "top_k": cfg.top_k,
            "max_voxels": cfg.max_fp_voxels,
            "radius": cfg.feature_radius,
            "voxel_gate": post.voxel_gate,
            "threshold": post.threshold,
            "connectivity": post.connectivity,
            "seed": self.cfg.seed,
        }

        def build(d: Path):
            rows, labels = [], []
            for c in self.cases("train"):
                prob = read_nifti(oof.dir / f"{c.case_id}_prob.nii")
                m = binarize(prob, post.threshold)
                stats = _intensity_stats(c.full_image)
                for comp in connected_components(m, post.connectivity):
                    if comp.count >= post.voxel_gate:
                        continue
                    shape = shape_features(comp.voxels, m.spacing)
                    rows.append(component_feature_matrix(c.full_image, comp.voxels, cfg.feature_radius, shape=shape, stats=stats))
                    labels.append(c.full_mask.data[tuple(comp.voxels.T)].astype(int))
            X = np.concatenate(rows) if rows else np.empty((0, len(FEATURE_NAMES)))
            y = np.concatenate(labels) if labels else np.empty(0, int)
            rng = np.random.default_rng(derive_seed(self.cfg.seed, "fp-subsample"))
            if len(y) > cfg.max_fp_voxels:
                keep = np.sort(rng.choice(len(y), cfg.max_fp_voxels, replace=False))
                X, y = X[keep], y[keep]
            write_feature_csv(d / "features.csv", X, FEATURE_NAMES, y)
            if len(y) < 2 or len(np.unique(y)) < 2:
                # nothing to discriminate: predict the observed true-positive rate
                model = GBTModel.constant(float(y.mean()) if len(y) else 1.0, FEATURE_NAMES)
                model.save(d / "model.json")
                return {"rows": int(len(y)), "constant": True}
            seed = derive_seed(self.cfg.seed, "gbt")
            full = train_gbt(X, y, cfg.gbt_trees, cfg.gbt_depth, cfg.gbt_learning_rate, seed, FEATURE_NAMES)
            top = select_top_k(full, min(cfg.top_k, len(FEATURE_NAMES)))
            cols = [FEATURE_NAMES.index(n) for n in top]
            model = train_gbt(X[:, cols], y, cfg.gbt_trees, cfg.gbt_depth, cfg.gbt_learning_rate, seed, top)
            model.save(d / "model.json")
            acc = float(np.mean((model.predict_proba(X[:, cols]) >= 0.5) == y))
            return {"rows": int(len(y)), "positives": int(y.sum()), "train_accuracy": acc, "top_features": top}

        return self._stage("train-fpclf", "train-fpclf", params, [oof], build)

    # settings -------------------------------------------------------------
    def postprocess(self, setting: int) -> Stage:
        source, use_slice, use_radiomics = SETTINGS[setting]
        post = self.cfg.post
        probs = self.prob_maps(source)
        deps = [probs, self.preprocess()]
        clf = self.slice_classifier() if use_slice else None
        fp = self.fp_classifier() if use_radiomics else None
        deps += [s for s in (clf, fp) if s is not None]
        params = {"setting": setting, "post": asdict(post)}

        def build(d: Path):
            cases = {c.case_id: c for c in self.cases("test")}
            slice_clf = None
            if clf is not None:
                slice_clf = SliceClassifier(self._load_model(clf), tuple(self.cfg.classifier.slice_shape))
            gbt = GBTModel.load(fp.dir / "model.json") if fp is not None else None
            entries = {}
            test_manifest = self.manifest("test")
            for p in sorted(probs.dir.glob("*_prob.nii")):
                cid = p.name[: -len("_prob.nii")]
                c = cases[cid]
                m = binarize(read_nifti(p), post.threshold)
                reports = []
                if slice_clf is not None:
                    m, rep = slice_filter(m, slice_clf, c.full_image, post.volume_gate_mm3, post.slice_fraction, cid)
                    reports.append(rep.to_dict())
                if gbt is not None:
                    m, rep = radiomics_filter(m, c.full_image, gbt, post.voxel_gate, post.connectivity, self.cfg.classifier.feature_radius, cid)
                    reports.append(rep.to_dict())
                write_nifti(m.to_volume(), d / f"{cid}_mask.nii")
                (d / f"{cid}_report.json").write_text(json.dumps(reports, indent=1, sort_keys=True))
                entry = dict(test_manifest[cid])
                entry["prediction"] = str((d / f"{cid}_mask.nii").resolve())
                entries[cid] = entry
            write_manifest(d / "predictions.json", entries)
            return {"cases": len(entries)}

        return self._stage("postprocess", f"postprocess-s{setting}", params, deps, build)

    def evaluate(self, setting: int) -> Stage:
        pp = self.postprocess(setting)
        params = {"min_volume_mm3": self.cfg.min_volume_mm3}

        def build(d: Path):
            results = evaluate_manifest(pp.dir / "predictions.json", self.cfg.min_volume_mm3)
            write_evaluation(d, results)
            return {}

        return self._stage("evaluate", f"evaluate-s{setting}", params, [pp], build)

    def provenance(self, setting: int, stage: Stage) -> Path:
        keys = {st.name: st.key for st in self._cache.values()}
        record = {
            "setting": setting,
            "seed": self.cfg.seed,
            "config": self.cfg.to_dict(),
            "stages": dict(sorted(keys.items())),
            "versions": {
                "tbiseg": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
        }
        path = self.work / "provenance" / f"setting{setting}-{stage.key}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(record, indent=1, sort_keys=True, default=str))
        return path


# ---------------------------------------------------------------------------
# Evaluation helpers shared with the CLI
# ---------------------------------------------------------------------------


def evaluate_manifest(path, min_volume_mm3: float = 0.0) -> List[CaseResult]:
    """Score every case of a manifest carrying ``mask`` and ``prediction`` paths."""
    results = []
    for cid, e in read_manifest(path).items():
        if not e.get("prediction") or not e.get("mask"):
            raise ValueError(f"{path}: case {cid} needs both mask and prediction")
        results.append(case_result(cid, read_mask(e["prediction"]), read_mask(e["mask"]), min_volume_mm3))
    return results


def metrics_dict(m: ChallengeMetrics) -> dict:
    return {"n": m.n, **m.as_row()}


def write_evaluation(d: Path, results: Sequence[CaseResult]) -> ChallengeMetrics:
    d = Path(d)
    d.mkdir(parents=True, exist_ok=True)
    metrics = challenge_metrics(results)
    (d / "metrics.json").write_text(json.dumps(metrics_dict(metrics), indent=1, sort_keys=True))
    with open(d / "cases.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(asdict(results[0])))
        w.writeheader()
        for r in sorted(results, key=lambda r: r.case_id):
            w.writerow(asdict(r))
    return metrics


def read_cases_csv(path) -> List[CaseResult]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                CaseResult(
                    row["case_id"],
                    float(row["dice"]),
                    row["gt_has_lesion"] == "True",
                    row["pred_has_lesion"] == "True",
                    float(row["gt_volume_mm3"]),
                    float(row["pred_volume_mm3"]),
                )
            )
    return out


def write_report(out_dir, manifests: Dict[str, Path], min_volume_mm3: float = 0.0) -> dict:
    """Results table, lesion-size scatter + Pearson r, paired t-tests and error heatmaps.

    ``manifests`` maps a setting label to a predictions manifest.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table, summary, per_setting = {}, {}, {}
    scatter_rows = []
    for label, path in manifests.items():
        entries = read_manifest(path)
        results, heat_cases = [], []
        for cid, e in entries.items():
            pred, gt = read_mask(e["prediction"]), read_mask(e["mask"])
            results.append(case_result(cid, pred, gt, min_volume_mm3))
            heat_cases.append((pred, gt, read_nifti(e["image"]) if e.get("image") else None))
            if gt.any():
                scatter_rows.append((label, cid, gt.volume_mm3(), dice(pred, gt)))
        metrics = challenge_metrics(results)
        table[label] = metrics
        per_setting[label] = {r.case_id: r.dice for r in results if r.gt_has_lesion}
        fp, fn = error_heatmap(heat_cases)
        write_nifti(fp, out / f"heatmap_fp_{label}.nii")
        write_nifti(fn, out / f"heatmap_fn_{label}.nii")
        pts = [(v, dsc) for lab, _, v, dsc in scatter_rows if lab == label]
        try:
            r = pearson_log_size([p[0] for p in pts], [p[1] for p in pts]) if len(pts) >= 2 else None
        except DegenerateError:
            r = None
        summary[label] = {"pearson_log_size": r, **metrics_dict(metrics)}
    write_results_table(out / "results_table.csv", table)
    with open(out / "lesion_size_scatter.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["setting", "case_id", "gt_volume_mm3", "dice"])
        for row in scatter_rows:
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3])])
    labels = list(manifests)
    tests = []
    for i, a in enumerate(labels):
        for b in labels[i + 1 :]:
            common = sorted(set(per_setting[a]) & set(per_setting[b]))
            entry = {"a": a, "b": b, "n": len(common), "t": None, "p": None}
            if len(common) >= 2:
                try:
                    t, p = paired_ttest([per_setting[a][c] for c in common], [per_setting[b][c] for c in common])
                    entry.update(t=t, p=p)
                except DegenerateError:
                    pass
            tests.append(entry)
    report = {"settings": summary, "paired_ttests_dsc_lesion": tests}
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report


def run_setting(cfg: PipelineConfig, progress=None) -> Tuple[ChallengeMetrics, Dict[str, Path]]:
    """Run (or reuse) every stage of ``cfg.setting``.

    Returns the challenge metrics and per-case output mask paths.
    """
    pipe = Pipeline(cfg, auto=True, progress=progress)
    ev = pipe.evaluate(cfg.setting)
    pp = pipe.postprocess(cfg.setting)
    pipe.provenance(cfg.setting, ev)
    metrics = challenge_metrics(read_cases_csv(ev.dir / "cases.csv"))
    masks = {p.name[: -len("_mask.nii")]: p for p in sorted(pp.dir.glob("*_mask.nii"))}
    return metrics, masks
