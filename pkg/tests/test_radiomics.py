from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from conftest import brute_glcm
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import pdist

from tbiseg.radiomics import (
    FEATURE_NAMES,
    GLCM_OFFSETS_3D,
    FeatureVector,
    GBTModel,
    SchemaError,
    TrainingError,
    first_order,
    glcm_features,
    glcm_matrix,
    predict_gbt,
    quantize,
    read_feature_csv,
    select_top_k,
    shape_features,
    train_gbt,
    voxel_features,
    write_feature_csv,
)
from tbiseg.volume import Mask, Volume

# first order -----------------------------------------------------------------------


def test_first_order_constant():
    f = first_order([3.0] * 7)
    mean, var, _, _, energy, entropy, lo, hi, p10, p90 = f
    assert var == 0 and entropy == 0 and lo == hi == mean == 3.0
    assert energy == 63.0 and p10 == p90 == 3.0


def test_first_order_hand_values():
    f = first_order([1, 2, 3, 4])
    assert f[0] == 2.5 and f[1] == 1.25
    assert f[2] == pytest.approx(0.0, abs=1e-12)
    assert f[3] == pytest.approx((2 * 1.5**4 + 2 * 0.5**4) / 4 / 1.25**2)
    assert f[4] == 30.0
    assert f[5] == pytest.approx(2.0)  # four equally filled bins


def test_first_order_symmetric_skew_and_empty():
    assert first_order([-3, -1, 0, 1, 3])[2] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        first_order([])


# shape -------------------------------------------------------------------------------


def test_single_voxel_shape():
    v, a, s, d = shape_features(np.ones((1, 1, 1), bool))
    assert (v, a, d) == (1.0, 6.0, 0.0)
    assert s == pytest.approx(math.pi ** (1 / 3) * 6 ** (2 / 3) / 6, abs=1e-12)
    assert s == pytest.approx(0.80600, abs=5e-6)


def test_cube_shape():
    v, a, _, d = shape_features(np.ones((2, 2, 2), bool))
    assert v == 8 and a == 24 and d == pytest.approx(math.sqrt(3))


def test_anisotropic_spacing_area():
    v, a, _, _ = shape_features(np.ones((1, 1, 1), bool), (1.0, 2.0, 3.0))
    assert v == 6.0 and a == 2 * (2 * 3 + 1 * 3 + 1 * 2)


def _ball(r):
    n = 2 * r + 3
    c = (n - 1) / 2
    i, j, k = np.indices((n, n, n))
    return ((i - c) ** 2 + (j - c) ** 2 + (k - c) ** 2) <= r * r


def test_voxelized_sphere_sphericity_limit():
    # exposed-face area of a voxelized sphere tends to 3/2 of the smooth
    # area (mean |nx|+|ny|+|nz| over the sphere), so sphericity -> 2/3
    s10 = shape_features(_ball(10))[2]
    s20 = shape_features(_ball(20))[2]
    assert abs(s10 - 2 / 3) < 0.02
    assert abs(s20 - 2 / 3) < abs(s10 - 2 / 3)


def test_shape_translation_invariant_and_diameter_oracle(rng):
    m = rng.random((6, 5, 7)) < 0.4
    m[0, 0, 0] = True
    a = shape_features(m)
    b = shape_features(np.argwhere(m) + np.array([10, 3, 7]))
    assert np.allclose(a, b)
    assert a[3] == pytest.approx(pdist(np.argwhere(m)).max())
    big = _ball(8)
    assert shape_features(big)[3] == pytest.approx(pdist(np.argwhere(big)).max())


def test_shape_empty_rejected():
    with pytest.raises(ValueError):
        shape_features(np.zeros((2, 2, 2), bool))


# GLCM --------------------------------------------------------------------------------


def test_glcm_constant_patch():
    f = glcm_features(np.full((3, 3, 3), 7.0))
    contrast, corr, energy, homog, entropy = f
    assert contrast == 0 and energy == 1 and homog == 1 and corr == 0 and entropy == 0


def test_glcm_two_voxel_patch():
    p = glcm_matrix(np.array([0.0, 5.0]), levels=2, offsets=[(1,)])
    assert np.array_equal(p, [[0, 0.5], [0.5, 0]])
    f = glcm_features(np.array([0.0, 5.0]), levels=2, offsets=[(1,)])
    assert f[0] == 1.0 and f[2] == 0.5


def test_checkerboard_contrast_exceeds_constant():
    board = (np.indices((4, 4, 4)).sum(axis=0) % 2).astype(float)
    assert glcm_features(board)[0] > glcm_features(np.ones((4, 4, 4)))[0]


def test_glcm_rejects_bad_arguments():
    with pytest.raises(ValueError):
        glcm_matrix(np.arange(8.0), levels=1)
    with pytest.raises(ValueError):
        glcm_matrix(np.array([1.0]))


def test_glcm_matches_brute_force_oracle():
    rng = np.random.default_rng(7)
    for i in range(60):
        shape = tuple(int(s) for s in rng.integers(2, 6, 3))
        levels = int(rng.integers(2, 9))
        vals = rng.normal(size=shape)
        if i % 5 == 0:
            vals = np.round(vals)  # ties and repeated grey levels
        got = glcm_matrix(vals, levels)
        want = brute_glcm(quantize(vals, levels), levels, GLCM_OFFSETS_3D)
        assert np.array_equal(got, want), (shape, levels)


def test_glcm_offsets_are_the_13_unique_directions():
    offs = {tuple(o) for o in GLCM_OFFSETS_3D}
    assert len(offs) == 13
    full = [o for o in itertools.product((-1, 0, 1), repeat=3) if any(o)]
    assert all((o in offs) != (tuple(-c for c in o) in offs) for o in full)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_features_invariant_to_enumeration_order(seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=27)
    perm = rng.permutation(27)
    assert np.allclose(first_order(vals), first_order(vals[perm]))
    idx = np.argwhere(rng.random((4, 4, 4)) < 0.5)
    if len(idx):
        assert np.allclose(shape_features(idx), shape_features(idx[rng.permutation(len(idx))]))


def test_glcm_transpose_symmetry(rng):
    vals = rng.normal(size=(4, 5, 3))
    p = glcm_matrix(vals)
    assert np.allclose(p, p.T) and p.sum() == pytest.approx(1.0)


# per-voxel vectors ---------------------------------------------------------------------------


def test_voxel_features_schema_and_shared_shape(rng):
    d = np.zeros((10, 10, 10), np.uint8)
    d[2:6, 2:5, 3:7] = 1
    v = Volume(rng.normal(100, 5, d.shape).astype(np.float32))
    a = voxel_features(v, Mask(d), (2, 2, 3))
    b = voxel_features(v, Mask(d), (5, 4, 6))
    assert a.names == b.names == tuple(FEATURE_NAMES) and len(a.values) == 20
    assert np.array_equal(a.values[15:19], b.values[15:19])
    with pytest.raises(ValueError):
        voxel_features(v, Mask(d), (0, 0, 0))


def test_voxel_features_uniform_volume():
    d = np.zeros((9, 9, 9), np.uint8)
    d[4, 4, 4] = 1
    v = Volume(np.full(d.shape, 5.0, np.float32))
    f = voxel_features(v, Mask(d), (4, 4, 4), radius=2)
    assert np.allclose(f.values[:10], first_order([5.0] * 125))


def test_feature_vector_validation():
    with pytest.raises(SchemaError):
        FeatureVector(np.zeros(3), ("a", "b"))
    with pytest.raises(SchemaError):
        FeatureVector(np.zeros(2), ("a", "a"))
    with pytest.raises(ValueError):
        FeatureVector(np.array([np.nan]), ("a",))
    fv = FeatureVector(np.array([1.0, 2.0]), ("a", "b"))
    assert fv["b"] == 2.0 and fv.select(["b"]).values.tolist() == [2.0]
    with pytest.raises(SchemaError):
        fv.select(["c"])


# GBT ----------------------------------------------------------------------------------------


def test_gbt_separable_1d():
    x = np.concatenate([np.linspace(-2, -0.1, 20), np.linspace(0.1, 2, 20)])[:, None]
    y = (x[:, 0] > 0).astype(int)
    model = train_gbt(x, y, trees=1, depth=1, learning_rate=1.0)
    assert np.mean((model.predict_proba(x) > 0.5) == y) == 1.0
    assert all(b <= a for a, b in zip(model.loss_trace, model.loss_trace[1:]))


def test_gbt_separable_multivariate_loss_monotone(rng):
    X = rng.normal(size=(200, 5))
    y = (X @ np.array([1.0, -2.0, 0.5, 0.0, 1.0]) > 0).astype(int)
    model = train_gbt(X, y, trees=60, depth=3, learning_rate=0.3)
    assert np.mean((model.predict_proba(X) > 0.5) == y) == 1.0
    assert np.all(np.diff(model.loss_trace) <= 0)


def test_gbt_noise_labels_near_majority():
    accs, majority = [], []
    for seed in range(5):
        r = np.random.default_rng(seed)
        X = r.normal(size=(400, 3))
        y = (r.random(400) < 0.7).astype(int)
        model = train_gbt(X, y, trees=5, depth=2, seed=seed)
        Xt = r.normal(size=(400, 3))
        yt = (r.random(400) < 0.7).astype(int)
        accs.append(np.mean((model.predict_proba(Xt) > 0.5) == yt))
        majority.append(max(yt.mean(), 1 - yt.mean()))
    assert abs(np.mean(accs) - np.mean(majority)) <= 0.1


def test_gbt_zero_trees_prior():
    y = np.array([0, 0, 0, 1])
    model = train_gbt(np.arange(4.0)[:, None], y, trees=0)
    assert np.allclose(model.predict_proba(np.zeros((3, 1))), 0.25)
    assert model.base_score == pytest.approx(math.log(0.25 / 0.75))


def test_gbt_training_errors():
    with pytest.raises(TrainingError):
        train_gbt(np.zeros((3, 1)), [1, 1, 1])
    with pytest.raises(TrainingError):
        train_gbt(np.zeros((1, 1)), [1])
    with pytest.raises(TrainingError):
        train_gbt(np.zeros((2, 1)), [0, 2])
    with pytest.raises(SchemaError):
        train_gbt(np.zeros((2, 2)), [0, 1], feature_names=["a"])


def test_gbt_deterministic_and_depth(rng):
    X = rng.normal(size=(100, 4))
    y = (X[:, 0] + 0.3 * rng.normal(size=100) > 0).astype(int)
    a = train_gbt(X, y, trees=10, depth=2, subsample=0.7, seed=3)
    b = train_gbt(X, y, trees=10, depth=2, subsample=0.7, seed=3)
    assert a.to_json() == b.to_json()
    assert all(t.depth() <= 2 for t in a.trees)


def test_informative_feature_ranks_first(rng):
    X = rng.normal(size=(300, 10))
    y = (X[:, 6] > 0.2).astype(int)
    names = [f"n{i}" for i in range(10)]
    model = train_gbt(X, y, trees=20, feature_names=names)
    top = select_top_k(model, 10)
    assert top[0] == "n6" and sorted(top) == sorted(names)
    with pytest.raises(ValueError):
        select_top_k(model, 11)


def test_top_k_ties_follow_schema_order():
    model = GBTModel([], 0.3, 0.0, ["a", "b", "c", "d"], [0.0, 2.0, 0.0, 2.0])
    assert select_top_k(model, 4) == ["b", "d", "a", "c"]


def test_probabilities_in_unit_interval(rng):
    X = rng.normal(size=(50, 3)) * 100
    y = (X[:, 0] > 0).astype(int)
    model = train_gbt(X, y, trees=30, learning_rate=1.0)
    p = model.predict_proba(rng.normal(size=(100, 3)) * 1e6)
    assert np.all((p >= 0) & (p <= 1))


def test_schema_enforcement_and_projection(rng):
    X = rng.normal(size=(80, 20))
    y = (X[:, 3] - X[:, 17] > 0).astype(int)
    full = train_gbt(X, y, trees=10, feature_names=FEATURE_NAMES)
    keep = select_top_k(full, 5)
    cols = [FEATURE_NAMES.index(n) for n in keep]
    sub = train_gbt(X[:, cols], y, trees=10, feature_names=keep)
    # projection by name equals training columns; other columns are irrelevant
    noisy = X.copy()
    other = [i for i in range(20) if i not in cols]
    noisy[:, other] = rng.normal(size=(80, len(other))) * 1e3
    assert np.array_equal(sub.predict_proba(X, FEATURE_NAMES), sub.predict_proba(noisy, FEATURE_NAMES))
    assert np.array_equal(sub.predict_proba(X, FEATURE_NAMES), sub.predict_proba(X[:, cols]))
    with pytest.raises(SchemaError):
        sub.predict_proba(X)  # wrong width without names
    with pytest.raises(SchemaError):
        sub.predict_proba(X[:, :5], ["a", "b", "c", "d", "e"])
    fv = FeatureVector(X[0], tuple(FEATURE_NAMES))
    assert predict_gbt(sub, fv)[0] == pytest.approx(sub.predict_proba(X[:1, cols])[0])
    with pytest.raises(SchemaError):
        predict_gbt(sub, FeatureVector(X[0, :3], ("x", "y", "z")))


def test_gbt_json_roundtrip(tmp_path, rng):
    X = rng.normal(size=(60, 3))
    y = (X[:, 1] > 0).astype(int)
    model = train_gbt(X, y, trees=5, feature_names=["a", "b", "c"])
    path = tmp_path / "gbt.json"
    model.save(path)
    back = GBTModel.load(path)
    assert np.array_equal(back.predict_proba(X), model.predict_proba(X))
    assert back.schema == model.schema
    text = model.to_json().replace(model.schema, "000000000000")
    with pytest.raises(SchemaError):
        GBTModel.from_json(text)


def test_constant_model():
    m = GBTModel.constant(0.8, ["a", "b"])
    assert np.allclose(m.predict_proba(np.zeros((4, 2))), 0.8)


def test_feature_csv_roundtrip(tmp_path, rng):
    X = rng.normal(size=(4, 3))
    p = tmp_path / "f.csv"
    write_feature_csv(p, X, ["a", "b", "c"], np.array([0, 1, 1, 0]))
    X2, names, labels = read_feature_csv(p)
    assert np.array_equal(X, X2) and names == ["a", "b", "c"] and labels.tolist() == [0, 1, 1, 0]
