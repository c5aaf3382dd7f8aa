"""Voxel-level radiomics features and a gradient-boosted tree classifier.

Feature schema (20 values, fixed order): ten first-order statistics and five
GLCM texture features over a cubic neighbourhood of the voxel, four shape
features of the voxel's connected component, and the voxel's normalized
intensity.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.distance import pdist

from .volume import Mask, Volume, voxel_volume_mm3

__all__ = [
    "FIRST_ORDER_NAMES",
    "GLCM_NAMES",
    "SHAPE_NAMES",
    "FEATURE_NAMES",
    "GLCM_OFFSETS_3D",
    "FeatureVector",
    "first_order",
    "shape_features",
    "quantize",
    "glcm_matrix",
    "glcm_features",
    "voxel_features",
    "component_feature_matrix",
    "schema_id",
    "SchemaError",
    "TrainingError",
    "Tree",
    "GBTModel",
    "train_gbt",
    "predict_gbt",
    "select_top_k",
    "write_feature_csv",
    "read_feature_csv",
]

FIRST_ORDER_NAMES = [
    "fo_mean",
    "fo_variance",
    "fo_skewness",
    "fo_kurtosis",
    "fo_energy",
    "fo_entropy",
    "fo_min",
    "fo_max",
    "fo_p10",
    "fo_p90",
]
GLCM_NAMES = ["glcm_contrast", "glcm_correlation", "glcm_energy", "glcm_homogeneity", "glcm_entropy"]
SHAPE_NAMES = ["shape_volume_mm3", "shape_surface_mm2", "shape_sphericity", "shape_max_diameter_mm"]
FEATURE_NAMES = FIRST_ORDER_NAMES + GLCM_NAMES + SHAPE_NAMES + ["intensity_z"]

# the 13 unique directions of the 26-neighbourhood
GLCM_OFFSETS_3D = [
    (0, 0, 1),
    (0, 1, -1),
    (0, 1, 0),
    (0, 1, 1),
    (1, -1, -1),
    (1, -1, 0),
    (1, -1, 1),
    (1, 0, -1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, -1),
    (1, 1, 0),
    (1, 1, 1),
]


class SchemaError(ValueError):
    pass


class TrainingError(ValueError):
    pass


def schema_id(names: Sequence[str]) -> str:
    return hashlib.sha1("\n".join(names).encode()).hexdigest()[:12]


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    names: Tuple[str, ...]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        names = tuple(self.names)
        if len(vals) != len(names):
            raise SchemaError(f"{len(vals)} values for {len(names)} names")
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        if not np.all(np.isfinite(vals)):
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "names", names)

    @property
    def schema(self) -> str:
        return schema_id(self.names)

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def select(self, names: Sequence[str]) -> "FeatureVector":
        try:
            idx = [self.names.index(n) for n in names]
        except ValueError as exc:
            raise SchemaError(str(exc)) from None
        return FeatureVector(self.values[idx], tuple(names))


# ---------------------------------------------------------------------------
# Feature families
# ---------------------------------------------------------------------------


def first_order(values) -> np.ndarray:
    """Population moments, energy, 32-bin entropy, extrema and 10th/90th percentiles."""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("first_order needs at least one value")
    mean = x.mean()
    dev = x - mean
    var = float(np.mean(dev**2))
    if var > 0:
        skew = float(np.mean(dev**3) / var**1.5)
        kurt = float(np.mean(dev**4) / var**2)
    else:
        skew, kurt = 0.0, 0.0
    lo, hi = float(x.min()), float(x.max())
    if hi > lo:
        counts, _ = np.histogram(x, bins=32, range=(lo, hi))
        p = counts[counts > 0] / x.size
        entropy = float(-(p * np.log2(p)).sum())
    else:
        entropy = 0.0
    p10, p90 = np.percentile(x, [10, 90])
    return np.array([mean, var, skew, kurt, float(np.sum(x**2)), entropy, lo, hi, p10, p90])


def _face_count(mask: np.ndarray, spacing) -> float:
    """Exposed-face area of a voxelized region."""
    padded = np.pad(mask.astype(bool), 1)
    sx, sy, sz = spacing
    face_area = (sy * sz, sx * sz, sx * sy)
    area = 0.0
    for axis in range(3):
        diff = np.diff(padded.astype(np.int8), axis=axis)
        area += np.count_nonzero(diff) * face_area[axis]
    return area


def shape_features(component, spacing=None) -> np.ndarray:
    """Volume mm³, surface area mm², sphericity and maximum 3D diameter mm.

    ``component`` is a :class:`LesionComponent`, a boolean mask, or an
    (n, 3) array of voxel indices.
    """
    if hasattr(component, "voxels"):
        idx = np.asarray(component.voxels)
        spacing = spacing if spacing is not None else component.spacing
    else:
        arr = np.asarray(component)
        idx = np.argwhere(arr) if arr.ndim == 3 else arr
    spacing = tuple(float(s) for s in (spacing if spacing is not None else (1.0, 1.0, 1.0)))
    if idx.size == 0:
        raise ValueError("shape features need a nonempty component")
    lo = idx.min(axis=0)
    box = np.zeros(tuple(idx.max(axis=0) - lo + 1), dtype=bool)
    box[tuple((idx - lo).T)] = True
    volume = idx.shape[0] * voxel_volume_mm3(spacing)
    area = _face_count(box, spacing)
    sphericity = math.pi ** (1 / 3) * (6 * volume) ** (2 / 3) / area
    return np.array([volume, area, sphericity, _max_diameter(idx * np.asarray(spacing))])


def _max_diameter(pts: np.ndarray) -> float:
    """Largest pairwise distance; attained between convex-hull vertices."""
    if len(pts) < 2:
        return 0.0
    if len(pts) > 64:
        # joggle handles flat / collinear point sets; vertices index the input
        pts = pts[ConvexHull(pts, qhull_options="QJ").vertices]
    return float(pdist(pts).max())


def quantize(values: np.ndarray, levels: int) -> np.ndarray:
    """Equal-width binning of ``values`` into ``0..levels-1`` over [min, max]."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.intp)
    q = np.floor((v - lo) / (hi - lo) * levels).astype(np.intp)
    return np.clip(q, 0, levels - 1)


def glcm_matrix(values: np.ndarray, levels: int = 8, offsets=None) -> np.ndarray:
    """Symmetric, normalized co-occurrence matrix summed over ``offsets``.

    ``values`` may be 1D, 2D or 3D; offsets default to the 13 3D directions
    (truncated to the array's rank).
    """
    if levels < 2:
        raise ValueError("levels must be >= 2")
    arr = np.asarray(values)
    if arr.size < 2:
        raise ValueError("GLCM needs at least 2 voxels")
    offsets = GLCM_OFFSETS_3D if offsets is None else offsets
    q = quantize(arr, levels)
    nd = q.ndim
    mat = np.zeros((levels, levels), dtype=np.float64)
    for off in offsets:
        off = tuple(off)[:nd] if len(off) >= nd else tuple(off) + (0,) * (nd - len(off))
        if not any(off):
            continue
        src, dst = [], []
        for o, n in zip(off, q.shape):
            src.append(slice(max(0, -o), n - max(0, o)))
            dst.append(slice(max(0, o), n - max(0, -o)))
        a = q[tuple(src)].ravel()
        b = q[tuple(dst)].ravel()
        if a.size == 0:
            continue
        np.add.at(mat, (a, b), 1.0)
        np.add.at(mat, (b, a), 1.0)
    total = mat.sum()
    return mat / total if total > 0 else mat


def glcm_features(values, levels: int = 8, offsets=None) -> np.ndarray:
    """Contrast, correlation, energy, homogeneity, entropy (Haralick).

    A patch without any valid neighbour pair (or a constant patch) yields
    the constant-image values: contrast 0, correlation 0, energy 1,
    homogeneity 1, entropy 0.
    """
    p = glcm_matrix(values, levels, offsets)
    if p.sum() == 0:
        return np.array([0.0, 0.0, 1.0, 1.0, 0.0])
    i, j = np.indices(p.shape)
    contrast = float(np.sum(p * (i - j) ** 2))
    mu_i, mu_j = float(np.sum(i * p)), float(np.sum(j * p))
    sd_i = math.sqrt(float(np.sum(p * (i - mu_i) ** 2)))
    sd_j = math.sqrt(float(np.sum(p * (j - mu_j) ** 2)))
    if sd_i > 0 and sd_j > 0:
        corr = float(np.sum(p * (i - mu_i) * (j - mu_j)) / (sd_i * sd_j))
    else:
        corr = 0.0
    energy = float(np.sum(p**2))
    homogeneity = float(np.sum(p / (1.0 + (i - j) ** 2)))
    nz = p[p > 0]
    entropy = float(-np.sum(nz * np.log2(nz)))
    return np.array([contrast, corr, energy, homogeneity, entropy])


# ---------------------------------------------------------------------------
# Per-voxel vectors
# ---------------------------------------------------------------------------


def _neighbourhood(data: np.ndarray, voxel, radius: int) -> np.ndarray:
    sl = tuple(slice(max(0, c - radius), min(n, c + radius + 1)) for c, n in zip(voxel, data.shape))
    return data[sl]


def _intensity_stats(v: Volume) -> Tuple[float, float]:
    vals = v.data[v.data != 0].astype(np.float64)
    if vals.size < 2:
        vals = v.data.astype(np.float64).ravel()
    sd = float(vals.std())
    return float(vals.mean()), sd if sd > 0 else 1.0


def component_feature_matrix(
    v: Volume,
    voxels: np.ndarray,
    radius: int = 2,
    levels: int = 8,
    shape: Optional[np.ndarray] = None,
    stats: Optional[Tuple[float, float]] = None,
) -> np.ndarray:
    """Feature rows (len(voxels), 20) for voxels of one connected component."""
    voxels = np.asarray(voxels).reshape(-1, 3)
    if shape is None:
        shape = shape_features(voxels, v.spacing)
    mean, sd = stats if stats is not None else _intensity_stats(v)
    rows = np.empty((len(voxels), len(FEATURE_NAMES)))
    for r, vox in enumerate(voxels):
        patch = _neighbourhood(v.data, tuple(int(c) for c in vox), radius)
        rows[r, :10] = first_order(patch)
        rows[r, 10:15] = glcm_features(patch, levels)
        rows[r, 15:19] = shape
        rows[r, 19] = (float(v.data[tuple(vox)]) - mean) / sd
    return rows


def voxel_features(v: Volume, m: Mask, voxel, radius: int = 2, levels: int = 8, connectivity: int = 26) -> FeatureVector:
    """Feature vector of one mask voxel (schema :data:`FEATURE_NAMES`)."""
    from .postprocess import component_of

    voxel = tuple(int(c) for c in voxel)
    if not m.data[voxel]:
        raise ValueError(f"voxel {voxel} is outside the mask")
    comp = component_of(m, voxel, connectivity)
    shape = shape_features(comp.voxels, m.spacing)
    row = component_feature_matrix(v, np.array([voxel]), radius, levels, shape)[0]
    return FeatureVector(row, tuple(FEATURE_NAMES))


# ---------------------------------------------------------------------------
# Gradient-boosted trees (logistic loss, second-order split gain)
# ---------------------------------------------------------------------------


@dataclass
class Tree:
    """Flat binary tree: internal nodes split ``x[feature] <= threshold``."""

    feature: List[int] = field(default_factory=list)
    threshold: List[float] = field(default_factory=list)
    left: List[int] = field(default_factory=list)
    right: List[int] = field(default_factory=list)
    value: List[float] = field(default_factory=list)

    def _new(self, value: float = 0.0) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.value) - 1

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(len(X))
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        val = np.asarray(self.value)
        node = np.zeros(len(X), dtype=np.intp)
        active = feat[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            n = node[rows]
            go_left = X[rows, feat[n]] <= thr[n]
            node[rows] = np.where(go_left, left[n], right[n])
            active = feat[node] >= 0
        out[:] = val[node]
        return out

    def depth(self) -> int:
        def d(i):
            return 0 if self.feature[i] < 0 else 1 + max(d(self.left[i]), d(self.right[i]))

        return d(0) if self.value else 0

    def to_dict(self, i: int = 0) -> dict:
        if self.feature[i] < 0:
            return {"leaf": self.value[i]}
        return {
            "feature": self.feature[i],
            "threshold": self.threshold[i],
            "left": self.to_dict(self.left[i]),
            "right": self.to_dict(self.right[i]),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        t = cls()

        def build(node) -> int:
            i = t._new(node.get("leaf", 0.0))
            if "leaf" not in node:
                t.feature[i] = int(node["feature"])
                t.threshold[i] = float(node["threshold"])
                t.left[i] = build(node["left"])
                t.right[i] = build(node["right"])
            return i

        build(d)
        return t


@dataclass
class GBTModel:
    trees: List[Tree]
    learning_rate: float
    base_score: float  # prior log-odds
    feature_names: List[str]
    importance: List[float]
    max_depth: int = 3
    loss_trace: List[float] = field(default_factory=list)

    @property
    def schema(self) -> str:
        return schema_id(self.feature_names)

    @classmethod
    def constant(cls, probability: float, feature_names: Sequence[str]) -> "GBTModel":
        """A tree-less model predicting ``probability`` everywhere."""
        p = min(max(probability, 1e-12), 1 - 1e-12)
        names = list(feature_names)
        return cls([], 1.0, math.log(p / (1 - p)), names, [0.0] * len(names), 0)

    def _matrix(self, X) -> np.ndarray:
        if isinstance(X, FeatureVector):
            if X.schema != self.schema:
                X = X.select(self.feature_names)
            return X.values[None, :]
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.shape[1] != len(self.feature_names):
            raise SchemaError(f"expected {len(self.feature_names)} features, got {arr.shape[1]}")
        return arr

    def decision_function(self, X) -> np.ndarray:
        X = self._matrix(X)
        out = np.full(len(X), self.base_score)
        for t in self.trees:
            out += t.predict(X)
        return out

    def predict_proba(self, X, names: Optional[Sequence[str]] = None) -> np.ndarray:
        """Probability of the positive class per row.

        With ``names`` the columns of ``X`` are matched by name, so a matrix
        in a wider schema is projected onto this model's features.
        """
        if names is not None:
            names = list(names)
            if names != self.feature_names:
                try:
                    X = np.asarray(X)[:, [names.index(n) for n in self.feature_names]]
                except ValueError as exc:
                    raise SchemaError(str(exc)) from None
        z = self.decision_function(X)
        return 1.0 / (1.0 + np.exp(-z))

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema": self.schema,
                "feature_names": self.feature_names,
                "learning_rate": self.learning_rate,
                "base_score": self.base_score,
                "max_depth": self.max_depth,
                "importance": self.importance,
                "loss_trace": self.loss_trace,
                "trees": [t.to_dict() for t in self.trees],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "GBTModel":
        d = json.loads(text)
        model = cls(
            trees=[Tree.from_dict(t) for t in d["trees"]],
            learning_rate=d["learning_rate"],
            base_score=d["base_score"],
            feature_names=list(d["feature_names"]),
            importance=list(d["importance"]),
            max_depth=d.get("max_depth", 3),
            loss_trace=list(d.get("loss_trace", [])),
        )
        if d.get("schema") and d["schema"] != model.schema:
            raise SchemaError("stored schema id does not match feature names")
        return model

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "GBTModel":
        return cls.from_json(Path(path).read_text())


def _logloss(y: np.ndarray, z: np.ndarray) -> float:
    # log(1 + e^z) - y z, computed stably
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def _best_split(X, g, h, rows, reg_lambda, min_child_weight):
    G, H = g[rows].sum(), h[rows].sum()
    parent = G * G / (H + reg_lambda)
    best = (0.0, -1, 0.0)
    for f in range(X.shape[1]):
        xs = X[rows, f]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        gl = np.cumsum(g[rows][order])[:-1]
        hl = np.cumsum(h[rows][order])[:-1]
        valid = (xs[1:] > xs[:-1]) & (hl >= min_child_weight) & (H - hl >= min_child_weight)
        if not valid.any():
            continue
        gain = gl**2 / (hl + reg_lambda) + (G - gl) ** 2 / (H - hl + reg_lambda) - parent
        gain = np.where(valid, gain, -np.inf)
        k = int(np.argmax(gain))
        if gain[k] > best[0] + 1e-12:
            best = (float(gain[k]), f, float((xs[k] + xs[k + 1]) / 2.0))
    return best


def _grow(X, g, h, rows, depth, params, tree, importance) -> int:
    G, H = g[rows].sum(), h[rows].sum()
    node = tree._new(-G / (H + params["reg_lambda"]))
    if depth >= params["depth"] or len(rows) < 2:
        return node
    gain, f, thr = _best_split(X, g, h, rows, params["reg_lambda"], params["min_child_weight"])
    if f < 0:
        return node
    importance[f] += gain
    mask = X[rows, f] <= thr
    tree.feature[node] = f
    tree.threshold[node] = thr
    tree.left[node] = _grow(X, g, h, rows[mask], depth + 1, params, tree, importance)
    tree.right[node] = _grow(X, g, h, rows[~mask], depth + 1, params, tree, importance)
    return node


def train_gbt(
    X,
    y,
    trees: int = 50,
    depth: int = 3,
    learning_rate: float = 0.3,
    seed: int = 0,
    feature_names: Optional[Sequence[str]] = None,
    reg_lambda: float = 1.0,
    min_child_weight: float = 1e-3,
    subsample: float = 1.0,
) -> GBTModel:
    """Newton boosting of depth-limited trees on the logistic loss.

    Splits are found by exact greedy search over sorted feature values.
    Each round's leaf values are shrunk by ``learning_rate`` and, if the
    training loss would rise, halved until it does not, so the recorded
    loss trace is non-increasing.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or len(X) != len(y) or len(y) < 2:
        raise TrainingError("need a 2D feature matrix with >= 2 rows matching the labels")
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise TrainingError("labels must be 0/1")
    if len(np.unique(y)) < 2:
        raise TrainingError("both classes must be present")
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise SchemaError("feature_names length does not match X")
    rng = np.random.default_rng(seed)
    prior = float(np.clip(y.mean(), 1e-12, 1 - 1e-12))
    base = math.log(prior / (1 - prior))
    z = np.full(len(y), base)
    params = {"depth": depth, "reg_lambda": reg_lambda, "min_child_weight": min_child_weight}
    importance = np.zeros(X.shape[1])
    model = GBTModel([], learning_rate, base, names, [], depth, [_logloss(y, z)])
    for _ in range(trees):
        p = 1.0 / (1.0 + np.exp(-z))
        g, h = p - y, p * (1 - p)
        rows = np.arange(len(y))
        if subsample < 1.0:
            rows = np.sort(rng.choice(len(y), max(2, int(subsample * len(y))), replace=False))
        tree = Tree()
        round_imp = np.zeros_like(importance)
        _grow(X, g, h, rows, 0, params, tree, round_imp)
        step = tree.predict(X)
        scale = learning_rate
        prev = model.loss_trace[-1]
        while scale > 1e-8 and _logloss(y, z + scale * step) > prev:
            scale *= 0.5
        if _logloss(y, z + scale * step) > prev:
            scale = 0.0
        tree.value = [v * scale for v in tree.value]
        z = z + scale * step
        importance += round_imp if scale > 0 else 0.0
        model.trees.append(tree)
        model.loss_trace.append(_logloss(y, z))
    model.importance = importance.tolist()
    for a, b in zip(model.loss_trace, model.loss_trace[1:]):
        if b > a + 1e-12:
            raise TrainingError("boosting loss increased")
    return model


def predict_gbt(model: GBTModel, x) -> np.ndarray:
    """Positive-class probability; a :class:`FeatureVector` must carry every model feature."""
    if isinstance(x, FeatureVector) and not set(model.feature_names) <= set(x.names):
        raise SchemaError("feature vector lacks model features")
    return model.predict_proba(x)


def select_top_k(model: GBTModel, k: int) -> List[str]:
    """Feature names ranked by total split gain; ties keep schema order."""
    if not 0 <= k <= len(model.feature_names):
        raise ValueError(f"k={k} outside [0, {len(model.feature_names)}]")
    order = sorted(range(len(model.feature_names)), key=lambda i: (-model.importance[i], i))
    return [model.feature_names[i] for i in order[:k]]


def write_feature_csv(path, X: np.ndarray, names: Sequence[str], labels: Optional[np.ndarray] = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(names) + (["label"] if labels is not None else []))
        for i, row in enumerate(np.asarray(X)):
            vals = [repr(float(v)) for v in row]
            if labels is not None:
                vals.append(int(labels[i]))
            w.writerow(vals)


def read_feature_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    has_label = header[-1] == "label"
    names = header[:-1] if has_label else header
    data = np.array([[float(v) for v in r] for r in body]) if body else np.empty((0, len(header)))
    if has_label:
        return data[:, :-1], names, data[:, -1].astype(int)
    return data, names, None
