"""Binarization, connected components, ensemble fusion and false-positive filters."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .nn import Graph
from .training import fit_slice
from .volume import BoundingBox, Mask, Volume, voxel_volume_mm3

__all__ = [
    "LesionComponent",
    "FilterReport",
    "binarize",
    "label_components",
    "connected_components",
    "component_of",
    "ensemble_average",
    "setting7_ensemble",
    "SliceClassifier",
    "slice_filter",
    "radiomics_filter",
    "DEFAULT_VOLUME_GATE_MM3",
    "DEFAULT_SLICE_FRACTION",
    "DEFAULT_VOXEL_GATE",
]

DEFAULT_VOLUME_GATE_MM3 = 2000.0
DEFAULT_SLICE_FRACTION = 0.5
DEFAULT_VOXEL_GATE = 1000


@dataclass(frozen=True, eq=False)
class LesionComponent:
    label: int
    voxels: np.ndarray  # (count, 3) indices in raster order
    spacing: Tuple[float, float, float]
    mean_intensity: Optional[float] = None

    @property
    def count(self) -> int:
        return int(len(self.voxels))

    @property
    def volume_mm3(self) -> float:
        return self.count * voxel_volume_mm3(self.spacing)

    @property
    def bbox(self) -> BoundingBox:
        return BoundingBox(self.voxels.min(axis=0), self.voxels.max(axis=0) + 1)


@dataclass
class FilterReport:
    """Audit record of one filter decision on one case."""

    filter: str
    applied: bool
    reason: str
    voxels_in: int
    voxels_out: int
    slices_segmented: int = 0
    slices_no_lesion: int = 0
    fraction: float = 0.0
    components_removed: int = 0
    case_id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        if not 0 <= self.voxels_out <= self.voxels_in:
            raise ValueError("a filter cannot add voxels")

    @property
    def voxels_removed(self) -> int:
        return self.voxels_in - self.voxels_out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["voxels_removed"] = self.voxels_removed
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FilterReport":
        d = json.loads(text)
        d.pop("voxels_removed", None)
        return cls(**d)


def binarize(p, t: float = 0.5) -> Mask:
    """``p > t`` (strict)."""
    data = p.data if isinstance(p, Volume) else np.asarray(p)
    if data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    if isinstance(p, Volume):
        return Mask(data > t, p.spacing, p.origin)
    return Mask(data > t)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def label_components(data: np.ndarray, connectivity: int = 26) -> Tuple[np.ndarray, int]:
    """Label array with ids 1..n assigned in raster order of each component's first voxel."""
    raw, n = ndimage.label(np.asarray(data) > 0, structure=_structure(connectivity))
    if n == 0:
        return raw.astype(np.int32), 0
    flat = raw.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    order = np.argsort(first[keep], kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[ids[keep][order]] = np.arange(1, n + 1, dtype=np.int32)
    return remap[raw], n


def connected_components(m: Mask, connectivity: int = 26, v: Optional[Volume] = None) -> List[LesionComponent]:
    """Components of ``m``; ``v`` (optional) supplies mean intensities."""
    labels, n = label_components(m.data, connectivity)
    if n == 0:
        return []
    idx = np.argwhere(labels > 0)  # raster order
    lab = labels[tuple(idx.T)]
    order = np.argsort(lab, kind="stable")
    idx, lab = idx[order], lab[order]
    splits = np.flatnonzero(np.diff(lab)) + 1
    out = []
    for k, vox in enumerate(np.split(idx, splits), start=1):
        mean = float(v.data[tuple(vox.T)].mean()) if v is not None else None
        out.append(LesionComponent(k, vox, m.spacing, mean))
    return out


def component_of(m: Mask, voxel, connectivity: int = 26) -> LesionComponent:
    """The component containing ``voxel``."""
    voxel = tuple(int(c) for c in voxel)
    if not m.data[voxel]:
        raise ValueError(f"voxel {voxel} is not in the mask")
    labels, _ = label_components(m.data, connectivity)
    lab = labels[voxel]
    return LesionComponent(int(lab), np.argwhere(labels == lab), m.spacing)


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------


def ensemble_average(maps: Sequence, weights: Optional[Sequence[float]] = None):
    """Voxelwise weighted mean of probability maps (uniform by default)."""
    if not maps:
        raise ValueError("no maps to average")
    ref = maps[0]
    arrays = [np.asarray(m.data if isinstance(m, Volume) else m, dtype=np.float64) for m in maps]
    for m, a in zip(maps, arrays):
        if a.shape != arrays[0].shape:
            raise ValueError(f"shape mismatch {a.shape} vs {arrays[0].shape}")
        if isinstance(m, Volume) and isinstance(ref, Volume) and m.spacing != ref.spacing:
            raise ValueError("spacing mismatch between maps")
    if weights is None:
        w = np.ones(len(arrays))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(arrays),):
            raise ValueError("one weight per map required")
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be nonnegative with positive sum")
    acc = np.zeros_like(arrays[0])
    for wi, a in zip(w, arrays):
        acc += wi * a
    out = acc / w.sum()
    # guard against rounding outside the input range
    out = np.clip(out, np.minimum.reduce(arrays), np.maximum.reduce(arrays))
    if isinstance(ref, Volume):
        return ref.with_data(out.astype(np.float32))
    return out


def setting7_ensemble(fold_maps: Sequence, other_map, mode: str = "architecture"):
    """Fuse U-Net fold maps with a U-Net++ map.

    ``mode="architecture"``: mean of the folds, then a 50/50 mean with the
    other map. ``mode="per_map"``: uniform mean over all maps.
    """
    if mode == "architecture":
        return ensemble_average([ensemble_average(fold_maps), other_map])
    if mode == "per_map":
        return ensemble_average(list(fold_maps) + [other_map])
    raise ValueError(f"unknown ensemble mode {mode!r}")


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------


class SliceClassifier:
    """Adapter turning a 2-class slice network into ``slices -> P(lesion)``."""

    def __init__(self, g: Graph, slice_shape=(48, 48), batch: int = 64):
        self.g = g
        self.slice_shape = tuple(slice_shape)
        self.batch = batch

    def __call__(self, slices: np.ndarray) -> np.ndarray:
        X = np.stack([fit_slice(s, self.slice_shape)[None] for s in slices]).astype(np.float32)
        out = [self.g.predict(X[i : i + self.batch])[:, 1] for i in range(0, len(X), self.batch)]
        return np.concatenate(out)


SliceFn = Callable[[np.ndarray], np.ndarray]


def slice_filter(
    m: Mask,
    clf: Union[Graph, SliceFn],
    v: Volume,
    volume_gate_mm3: float = DEFAULT_VOLUME_GATE_MM3,
    fraction: float = DEFAULT_SLICE_FRACTION,
    case_id: str = "",
) -> Tuple[Mask, FilterReport]:
    """Drop a small segmentation whose slices mostly look lesion-free.

    Applies only when the total predicted volume is below ``volume_gate_mm3``.
    The axial slices (last axis) holding predicted voxels are classified;
    ``clf`` maps an (S, H, W) stack to lesion probabilities. If more than
    ``fraction`` of them are classified lesion-free the mask is emptied.
    """
    if m.shape != v.shape:
        raise ValueError(f"mask {m.shape} and volume {v.shape} differ")
    n_in = m.count
    if n_in == 0:
        return m, FilterReport("slice", False, "not applied (no segmentation)", 0, 0, case_id=case_id)
    vol = m.volume_mm3()
    if vol >= volume_gate_mm3:
        reason = f"not applied (volume {vol:.1f} mm3 >= gate {volume_gate_mm3:g})"
        return m, FilterReport("slice", False, reason, n_in, n_in, case_id=case_id)
    if isinstance(clf, Graph):
        clf = SliceClassifier(clf)
    zs = np.flatnonzero(m.data.any(axis=(0, 1)))
    stack = np.stack([v.data[:, :, z] for z in zs])
    probs = np.asarray(clf(stack), dtype=np.float64).reshape(-1)
    if probs.shape != (len(zs),):
        raise ValueError("classifier must return one probability per slice")
    no_lesion = int(np.sum(probs <= 0.5))
    frac = no_lesion / len(zs)
    if frac > fraction:
        out = Mask.empty_like(m)
        reason = f"applied: {no_lesion}/{len(zs)} slices lesion-free > {fraction:g}; mask removed"
    else:
        out = m
        reason = f"applied: {no_lesion}/{len(zs)} slices lesion-free <= {fraction:g}; mask kept"
    rep = FilterReport(
        "slice",
        True,
        reason,
        n_in,
        out.count,
        slices_segmented=len(zs),
        slices_no_lesion=no_lesion,
        fraction=frac,
        components_removed=len(connected_components(m)) if not out.any() else 0,
        case_id=case_id,
    )
    return out, rep


VoxelFn = Callable[[np.ndarray], np.ndarray]


def radiomics_filter(
    m: Mask,
    v: Volume,
    clf,
    voxel_gate: int = DEFAULT_VOXEL_GATE,
    connectivity: int = 26,
    radius: int = 2,
    case_id: str = "",
) -> Tuple[Mask, FilterReport]:
    """Remove voxels of small components that the classifier calls false positives.

    ``clf`` is a :class:`~tbiseg.radiomics.GBTModel` or a callable mapping an
    (n, 20) feature matrix to P(true positive); voxels with probability
    ``< 0.5`` are removed. Components with ``>= voxel_gate`` voxels are kept.
    """
    from .radiomics import FEATURE_NAMES, GBTModel, _intensity_stats, component_feature_matrix, shape_features

    if m.shape != v.shape:
        raise ValueError(f"mask {m.shape} and volume {v.shape} differ")
    n_in = m.count
    comps = connected_components(m, connectivity)
    small = [c for c in comps if c.count < voxel_gate]
    if not small:
        reason = "not applied (no segmentation)" if n_in == 0 else f"not applied (no component < {voxel_gate} voxels)"
        return m, FilterReport("radiomics", False, reason, n_in, n_in, case_id=case_id)
    if isinstance(clf, GBTModel):
        model = clf

        def clf(X):
            return model.predict_proba(X, FEATURE_NAMES)

    stats = _intensity_stats(v)
    out = m.data.copy()
    dropped = 0
    for c in small:
        X = component_feature_matrix(v, c.voxels, radius, shape=shape_features(c.voxels, m.spacing), stats=stats)
        p = np.asarray(clf(X), dtype=np.float64).reshape(-1)
        if p.shape != (c.count,):
            raise ValueError("classifier must return one probability per voxel")
        fp = c.voxels[p < 0.5]
        out[tuple(fp.T)] = 0
        dropped += int(len(fp) == c.count)
    res = Mask.like(m, out)
    reason = f"applied to {len(small)} component(s) < {voxel_gate} voxels"
    return res, FilterReport("radiomics", True, reason, n_in, res.count, components_removed=dropped, case_id=case_id)
