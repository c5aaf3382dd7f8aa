"""Bias-field correction and intensity normalization.

Bias correction is a low-order stand-in for N4: the log-intensities of the
foreground are fit by least squares to a tensor-product polynomial and the
fitted field is divided out.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .volume import BoundingBox, Mask, Volume, crop_to_foreground, resample, uncrop

__all__ = [
    "BiasModel",
    "FittingError",
    "DegenerateInputError",
    "bias_correct",
    "zscore_normalize",
    "PreprocessedCase",
    "preprocess_case",
]

MAX_CONDITION = 1e10


class FittingError(RuntimeError):
    def __init__(self, message: str, condition: float = float("inf")):
        super().__init__(f"{message} (condition estimate {condition:.3g})")
        self.condition = condition


class DegenerateInputError(ValueError):
    pass


def _design_matrix(coords, shape, order: int) -> np.ndarray:
    # normalized coordinates in [-1, 1] per axis; columns ordered i, j, k
    u = [2.0 * c / max(n - 1, 1) - 1.0 for c, n in zip(coords, shape)]
    powers = [np.stack([ui**p for p in range(order + 1)], axis=1) for ui in u]
    cols = np.einsum("ni,nj,nk->nijk", *powers)
    return cols.reshape(len(u[0]), -1)


@dataclass
class BiasModel:
    order: int
    coefficients: np.ndarray
    shape: Tuple[int, int, int]
    offset: float = 0.0  # log-space constant subtracted from the fit

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.order < 0:
            raise ValueError("order must be >= 0")
        if self.coefficients.size != (self.order + 1) ** 3:
            raise ValueError(
                f"expected {(self.order + 1) ** 3} coefficients for order {self.order}, got {self.coefficients.size}"
            )

    def log_field(self) -> np.ndarray:
        coords = [c.ravel() for c in np.indices(self.shape)]
        basis = _design_matrix(coords, self.shape, self.order)
        return (basis @ self.coefficients).reshape(self.shape) - self.offset

    def field(self) -> np.ndarray:
        return np.exp(self.log_field())


def bias_correct(v: Volume, fg: Mask, order: int = 2):
    """Remove a smooth multiplicative field; returns ``(corrected, BiasModel)``.

    The correction constant is chosen so the mean foreground intensity is
    unchanged. Background voxels are divided by the same (extrapolated)
    field, so zero stays zero.
    """
    sel = fg.data.astype(bool)
    if fg.shape != v.shape:
        raise ValueError(f"mask shape {fg.shape} != volume shape {v.shape}")
    if not sel.any():
        raise ValueError("bias_correct needs a nonempty foreground mask")
    data = v.data.astype(np.float64)
    vals = data[sel]
    shift = 0.0
    if vals.min() <= 0:
        shift = 1.0 - vals.min()
    logs = np.log(vals + shift)

    coords = np.nonzero(sel)
    A = _design_matrix(coords, v.shape, order)
    sv = np.linalg.svd(A, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    if len(vals) < A.shape[1] or cond > MAX_CONDITION:
        raise FittingError("singular normal equations in bias fit", cond)
    coef, *_ = np.linalg.lstsq(A, logs, rcond=None)

    model = BiasModel(order, coef, v.shape)
    shifted = (data + shift) / model.field()
    # pick the log-offset that preserves the foreground mean exactly
    model.offset = float(np.log((vals + shift).mean() / shifted[sel].mean()))
    corrected = (data + shift) / model.field() - shift
    return v.with_data(corrected.astype(np.float32)), model


def zscore_normalize(v: Volume, fg: Mask) -> Volume:
    """``(v - mean_fg) / std_fg`` with population std, applied to every voxel."""
    sel = fg.data.astype(bool)
    if sel.sum() < 2:
        raise DegenerateInputError("z-score normalization needs at least 2 foreground voxels")
    vals = v.data[sel].astype(np.float64)
    mean = vals.mean()
    std = vals.std()
    if not std > 1e-12 * max(1.0, abs(mean)):
        raise DegenerateInputError("foreground has zero variance")
    return v.with_data(((v.data.astype(np.float64) - mean) / std).astype(np.float32))


@dataclass
class PreprocessedCase:
    """Network-ready image plus what is needed to map predictions back."""

    case_id: str
    image: Volume  # cropped, resampled, z-scored
    full_image: Volume  # bias-corrected + z-scored on the original grid
    box: BoundingBox
    original_shape: Tuple[int, int, int]
    original_spacing: Tuple[float, float, float]
    cropped_shape: Tuple[int, int, int]
    mask: Optional[Mask] = None  # ground truth on the network grid
    full_mask: Optional[Mask] = None  # ground truth on the original grid

    def to_original(self, prob: np.ndarray) -> np.ndarray:
        """Map a network-grid map back to the original grid (0 outside crop)."""
        net = Volume(prob, self.image.spacing)
        if net.shape != self.cropped_shape:
            net = resample(net, self.original_spacing, "trilinear", shape=self.cropped_shape)
        return uncrop(net.data, self.box, self.original_shape, fill=0.0)


def preprocess_case(
    case_id: str,
    v: Volume,
    mask: Optional[Mask] = None,
    target_spacing=None,
    bias_order: int = 2,
) -> PreprocessedCase:
    """Bias-correct, crop to nonzero, resample, then z-score.

    Bias correction runs on the full field of view before cropping.
    """
    fg = Mask.like(v, v.data > 0)
    if fg.count > (bias_order + 1) ** 3:
        corrected, _ = bias_correct(v, fg, bias_order)
    else:
        corrected = v
    cropped, box = crop_to_foreground(corrected, 0.0)
    target = tuple(target_spacing) if target_spacing is not None else v.spacing
    net = resample(cropped, target, "trilinear")
    net_fg = Mask.like(net, net.data > 0)
    # stats from the network-grid foreground, reused for the full grid
    vals = net.data[net_fg.data.astype(bool)].astype(np.float64)
    if vals.size < 2 or vals.std() == 0:
        raise DegenerateInputError(f"{case_id}: degenerate foreground")
    image = zscore_normalize(net, net_fg)
    full = corrected.with_data(((corrected.data - vals.mean()) / vals.std()).astype(np.float32))

    net_mask = full_mask = None
    if mask is not None:
        full_mask = mask
        cm = Mask.like(cropped, mask.data[box.slices])
        net_mask = resample(cm, target, "nearest", shape=net.shape)
    return PreprocessedCase(
        case_id=case_id,
        image=image,
        full_image=full,
        box=box,
        original_shape=v.shape,
        original_spacing=v.spacing,
        cropped_shape=cropped.shape,
        mask=net_mask,
        full_mask=full_mask,
    )
