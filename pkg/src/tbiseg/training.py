"""Losses, optimizer, augmentation, patch sampling and training loops."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import nn
from .nn import Graph, Tensor, backward
from .volume import Mask, Volume

__all__ = [
    "TrainConfig",
    "AugmentConfig",
    "FoldAssignment",
    "DivergenceError",
    "DatasetError",
    "SGD",
    "dice_ce_loss",
    "cross_entropy",
    "lr_schedule",
    "augment",
    "rotate_z",
    "sample_patch",
    "make_folds",
    "train_segmentation",
    "slice_dataset",
    "fit_slice",
    "train_slice_classifier",
    "slice_accuracy",
    "write_loss_trace",
    "TrainResult",
]

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, iteration: int):
        super().__init__(f"loss became NaN/Inf at epoch {epoch} (iteration {iteration})")
        self.epoch = epoch


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 2
    initial_lr: float = 1e-2
    patch_size: Tuple[int, int, int] = (32, 32, 32)
    fg_prob: float = 0.33
    seed: int = 0
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    iterations_per_epoch: int = 10
    momentum: float = 0.99
    weight_decay: float = 3e-5
    grad_clip: float = 12.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.iterations_per_epoch < 1:
            raise ValueError("epochs, batch_size and iterations_per_epoch must be >= 1")
        if self.initial_lr < 0:
            raise ValueError("initial_lr must be >= 0")
        if self.dice_weight < 0 or self.ce_weight < 0 or self.dice_weight + self.ce_weight == 0:
            raise ValueError("loss weights must be >= 0 and not both 0")
        if not 0 <= self.fg_prob <= 1:
            raise ValueError("fg_prob must lie in [0, 1]")


@dataclass(frozen=True)
class AugmentConfig:
    flip_axes: Tuple[bool, bool, bool] = (True, True, True)
    gamma_range: Tuple[float, float] = (0.7, 1.5)
    rotation_range: Tuple[float, float] = (-180.0, 180.0)  # degrees, about z
    p_flip: float = 0.5
    p_gamma: float = 0.3
    p_rotation: float = 0.2

    def __post_init__(self):
        if min(self.gamma_range) <= 0 or self.gamma_range[0] > self.gamma_range[1]:
            raise ValueError("gamma range must be positive and ordered")
        for p in (self.p_flip, self.p_gamma, self.p_rotation):
            if not 0 <= p <= 1:
                raise ValueError("probabilities must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(flip_axes=(False, False, False), p_gamma=0.0, p_rotation=0.0)


@dataclass
class FoldAssignment:
    k: int
    folds: Dict[str, int]

    def val_ids(self, fold: int) -> List[str]:
        return [c for c, f in self.folds.items() if f == fold]

    def train_ids(self, fold: int) -> List[str]:
        return [c for c, f in self.folds.items() if f != fold]

    def sizes(self) -> List[int]:
        return [len(self.val_ids(f)) for f in range(self.k)]


@dataclass
class TrainResult:
    state: Dict[str, np.ndarray]
    trace: List[Tuple[int, float, float]] = field(default_factory=list)  # (epoch, lr, mean loss)


# ---------------------------------------------------------------------------
# Loss / schedule / optimizer
# ---------------------------------------------------------------------------

SOFT_DICE_EPS = 1e-5


def _channel(probs: Tensor, c: int) -> Tensor:
    sel = np.zeros((1, probs.shape[1]) + (1,) * (probs.ndim - 2), dtype=probs.data.dtype)
    sel[0, c] = 1
    return (probs * Tensor(sel)).sum(axis=1)


def dice_ce_loss(probs: Tensor, target, weights: Tuple[float, float] = (1.0, 1.0)) -> Tensor:
    """``w_dice * (1 - soft Dice of the lesion channel) + w_ce * mean CE``.

    ``probs`` is a channel softmax of shape (N, 2, *spatial); ``target`` a
    {0, 1} array of shape (N, *spatial). Dice is pooled over the batch with
    ``1e-5`` added to numerator and denominator, so an empty target with an
    empty prediction scores 0.
    """
    t = np.asarray(target.data if isinstance(target, Mask) else target)
    if probs.ndim < 3 or probs.shape[1] != 2 or t.shape != probs.shape[:1] + probs.shape[2:]:
        raise nn.ShapeError(f"probs {probs.shape} and target {t.shape} disagree")
    dtype = probs.data.dtype
    t = t.astype(dtype)
    onehot = Tensor(np.stack([1 - t, t], axis=1))
    w_dice, w_ce = weights
    n_vox = t.size
    ce = -(nn.tensor.log(probs) * onehot).sum() * (1.0 / n_vox)
    p_les = _channel(probs, 1)
    inter = (p_les * Tensor(t)).sum()
    denom = p_les.sum() + float(t.sum())
    dice = (inter * 2.0 + SOFT_DICE_EPS) / (denom + SOFT_DICE_EPS)
    return (1.0 - dice) * float(w_dice) + ce * float(w_ce)


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under (N, C) probabilities."""
    onehot = np.zeros(probs.shape, dtype=probs.data.dtype)
    onehot[np.arange(len(labels)), np.asarray(labels, dtype=int)] = 1
    return -(nn.tensor.log(probs) * Tensor(onehot)).sum() * (1.0 / len(labels))


def lr_schedule(epoch: int, total_epochs: int, initial: float) -> float:
    """Linear decay: ``initial * (1 - epoch / total)``."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    return initial * (1.0 - epoch / total_epochs)


class SGD:
    """SGD with Nesterov momentum, L2 weight decay and global-norm clipping."""

    def __init__(self, params: Dict[str, Tensor], momentum: float = 0.99, weight_decay: float = 0.0, clip: Optional[float] = None):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip = clip
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> float:
        """Apply one update; returns the (pre-clip) gradient norm."""
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        scale = 1.0
        if self.clip is not None and norm > self.clip:
            scale = self.clip / (norm + 1e-6)
        for k, p in self.params.items():
            g = grads[k] * np.float32(scale)
            if self.weight_decay:
                g = g + np.float32(self.weight_decay) * p.data
            v = self.velocity[k]
            v *= np.float32(self.momentum)
            v += g
            update = g + np.float32(self.momentum) * v
            p.data = (p.data - np.float32(lr) * update).astype(p.data.dtype)
            p.grad = None
        return norm


# ---------------------------------------------------------------------------
# Augmentation and sampling
# ---------------------------------------------------------------------------


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def rotate_z(arr: np.ndarray, degrees: float, order: int) -> np.ndarray:
    """Rotate a 3D array in the (x, y) plane about its center; clamp at edges.

    ``order=0`` is nearest neighbour (masks), ``order=1`` bilinear.
    """
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    c = 0.0 if abs(c) < 1e-12 else c
    s = 0.0 if abs(s) < 1e-12 else s
    nx, ny, nz = arr.shape
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    i, j = np.meshgrid(np.arange(nx) - cx, np.arange(ny) - cy, indexing="ij")
    # inverse map: output (i, j) samples input R(-theta) @ (i, j)
    xi = c * i + s * j + cx
    yi = -s * i + c * j + cy
    if order == 0:
        xi = np.clip(np.floor(xi + 0.5).astype(np.intp), 0, nx - 1)
        yi = np.clip(np.floor(yi + 0.5).astype(np.intp), 0, ny - 1)
        return arr[xi, yi, :]
    out = np.empty(arr.shape, dtype=np.float64)
    for k in range(nz):
        out[:, :, k] = ndimage.map_coordinates(arr[:, :, k].astype(np.float64), [xi, yi], order=1, mode="nearest")
    return out.astype(arr.dtype)


def augment(patch: np.ndarray, mask: np.ndarray, cfg: AugmentConfig, seed=None):
    """Random flips, gamma and z-rotation; the same geometry goes to both arrays.

    Gamma is applied to intensities min-max scaled to [0, 1] and mapped back.
    """
    rng = _rng(seed)
    img = np.asarray(patch, dtype=np.float32)
    msk = np.asarray(mask).astype(np.uint8)
    for axis, enabled in enumerate(cfg.flip_axes):
        if enabled and rng.random() < cfg.p_flip:
            img = np.flip(img, axis)
            msk = np.flip(msk, axis)
    if rng.random() < cfg.p_gamma:
        gamma = rng.uniform(*cfg.gamma_range)
        lo, hi = float(img.min()), float(img.max())
        if hi > lo:
            img = (((img - lo) / (hi - lo)) ** gamma * (hi - lo) + lo).astype(np.float32)
    if rng.random() < cfg.p_rotation:
        deg = rng.uniform(*cfg.rotation_range)
        img = rotate_z(img, deg, order=1)
        msk = rotate_z(msk, deg, order=0)
    return np.ascontiguousarray(img), np.ascontiguousarray(msk)


def _pad_min(arr: np.ndarray, shape, mode: str = "reflect") -> np.ndarray:
    pads = [(0, max(0, p - n)) for n, p in zip(arr.shape, shape)]
    if not any(b for _, b in pads):
        return arr
    if mode == "reflect" and any(n < 2 for n in arr.shape):
        mode = "edge"
    return np.pad(arr, pads, mode=mode)


def sample_patch(v, m, patch_size, fg_prob: float, seed=None):
    """Crop a patch; with probability ``fg_prob`` it is centred on a random lesion voxel.

    Volumes smaller than the patch are padded reflectively (masks with 0).
    """
    rng = _rng(seed)
    img = v.data if isinstance(v, Volume) else np.asarray(v)
    msk = m.data if isinstance(m, Mask) else np.asarray(m)
    patch = tuple(int(p) for p in patch_size)
    img = _pad_min(img, patch)
    msk = _pad_min(msk, patch, mode="constant")
    use_fg = rng.random() < fg_prob
    fg = np.flatnonzero(msk) if use_fg else np.empty(0, dtype=np.intp)
    if fg.size:
        center = np.unravel_index(fg[rng.integers(fg.size)], msk.shape)
        lower = [min(max(0, int(c) - p // 2), n - p) for c, p, n in zip(center, patch, msk.shape)]
    else:
        lower = [int(rng.integers(0, n - p + 1)) for p, n in zip(patch, msk.shape)]
    sl = tuple(slice(lo, lo + p) for lo, p in zip(lower, patch))
    return img[sl].astype(np.float32), msk[sl].astype(np.uint8)


def make_folds(case_ids: Sequence[str], k: int, seed: int = 0) -> FoldAssignment:
    """Deterministic shuffle followed by round-robin fold assignment."""
    ids = list(case_ids)
    if not 1 <= k <= len(ids):
        raise ValueError(f"k={k} must lie in [1, {len(ids)}]")
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldAssignment(k, {ids[j]: i % k for i, j in enumerate(order)})


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _arrays(case) -> Tuple[np.ndarray, np.ndarray]:
    if hasattr(case, "image") and hasattr(case, "mask"):
        return case.image.data, case.mask.data
    img, msk = case[0], case[1]
    return (img.data if isinstance(img, Volume) else np.asarray(img)), (msk.data if isinstance(msk, Mask) else np.asarray(msk))


def train_segmentation(
    g: Graph,
    cohort: Sequence,
    cfg: TrainConfig,
    aug: Optional[AugmentConfig] = None,
    progress=None,
) -> TrainResult:
    """Train a segmentation graph in place.

    ``cohort`` holds preprocessed cases (objects with ``image``/``mask``) or
    ``(image, mask)`` pairs. Each iteration draws ``batch_size`` patches
    from randomly chosen cases. Raises :class:`DivergenceError` on a
    non-finite loss.
    """
    if not cohort:
        raise DatasetError("cohort is empty")
    data = [_arrays(c) for c in cohort]
    aug = aug or AugmentConfig()
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(g.params, cfg.momentum, cfg.weight_decay, cfg.grad_clip)
    g.training = True
    trace = []
    it = 0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.epochs, cfg.initial_lr)
        losses = []
        for _ in range(cfg.iterations_per_epoch):
            imgs, msks = [], []
            for _ in range(cfg.batch_size):
                img, msk = data[int(rng.integers(len(data)))]
                pi, pm = sample_patch(img, msk, cfg.patch_size, cfg.fg_prob, rng)
                pi, pm = augment(pi, pm, aug, rng)
                imgs.append(pi[None])
                msks.append(pm)
            x = np.stack(imgs).astype(np.float32)
            y = np.stack(msks)
            loss = dice_ce_loss(g(x), y, (cfg.dice_weight, cfg.ce_weight))
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(epoch, it)
            backward(loss)
            opt.step(lr)
            losses.append(value)
            it += 1
        trace.append((epoch, lr, float(np.mean(losses))))
        log.info("epoch %d lr %.2e loss %.4f", epoch, lr, trace[-1][2])
        if progress is not None:
            progress(epoch, lr, trace[-1][2])
    return TrainResult({k: v.copy() for k, v in g.state_dict().items()}, trace)


def write_loss_trace(path, trace: Iterable[Tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "loss"])
        for epoch, lr, loss in trace:
            w.writerow([epoch, repr(float(lr)), repr(float(loss))])


def _fit2d(sl: np.ndarray, shape) -> np.ndarray:
    """Center-crop or zero-pad a 2D slice to ``shape``."""
    out = np.zeros(shape, dtype=np.float32)
    src, dst = [], []
    for n, s in zip(sl.shape, shape):
        if n >= s:
            a = (n - s) // 2
            src.append(slice(a, a + s))
            dst.append(slice(0, s))
        else:
            a = (s - n) // 2
            src.append(slice(0, n))
            dst.append(slice(a, a + n))
    out[tuple(dst)] = sl[tuple(src)]
    return out


fit_slice = _fit2d


def slice_dataset(cohort: Sequence, slice_shape, neck_exclude: int = 45):
    """Axial slices with z >= ``neck_exclude`` and presence labels.

    Returns ``(X, y)`` with X of shape (S, 1, H, W).
    """
    xs, ys = [], []
    for case in cohort:
        img, msk = _arrays(case)
        for z in range(neck_exclude, img.shape[2]):
            xs.append(_fit2d(img[:, :, z], slice_shape)[None])
            ys.append(int(msk[:, :, z].any()))
    if not xs:
        raise DatasetError("no slices left after neck exclusion")
    return np.stack(xs).astype(np.float32), np.asarray(ys, dtype=np.int64)


def train_slice_classifier(
    g: Graph,
    cohort: Sequence,
    cfg: TrainConfig,
    slice_shape=(48, 48),
    neck_exclude: int = 45,
    batch_log: Optional[list] = None,
) -> TrainResult:
    """Train a 2D lesion-presence classifier on class-balanced batches.

    Each batch takes ``batch_size // 2`` positive and as many negative
    slices, resampling with replacement, so batches are always 50/50.
    """
    X, y = slice_dataset(cohort, slice_shape, neck_exclude)
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    if pos.size == 0:
        raise DatasetError("no positive slices in cohort after neck exclusion")
    if neg.size == 0:
        raise DatasetError("no negative slices in cohort after neck exclusion")
    half = max(1, cfg.batch_size // 2)
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(g.params, cfg.momentum, cfg.weight_decay, cfg.grad_clip)
    g.training = True
    trace = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.epochs, cfg.initial_lr)
        losses = []
        for _ in range(cfg.iterations_per_epoch):
            idx = np.concatenate([rng.choice(pos, half), rng.choice(neg, half)])
            if batch_log is not None:
                batch_log.append(y[idx].copy())
            loss = cross_entropy(g(X[idx]), y[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(epoch, len(losses))
            backward(loss)
            opt.step(lr)
            losses.append(value)
        trace.append((epoch, lr, float(np.mean(losses))))
    g.training = False
    return TrainResult({k: v.copy() for k, v in g.state_dict().items()}, trace)


def slice_accuracy(g: Graph, X: np.ndarray, y: np.ndarray, batch: int = 64) -> float:
    preds = np.concatenate([g.predict(X[i : i + batch])[:, 1] > 0.5 for i in range(0, len(X), batch)])
    return float(np.mean(preds.astype(int) == y))
