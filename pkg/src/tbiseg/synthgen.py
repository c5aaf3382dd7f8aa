"""Synthetic T1-like phantoms with ellipsoidal lesions.

Each phantom is an ellipsoidal "brain" of smooth textured tissue on a zero
background. Lesions are axis-aligned ellipsoids placed fully inside the brain
with a fixed intensity offset. A multiplicative bias field of the form
``exp(separable quadratic)`` and additive Gaussian noise complete the image.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Tuple

import numpy as np
from scipy import ndimage, optimize

from .volume import Mask, Volume

__all__ = ["PhantomConfig", "PlacementError", "generate_phantom", "generate_cohort", "polynomial_bias_field"]

MAX_PLACEMENT_ATTEMPTS = 100


class PlacementError(RuntimeError):
    """A lesion could not be placed inside the brain."""


@dataclass(frozen=True)
class PhantomConfig:
    shape: Tuple[int, int, int] = (48, 48, 48)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    lesion_count_range: Tuple[int, int] = (1, 3)
    lesion_radius_range: Tuple[float, float] = (3.0, 7.0)
    tissue_mean: float = 100.0
    tissue_std: float = 4.0
    lesion_intensity_delta: float = -45.0
    bias_amplitude: float = 0.2
    noise_sigma: float = 4.0
    seed: int = 0
    brain_fraction: float = 0.42  # brain semi-axis as fraction of grid extent

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ValueError(f"shape components must be >= 8, got {self.shape}")
        if min(self.spacing) <= 0:
            raise ValueError("spacing must be positive")
        lo, hi = self.lesion_count_range
        if lo < 0 or lo > hi:
            raise ValueError(f"bad lesion_count_range {self.lesion_count_range}")
        rlo, rhi = self.lesion_radius_range
        if rlo <= 0 or rlo > rhi:
            raise ValueError(f"bad lesion_radius_range {self.lesion_radius_range}")
        if not 0 <= self.bias_amplitude < 1:
            raise ValueError("bias_amplitude must lie in [0, 1)")
        if self.noise_sigma < 0 or self.tissue_std < 0:
            raise ValueError("noise_sigma and tissue_std must be >= 0")


def _grid_mm(cfg: PhantomConfig):
    axes = [(np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(cfg.shape, cfg.spacing)]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid(grid, center, semi_axes) -> np.ndarray:
    r = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, semi_axes))
    return r <= 1.0


def polynomial_bias_field(shape, coeffs: np.ndarray, amplitude: float, region=None) -> np.ndarray:
    """Separable ``exp(quadratic)`` field scaled to a max deviation of ``amplitude``.

    ``coeffs`` has shape (3, 2): linear and quadratic coefficient per axis in
    normalized [-1, 1] coordinates. The log-field is scaled by the constant
    that makes ``max |field - 1|`` over ``region`` equal ``amplitude``.
    """
    shape = tuple(shape)
    if amplitude == 0:
        return np.ones(shape)
    log_field = np.zeros(shape)
    for axis, n in enumerate(shape):
        u = np.linspace(-1.0, 1.0, n)
        term = coeffs[axis, 0] * u + coeffs[axis, 1] * u**2
        log_field = log_field + term.reshape([-1 if a == axis else 1 for a in range(3)])
    vals = log_field[region] if region is not None else log_field.ravel()
    vals = vals - vals.mean()
    log_field = log_field - (log_field[region].mean() if region is not None else log_field.mean())
    if np.ptp(vals) == 0:
        return np.ones(shape)

    def excess(c):
        return np.max(np.abs(np.exp(c * vals) - 1.0)) - amplitude

    hi = 1.0
    while excess(hi) < 0:
        hi *= 2.0
    scale = optimize.brentq(excess, 0.0, hi, xtol=1e-14)
    return np.exp(scale * log_field)


def generate_phantom(cfg: PhantomConfig):
    """Generate one ``(Volume, Mask)`` pair, deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    grid = _grid_mm(cfg)
    extent = [n * s for n, s in zip(cfg.shape, cfg.spacing)]
    brain_axes = [cfg.brain_fraction * e for e in extent]
    brain = _ellipsoid(grid, (0.0, 0.0, 0.0), brain_axes)

    texture = ndimage.gaussian_filter(rng.standard_normal(cfg.shape), sigma=2.0)
    texture /= texture.std() or 1.0
    image = cfg.tissue_mean + cfg.tissue_std * texture

    lesions = np.zeros(cfg.shape, dtype=bool)
    n_lesions = int(rng.integers(cfg.lesion_count_range[0], cfg.lesion_count_range[1] + 1))
    # erode so lesion voxels never touch the brain boundary
    inner = ndimage.binary_erosion(brain, iterations=1)
    for k in range(n_lesions):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            semi = rng.uniform(*cfg.lesion_radius_range, size=3)
            center = [rng.uniform(-a + r, a - r) if a > r else 0.0 for a, r in zip(brain_axes, semi)]
            lesion = _ellipsoid(grid, center, semi)
            if lesion.any() and not np.any(lesion & ~inner):
                lesions |= lesion
                break
        else:
            raise PlacementError(f"lesion {k} could not be placed after {MAX_PLACEMENT_ATTEMPTS} attempts")
    image = image + cfg.lesion_intensity_delta * lesions

    coeffs = rng.uniform(-1.0, 1.0, size=(3, 2))
    field = polynomial_bias_field(cfg.shape, coeffs, cfg.bias_amplitude, region=brain)
    image = image * field
    if cfg.noise_sigma > 0:
        image = image + cfg.noise_sigma * rng.standard_normal(cfg.shape)
    # background stays exactly 0; brain voxels kept strictly positive
    image = np.where(brain, np.maximum(image, 1e-3), 0.0)

    vol = Volume(image.astype(np.float32), cfg.spacing)
    return vol, Mask(lesions, cfg.spacing)


def generate_cohort(n: int, cfg_template: PhantomConfig, no_lesion_fraction: float, seed: int):
    """Generate ``n`` cases as ``(Volume, Mask, case_id)`` triples.

    Exactly ``round(n * no_lesion_fraction)`` cases have empty masks; the
    remaining cases carry at least one lesion.
    """
    if not 0.0 <= no_lesion_fraction <= 1.0:
        raise ValueError("no_lesion_fraction must lie in [0, 1]")
    ss = np.random.SeedSequence(seed)
    case_seeds = [int(c.generate_state(1, dtype=np.uint64)[0]) for c in ss.spawn(n)]
    n_empty = int(round(n * no_lesion_fraction))
    order = np.random.default_rng(ss.generate_state(1)[0]).permutation(n)
    empty = set(int(i) for i in order[:n_empty])

    lo, hi = cfg_template.lesion_count_range
    cohort: List[tuple] = []
    for i in range(n):
        if i in empty:
            counts = (0, 0)
        else:
            counts = (max(1, lo), max(1, hi))
        cfg = replace(cfg_template, lesion_count_range=counts, seed=case_seeds[i])
        vol, mask = generate_phantom(cfg)
        cohort.append((vol, mask, f"case_{i:03d}"))
    return cohort
