"""Constructed false-positive filter scenarios shared by the unit and acceptance suites.

Each scenario returns ``(mask_in, mask_out, report)`` plus the expected
outcome, so callers can assert exactly.
"""
from __future__ import annotations

import numpy as np

from tbiseg.postprocess import radiomics_filter, slice_filter
from tbiseg.volume import Mask, Volume


def _image(shape, seed=0):
    rng = np.random.default_rng(seed)
    return Volume(rng.normal(100, 10, shape).astype(np.float32))


def _fixed_probs(values):
    def clf(stack):
        assert len(stack) == len(values)
        return np.asarray(values, dtype=np.float64)

    return clf


def slice_large_volume_untouched():
    """2500 mm^3 predicted: the 2000 mm^3 gate keeps it whatever the classifier says."""
    d = np.zeros((32, 32, 20), np.uint8)
    d[0:25, 0:10, 0:10] = 1  # 2500 voxels at 1 mm^3
    m = Mask(d)
    out, rep = slice_filter(m, _fixed_probs([0.0] * 10), _image(d.shape))
    return m, out, rep, "unchanged"


def slice_gate_boundary_2000():
    """Exactly 2000 mm^3 is not below the gate, so the filter is not applied."""
    d = np.zeros((32, 32, 20), np.uint8)
    d[0:20, 0:10, 0:10] = 1
    m = Mask(d)
    out, rep = slice_filter(m, _fixed_probs([0.0] * 10), _image(d.shape))
    return m, out, rep, "unchanged"


def slice_majority_no_lesion():
    """500 mm^3 over 5 slices, 3 classified lesion-free (0.6 > 0.5): mask removed."""
    d = np.zeros((32, 32, 20), np.uint8)
    d[4:14, 4:14, 6:11] = 1
    m = Mask(d)
    out, rep = slice_filter(m, _fixed_probs([0.1, 0.9, 0.2, 0.8, 0.3]), _image(d.shape))
    return m, out, rep, "empty"


def slice_exact_half_kept():
    """2 of 4 segmented slices lesion-free is exactly 0.5, not more than half: kept."""
    d = np.zeros((32, 32, 20), np.uint8)
    d[4:14, 4:14, 6:10] = 1
    m = Mask(d)
    out, rep = slice_filter(m, _fixed_probs([0.1, 0.9, 0.5, 0.8]), _image(d.shape))
    return m, out, rep, "unchanged"


def slice_empty_input():
    m = Mask(np.zeros((16, 16, 8), np.uint8))
    out, rep = slice_filter(m, _fixed_probs([]), _image(m.shape))
    return m, out, rep, "empty"


def _all(p):
    return lambda X: np.full(len(X), p)


def radiomics_large_components_untouched():
    """Components of 1000 and 1331 voxels sit at or above the 1000-voxel gate."""
    d = np.zeros((40, 40, 40), np.uint8)
    d[0:10, 0:10, 0:10] = 1
    d[20:31, 20:31, 20:31] = 1
    m = Mask(d)
    out, rep = radiomics_filter(m, _image(d.shape), _all(0.0))
    return m, out, rep, "unchanged"


def radiomics_all_true_positive():
    d = np.zeros((16, 16, 16), np.uint8)
    d[2:4, 2:7, 2:3] = 1  # 10 voxels
    d[9:12, 9:12, 9:12] = 1
    m = Mask(d)
    out, rep = radiomics_filter(m, _image(d.shape), _all(1.0))
    return m, out, rep, "unchanged"


def radiomics_all_false_positive():
    """One 10-voxel component and an all-false-positive classifier: empty mask."""
    d = np.zeros((16, 16, 16), np.uint8)
    d[2:4, 2:7, 2:3] = 1
    m = Mask(d)
    out, rep = radiomics_filter(m, _image(d.shape), _all(0.0))
    return m, out, rep, "empty"


def radiomics_gate_boundary_999():
    """A 999-voxel component is below the gate and is filtered; 1000 voxels is not."""
    d = np.zeros((40, 40, 40), np.uint8)
    d[0:10, 0:10, 0:10] = 1  # 1000 voxels: kept
    blk = np.zeros((10, 10, 10), np.uint8)
    blk.reshape(-1)[:999] = 1
    d[20:30, 20:30, 20:30] = blk
    m = Mask(d)
    out, rep = radiomics_filter(m, _image(d.shape), _all(0.0))
    expected = np.zeros_like(d)
    expected[0:10, 0:10, 0:10] = 1
    return m, out, rep, expected


SCENARIOS = {
    "slice: 2500 mm3 above gate, unchanged": slice_large_volume_untouched,
    "slice: 2000 mm3 at gate, unchanged": slice_gate_boundary_2000,
    "slice: 3/5 lesion-free > 50%, emptied": slice_majority_no_lesion,
    "slice: 2/4 lesion-free = 50%, kept": slice_exact_half_kept,
    "slice: empty input, not applied": slice_empty_input,
    "radiomics: components >= 1000 voxels, unchanged": radiomics_large_components_untouched,
    "radiomics: all true-positive classifier, unchanged": radiomics_all_true_positive,
    "radiomics: all false-positive, 10-voxel component, emptied": radiomics_all_false_positive,
    "radiomics: 999-voxel component filtered, 1000 kept": radiomics_gate_boundary_999,
}


def check(name):
    """Run a scenario; returns (ok, message)."""
    m, out, rep, expect = SCENARIOS[name]()
    if isinstance(expect, np.ndarray):
        ok = np.array_equal(out.data, expect)
    elif expect == "unchanged":
        ok = np.array_equal(out.data, m.data)
    else:
        ok = not out.any()
    ok = ok and rep.voxels_in == rep.voxels_out + rep.voxels_removed and rep.voxels_out == out.count
    ok = ok and not np.any(out.data.astype(bool) & ~m.data.astype(bool))
    return ok, rep.reason
