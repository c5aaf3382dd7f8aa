"""Shared fixtures and independent brute-force oracles."""
from __future__ import annotations

import itertools
from collections import deque

import numpy as np
import pytest


def flood_fill_labels(mask: np.ndarray, connectivity: int) -> np.ndarray:
    """Breadth-first labeling; labels in raster order of each component's first voxel."""
    if connectivity == 6:
        steps = [s for s in itertools.product((-1, 0, 1), repeat=3) if sum(map(abs, s)) == 1]
    else:
        steps = [s for s in itertools.product((-1, 0, 1), repeat=3) if any(s)]
    labels = np.zeros(mask.shape, dtype=np.int32)
    nxt = 0
    for start in itertools.product(*(range(n) for n in mask.shape)):
        if not mask[start] or labels[start]:
            continue
        nxt += 1
        labels[start] = nxt
        queue = deque([start])
        while queue:
            cur = queue.popleft()
            for s in steps:
                nb = tuple(c + d for c, d in zip(cur, s))
                if all(0 <= a < n for a, n in zip(nb, mask.shape)) and mask[nb] and not labels[nb]:
                    labels[nb] = nxt
                    queue.append(nb)
    return labels


def brute_glcm(q: np.ndarray, levels: int, offsets) -> np.ndarray:
    """Symmetric normalized co-occurrence matrix by explicit voxel loops over quantized input."""
    counts = np.zeros((levels, levels))
    shape = q.shape
    for idx in itertools.product(*(range(n) for n in shape)):
        for off in offsets:
            nb = tuple(i + o for i, o in zip(idx, off))
            if all(0 <= a < n for a, n in zip(nb, shape)):
                counts[q[idx], q[nb]] += 1
                counts[q[nb], q[idx]] += 1
    total = counts.sum()
    return counts / total if total else counts


def brute_dice(p: np.ndarray, g: np.ndarray) -> float:
    inter = sp = sg = 0
    for a, b in zip(p.ravel().tolist(), g.ravel().tolist()):
        inter += a and b
        sp += a
        sg += b
    if sp + sg == 0:
        return 1.0
    return 2.0 * inter / (sp + sg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance summary: one line per criterion, printed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
