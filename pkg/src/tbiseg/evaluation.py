"""Challenge metrics, paired t-test, lesion-size correlation and error heatmaps."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .volume import Mask, Volume, voxel_volume_mm3

__all__ = [
    "CaseResult",
    "StratumStats",
    "ChallengeMetrics",
    "DegenerateError",
    "dice",
    "case_result",
    "subject_accuracy",
    "stratified_dsc",
    "challenge_metrics",
    "betainc",
    "student_t_sf",
    "paired_ttest",
    "pearson_log_size",
    "error_heatmap",
    "lesion_size_table",
    "write_results_table",
    "read_manifest",
    "write_manifest",
    "HEATMAP_GRID",
]

HEATMAP_GRID = (64, 64, 64)


class DegenerateError(ValueError):
    """Statistic undefined for the given data (zero variance)."""


@dataclass(frozen=True)
class CaseResult:
    case_id: str
    dice: float
    gt_has_lesion: bool
    pred_has_lesion: bool
    gt_volume_mm3: float
    pred_volume_mm3: float

    def __post_init__(self):
        if not 0.0 <= self.dice <= 1.0:
            raise ValueError(f"dice {self.dice} outside [0, 1]")
        if self.gt_volume_mm3 < 0 or self.pred_volume_mm3 < 0:
            raise ValueError("volumes must be >= 0")


@dataclass(frozen=True)
class StratumStats:
    mean: float
    sd: float
    n: int


@dataclass(frozen=True)
class ChallengeMetrics:
    accuracy: float
    dsc_lesion: Optional[StratumStats]
    dsc_no_lesion: Optional[StratumStats]
    overall_dsc: StratumStats
    n: int

    def as_row(self) -> Dict[str, object]:
        def part(s: Optional[StratumStats], key: str):
            return {f"{key}_mean": "" if s is None else s.mean, f"{key}_sd": "" if s is None else s.sd}

        row = {"accuracy": self.accuracy}
        row.update(part(self.dsc_lesion, "dsc_lesion"))
        row.update(part(self.dsc_no_lesion, "dsc_no_lesion"))
        row.update(part(self.overall_dsc, "overall_dsc"))
        row.update(
            n_lesion=0 if self.dsc_lesion is None else self.dsc_lesion.n,
            n_no_lesion=0 if self.dsc_no_lesion is None else self.dsc_no_lesion.n,
        )
        return row


def _arr(m) -> np.ndarray:
    return (m.data if isinstance(m, (Mask, Volume)) else np.asarray(m)).astype(bool)


def dice(pred, gt) -> float:
    """``2|P∩G| / (|P| + |G|)``; two empty masks score 1, one empty scores 0."""
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    sp, sg = int(p.sum()), int(g.sum())
    if sp + sg == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / (sp + sg)


def case_result(case_id: str, pred: Mask, gt: Mask, min_volume_mm3: float = 0.0) -> CaseResult:
    """Per-case record; predicted presence means predicted volume > ``min_volume_mm3``."""
    vv = voxel_volume_mm3(gt.spacing)
    pv, gv = pred.count * vv, gt.count * vv
    return CaseResult(
        case_id=case_id,
        dice=dice(pred, gt),
        gt_has_lesion=gt.any(),
        pred_has_lesion=pred.any() and pv > min_volume_mm3,
        gt_volume_mm3=gv,
        pred_volume_mm3=pv,
    )


def subject_accuracy(results: Sequence[CaseResult]) -> float:
    if not results:
        raise ValueError("no results")
    return sum(r.pred_has_lesion == r.gt_has_lesion for r in results) / len(results)


def _stats(values: List[float]) -> Optional[StratumStats]:
    if not values:
        return None
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return StratumStats(float(arr.mean()), sd, int(arr.size))


def stratified_dsc(results: Sequence[CaseResult]):
    """``(dsc_lesion, dsc_no_lesion, overall)``; absent strata are ``None``."""
    if not results:
        raise ValueError("no results")
    ordered = sorted(results, key=lambda r: r.case_id)
    les = [r.dice for r in ordered if r.gt_has_lesion]
    nol = [r.dice for r in ordered if not r.gt_has_lesion]
    return _stats(les), _stats(nol), _stats([r.dice for r in ordered])


def challenge_metrics(results: Sequence[CaseResult]) -> ChallengeMetrics:
    les, nol, overall = stratified_dsc(results)
    return ChallengeMetrics(subject_accuracy(results), les, nol, overall, len(results))


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 10000) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """Two-tailed tail mass ``P(|T| >= |t|)`` for Student's t."""
    x = df / (df + t * t)
    return betainc(df / 2.0, 0.5, x)


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """Two-tailed paired t-test; returns ``(t, p)`` with ``df = n - 1``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired_ttest needs two equal-length sequences of length >= 2")
    d = a - b
    sd = d.std(ddof=1)
    if not sd > 0:
        raise DegenerateError("differences have zero variance")
    n = d.size
    t = float(d.mean() / (sd / math.sqrt(n)))
    return t, student_t_sf(t, n - 1)


def pearson_log_size(volumes_mm3: Sequence[float], dices: Sequence[float]) -> float:
    """Pearson correlation between ``log10(volume)`` and Dice."""
    v = np.asarray(volumes_mm3, dtype=np.float64)
    d = np.asarray(dices, dtype=np.float64)
    if v.shape != d.shape or v.ndim != 1 or v.size < 2:
        raise ValueError("need two equal-length sequences of length >= 2")
    if np.any(v <= 0):
        raise ValueError("volumes must be positive")
    x = np.log10(v)
    xc, yc = x - x.mean(), d - d.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0 or syy == 0:
        raise DegenerateError("correlation undefined for constant input")
    return float(xc @ yc / math.sqrt(sxx * syy))


def lesion_size_table(cases: Iterable[Tuple[str, Mask, Mask]]) -> List[Tuple[str, float, float]]:
    """``(case_id, gt volume mm³, dice)`` for every case with a lesion."""
    rows = []
    for case_id, pred, gt in cases:
        if gt.any():
            rows.append((case_id, gt.volume_mm3(), dice(pred, gt)))
    return rows


def _bbox(arr: np.ndarray):
    idx = np.nonzero(arr)
    if idx[0].size == 0:
        return tuple(slice(0, n) for n in arr.shape)
    return tuple(slice(int(i.min()), int(i.max()) + 1) for i in idx)


def error_heatmap(cases: Sequence[Tuple[Mask, Mask, Optional[Volume]]], grid=HEATMAP_GRID):
    """Per-cell counts of cases with a false positive / false negative voxel.

    Each case's FP (pred and not gt) and FN (gt and not pred) masks are cut
    to the case's bounding box (the image foreground if a volume is given,
    else the full grid) and nearest-resampled onto ``grid``. Returns
    ``(fp_density, fn_density)`` Volumes.
    """
    if not cases:
        raise ValueError("no cases")
    grid = tuple(int(g) for g in grid)
    fp_acc = np.zeros(grid, np.float32)
    fn_acc = np.zeros(grid, np.float32)
    for pred, gt, vol in cases:
        p, g = _arr(pred), _arr(gt)
        box = _bbox(vol.data > 0) if vol is not None else tuple(slice(0, n) for n in p.shape)
        for err, acc in ((p & ~g, fp_acc), (g & ~p, fn_acc)):
            sub = err[box].astype(np.uint8)
            shape = sub.shape
            # nearest sampling: cell centre -> source index
            idx = [np.minimum((np.arange(n) + 0.5) * s / n, s - 1).astype(np.intp) for n, s in zip(grid, shape)]
            sampled = sub[np.ix_(*idx)]
            acc += sampled
    return Volume(fp_acc), Volume(fn_acc)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

TABLE_COLUMNS = [
    "setting",
    "accuracy",
    "dsc_lesion_mean",
    "dsc_lesion_sd",
    "dsc_no_lesion_mean",
    "dsc_no_lesion_sd",
    "overall_dsc_mean",
    "overall_dsc_sd",
    "n_lesion",
    "n_no_lesion",
]


def write_results_table(path, rows: Dict[str, ChallengeMetrics]) -> None:
    """CSV with one row per setting, columns mirroring the challenge table."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        w.writeheader()
        for setting, m in rows.items():
            w.writerow({"setting": setting, **m.as_row()})


def write_manifest(path, entries: Dict[str, Dict[str, object]]) -> None:
    """JSON object: case id -> {"image", "mask", "has_lesion"} (paths relative to the file)."""
    Path(path).write_text(json.dumps(entries, indent=2, sort_keys=True))


def read_manifest(path) -> Dict[str, Dict[str, object]]:
    path = Path(path)
    raw = json.loads(path.read_text())
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: manifest must be a JSON object")
    out = {}
    for cid, entry in sorted(raw.items()):
        if "image" not in entry:
            raise ValueError(f"{path}: case {cid} lacks an image path")
        e = dict(entry)
        for key in ("image", "mask", "prediction"):
            if e.get(key):
                p = Path(e[key])
                e[key] = str(p if p.is_absolute() else (path.parent / p).resolve())
        out[cid] = e
    return out
