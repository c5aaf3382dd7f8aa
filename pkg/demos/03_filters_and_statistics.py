"""False-positive filters, challenge metrics and paired statistics on toy data.

Run: python3 demos/03_filters_and_statistics.py
"""
from __future__ import annotations

import numpy as np

from tbiseg.evaluation import CaseResult, challenge_metrics, paired_ttest, pearson_log_size
from tbiseg.postprocess import connected_components, radiomics_filter, slice_filter
from tbiseg.radiomics import train_gbt
from tbiseg.volume import Mask, Volume


def main() -> None:
    rng = np.random.default_rng(0)
    image = Volume(rng.normal(100, 10, (32, 32, 20)).astype(np.float32))

    # a small prediction over 5 axial slices; the classifier calls 3 lesion-free
    d = np.zeros(image.shape, np.uint8)
    d[4:14, 4:14, 6:11] = 1
    pred = Mask(d)
    out, rep = slice_filter(pred, lambda s: np.array([0.1, 0.9, 0.2, 0.8, 0.3]), image)
    print(f"slice filter: {rep.voxels_in} -> {rep.voxels_out} voxels ({rep.reason})")

    # radiomics filter on two components: the voxel classifier rejects everything,
    # but only components under the 1000-voxel gate are eligible
    d = np.zeros((40, 40, 40), np.uint8)
    d[0:10, 0:10, 0:10] = 1
    d[20:23, 20:23, 20:23] = 1
    pred = Mask(d)
    print(f"components before: {[c.count for c in connected_components(pred)]}")
    img = Volume(rng.normal(100, 10, d.shape).astype(np.float32))
    out, rep = radiomics_filter(pred, img, lambda X: np.zeros(len(X)))
    print(f"components after radiomics filter: {[c.count for c in connected_components(out)]}")

    # gradient-boosted trees on a separable toy problem
    X = rng.normal(size=(200, 3))
    y = (X[:, 0] - X[:, 2] > 0).astype(int)
    gbt = train_gbt(X, y, trees=40, depth=3)
    acc = np.mean((gbt.predict_proba(X) > 0.5) == y)
    print(f"GBT training accuracy {acc:.3f}; loss {gbt.loss_trace[0]:.3f} -> {gbt.loss_trace[-1]:.3f}")

    # challenge-style metrics: 19 lesion cases, 5 lesion-free (2 with false positives)
    res = [CaseResult(f"l{i:02d}", float(rng.uniform(0.4, 0.9)), True, True, 500.0, 450.0) for i in range(19)]
    res += [CaseResult(f"n{i}", 1.0, False, False, 0.0, 0.0) for i in range(3)]
    res += [CaseResult(f"f{i}", 0.0, False, True, 0.0, 60.0) for i in range(2)]
    m = challenge_metrics(res)
    print(
        f"accuracy {m.accuracy:.4f}, DSC-Lesion {m.dsc_lesion.mean:.3f} ± {m.dsc_lesion.sd:.3f}, "
        f"DSC-no-Lesion {m.dsc_no_lesion.mean:.2f} ± {m.dsc_no_lesion.sd:.2f}, Overall {m.overall_dsc.mean:.3f}"
    )

    a = [0.61, 0.72, 0.55, 0.80, 0.67, 0.59]
    b = [0.58, 0.70, 0.57, 0.71, 0.60, 0.60]
    t, p = paired_ttest(a, b)
    print(f"paired t-test: t = {t:.4f}, two-tailed p = {p:.4f}")
    r = pearson_log_size([10, 100, 1000, 1e4, 1e5], [0.2, 0.5, 0.4, 0.8, 0.7])
    print(f"Pearson r(log10 volume, Dice) = {r:.4f}")


if __name__ == "__main__":
    main()
