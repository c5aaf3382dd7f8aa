"""Train a small 3D U-Net on phantoms and segment an unseen case.

Takes a few minutes on one CPU core. The full pipeline (folds, ensembling,
filters) is driven by the CLI; this script shows the pieces underneath.

Run: python3 demos/02_train_small_unet.py
"""
from __future__ import annotations

import time

from tbiseg.evaluation import dice
from tbiseg.models import UNetSpec, build_unet3d, predict_probability
from tbiseg.postprocess import binarize
from tbiseg.preprocess import preprocess_case
from tbiseg.synthgen import PhantomConfig, generate_cohort
from tbiseg.training import TrainConfig, train_segmentation


def main() -> None:
    phantom = PhantomConfig(shape=(40, 40, 40))
    train = [preprocess_case(cid, v, m) for v, m, cid in generate_cohort(6, phantom, 0.2, seed=1)]
    test = [preprocess_case(cid, v, m) for v, m, cid in generate_cohort(2, phantom, 0.0, seed=2)]

    g = build_unet3d(UNetSpec(base_width=8, depth=2, seed=0))
    print(f"U-Net with {g.parameter_count():,} parameters")
    cfg = TrainConfig(epochs=30, iterations_per_epoch=10, patch_size=(24, 24, 24), seed=0)
    t0 = time.perf_counter()
    res = train_segmentation(g, train, cfg, progress=lambda e, lr, loss: print(f"  epoch {e:2d} lr {lr:.4f} loss {loss:.4f}"))
    print(f"trained in {time.perf_counter() - t0:.0f}s; final loss {res.trace[-1][-1]:.4f}")

    for c in test:
        prob = predict_probability(g, c.image, patch=cfg.patch_size)
        pred = binarize(prob, 0.5)
        print(f"{c.case_id}: Dice {dice(pred, c.mask):.3f} ({pred.count} predicted vs {c.mask.count} true voxels)")


if __name__ == "__main__":
    main()
