from __future__ import annotations

import numpy as np
import pytest

from tbiseg.synthgen import PhantomConfig, PlacementError, generate_cohort, generate_phantom, polynomial_bias_field


def test_config_validation():
    with pytest.raises(ValueError):
        PhantomConfig(shape=(4, 16, 16))
    with pytest.raises(ValueError):
        PhantomConfig(lesion_count_range=(3, 1))
    with pytest.raises(ValueError):
        PhantomConfig(bias_amplitude=1.0)
    with pytest.raises(ValueError):
        PhantomConfig(noise_sigma=-1)


def test_phantom_deterministic():
    cfg = PhantomConfig(shape=(24, 24, 24), seed=7)
    (v1, m1), (v2, m2) = generate_phantom(cfg), generate_phantom(cfg)
    assert np.array_equal(v1.data, v2.data) and np.array_equal(m1.data, m2.data)


def test_no_lesions_gives_empty_mask():
    _, m = generate_phantom(PhantomConfig(shape=(24, 24, 24), lesion_count_range=(0, 0)))
    assert not m.any()


def test_sphere_volume_close_to_analytic():
    cfg = PhantomConfig(lesion_count_range=(1, 1), lesion_radius_range=(5.0, 5.0), noise_sigma=0.0, seed=3)
    _, m = generate_phantom(cfg)
    expected = 4.0 / 3.0 * np.pi * 125
    assert abs(m.volume_mm3() - expected) / expected < 0.15


def test_lesion_contrast_exact_without_noise_bias_texture():
    cfg = PhantomConfig(shape=(32, 32, 32), noise_sigma=0.0, bias_amplitude=0.0, tissue_std=0.0, seed=11)
    v, m = generate_phantom(cfg)
    brain = v.data > 0
    les = m.data.astype(bool)
    assert les.any()
    assert np.all(v.data[les] == np.float32(cfg.tissue_mean + cfg.lesion_intensity_delta))
    assert np.all(v.data[brain & ~les] == np.float32(cfg.tissue_mean))


@pytest.mark.parametrize("seed", range(5))
def test_mask_inside_brain_and_background_zero(seed):
    v, m = generate_phantom(PhantomConfig(shape=(32, 32, 32), seed=seed))
    assert np.all(v.data[m.data.astype(bool)] > 0)
    assert v.data[0, 0, 0] == 0.0
    assert np.all(np.isfinite(v.data))


def test_bias_field_amplitude():
    rng = np.random.default_rng(0)
    f = polynomial_bias_field((16, 16, 16), rng.uniform(-1, 1, (3, 2)), 0.2)
    assert np.max(np.abs(f - 1.0)) == pytest.approx(0.2, abs=1e-6)
    assert np.all(polynomial_bias_field((8, 8, 8), np.zeros((3, 2)), 0.3) == 1.0)


def test_placement_error_when_impossible():
    cfg = PhantomConfig(shape=(16, 16, 16), lesion_count_range=(1, 1), lesion_radius_range=(30.0, 30.0))
    with pytest.raises(PlacementError):
        generate_phantom(cfg)


def test_cohort_empty_fraction_and_ids():
    cfg = PhantomConfig(shape=(16, 16, 16), lesion_radius_range=(1.5, 2.5))
    cohort = generate_cohort(24, cfg, 5 / 24, seed=0)
    assert sum(not m.any() for _, m, _ in cohort) == 5
    ids = [c for _, _, c in cohort]
    assert len(set(ids)) == 24 and ids[0] == "case_000"


def test_cohort_all_lesion_and_deterministic():
    cfg = PhantomConfig(shape=(16, 16, 16), lesion_count_range=(0, 2), lesion_radius_range=(1.5, 2.5))
    a = generate_cohort(10, cfg, 0.0, seed=4)
    b = generate_cohort(10, cfg, 0.0, seed=4)
    assert all(m.any() for _, m, _ in a)
    assert all(np.array_equal(x[0].data, y[0].data) and x[2] == y[2] for x, y in zip(a, b))
    with pytest.raises(ValueError):
        generate_cohort(3, cfg, 1.5, seed=0)
