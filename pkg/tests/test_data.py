import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffseg.data import (
    AugmentParams,
    SynthConfig,
    apply_augmentation,
    augment,
    draw_augmentation,
    generate_sample,
    generate_split,
    sample_seed,
    split_indices,
)


def test_noiseless_image_is_piecewise_constant():
    cfg = SynthConfig(noise_sigma=0.0, bias_strength=0.0)
    vol, mask = generate_sample(cfg, 3)
    img = vol.intensities[0]
    for c in range(cfg.num_classes):
        assert np.ptp(img[mask == c]) <= 1e-6
    means = [img[mask == c].mean() for c in range(cfg.num_classes)]
    assert np.all(np.diff(means) > 0)


def test_image_normalized():
    vol, _ = generate_sample(SynthConfig(), 0)
    assert vol.intensities.shape == (1, 24, 24, 24)
    assert vol.intensities.dtype == np.float32
    assert abs(float(vol.intensities.mean())) < 1e-5
    assert float(vol.intensities.std()) == pytest.approx(1.0, rel=1e-4)
    assert vol.spacing == (1.0, 1.0, 1.0)


def test_same_seed_is_bitwise_identical():
    cfg = SynthConfig()
    (a, ma), (b, mb) = generate_sample(cfg, 42), generate_sample(cfg, 42)
    assert a.intensities.tobytes() == b.intensities.tobytes()
    assert ma.tobytes() == mb.tobytes()


def test_every_class_present_over_100_seeds():
    cfg = SynthConfig()
    for seed in range(100):
        _, mask = generate_sample(cfg, seed)
        counts = np.bincount(mask.ravel(), minlength=cfg.num_classes)
        assert len(counts) == cfg.num_classes
        assert np.all(counts[1:] >= 1)


def test_placement_failure_is_reported():
    cfg = SynthConfig(shape=(8, 8, 8), radius_range=(3, 3), num_classes=4,
                      class_means=(0.0, 1.0, 2.0, 3.0), max_tries=5)
    with pytest.raises(ValueError, match="smaller radius_range"):
        generate_sample(cfg, 0)


@pytest.mark.parametrize("kwargs", [
    {"num_classes": 1, "class_means": (0.0,)},
    {"class_means": (0.0, 1.0)},
    {"radius_range": (0, 3)},
    {"radius_range": (3, 12)},
])
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        SynthConfig(**kwargs)


def test_splits_are_disjoint_and_sized():
    cfg = SynthConfig()
    idx = split_indices(cfg)
    assert [len(idx[s]) for s in ("train", "val", "test")] == [64, 16, 16]
    sets = [set(r) for r in idx.values()]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    seeds = {sample_seed(cfg.seed, i) for r in idx.values() for i in r}
    assert len(seeds) == 96


def test_generate_split_small():
    cfg = SynthConfig(n_train=2, n_val=1, n_test=3)
    test = generate_split(cfg, "test")
    assert [i for i, _, _ in test] == [3, 4, 5]
    vol, mask = generate_sample(cfg, sample_seed(cfg.seed, 4))
    np.testing.assert_array_equal(test[1][2], mask)


def test_identity_augmentation():
    vol, mask = generate_sample(SynthConfig(), 1)
    img, m, p = augment(vol.intensities, mask, np.random.default_rng(0), AugmentParams())
    assert p.is_identity
    np.testing.assert_array_equal(img, vol.intensities)
    np.testing.assert_array_equal(m, mask)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_augmentation_without_shift_preserves_counts(seed):
    rng = np.random.default_rng(seed)
    vol, mask = generate_sample(SynthConfig(shape=(12, 12, 12), radius_range=(1, 3)), seed)
    p = draw_augmentation(rng, mask.shape)
    p = AugmentParams(p.rot_axes, p.rot_k, p.flips, (0, 0, 0))
    img, m, _ = augment(vol.intensities, mask, rng, p)
    np.testing.assert_array_equal(np.bincount(m.ravel(), minlength=4), np.bincount(mask.ravel(), minlength=4))
    np.testing.assert_array_equal(np.sort(img.ravel()), np.sort(vol.intensities.ravel()))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_augmentation_keeps_labels_and_geometry(seed):
    rng = np.random.default_rng(seed)
    vol, mask = generate_sample(SynthConfig(shape=(12, 12, 12), radius_range=(1, 3)), seed)
    img, m, p = augment(vol.intensities, mask, rng)
    assert m.dtype == mask.dtype and m.min() >= 0 and m.max() < 4
    assert img.shape == vol.intensities.shape
    np.testing.assert_array_equal(apply_augmentation(mask, p, 0), m)
    assert all(abs(s) <= int(0.2 * 12) for s in p.shifts)
    # a voxel's intensity travels with its label
    for c in range(4):
        if (m == c).any() and (mask == c).any() and not any(p.shifts):
            assert img[0][m == c].mean() == pytest.approx(vol.intensities[0][mask == c].mean(), rel=1e-5)


def test_shift_fills_background():
    img = np.arange(27, dtype=np.float32).reshape(1, 3, 3, 3)
    mask = np.ones((3, 3, 3), np.uint8)
    mask[0] = 0
    p = AugmentParams(shifts=(1, 0, 0))
    out_img, out_mask, _ = augment(img, mask, np.random.default_rng(0), p)
    assert np.all(out_mask[0] == 0)
    np.testing.assert_array_equal(out_mask[1:], mask[:2])
    assert np.all(out_img[0, 0] == img[0, 0].mean())
    np.testing.assert_array_equal(out_img[0, 1:], img[0, :2])


def test_non_cubic_volume_skips_unequal_rotation_planes():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = draw_augmentation(rng, (8, 8, 4))
        assert p.rot_axes == (0, 1)
