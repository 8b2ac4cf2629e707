from dataclasses import replace

import numpy as np
import pytest

from actionseg.synthdata import (
    AugParams,
    CorruptHeaderError,
    Dataset,
    SceneConfig,
    SceneConfigError,
    TruncatedFileError,
    VersionMismatchError,
    apply_augmentation,
    apply_geometry,
    augment,
    draw_augmentation,
    generate_dataset,
    generate_scene,
    read_dataset,
    write_dataset,
)


def test_same_seed_same_scene():
    cfg = SceneConfig()
    assert generate_scene(cfg, 42) == generate_scene(cfg, 42)
    assert generate_scene(cfg, 42) != generate_scene(cfg, 43)


def test_noise_free_scene_is_piecewise_constant():
    cfg = replace(SceneConfig(), noise=0.0)
    s = generate_scene(cfg, 3)
    assert len(np.unique(s.image)) == cfg.num_classes
    for c in range(cfg.num_classes):
        assert len(np.unique(s.image[s.label == c])) == 1


def test_frequencies_match_targets():
    cfg = SceneConfig()
    counts = np.zeros(cfg.num_classes)
    for i in range(1000):
        counts += np.bincount(generate_scene(cfg, i).label.ravel(), minlength=cfg.num_classes)
    freq = counts / counts.sum()
    np.testing.assert_allclose(freq, cfg.frequencies, atol=0.02)


def test_invalid_configs():
    with pytest.raises(SceneConfigError):
        SceneConfig(frequencies=(0.5, 0.2, 0.2, 0.2)).validate()
    with pytest.raises(SceneConfigError):
        SceneConfig(height=16, width=16, frequencies=(0.1, 0.3, 0.3, 0.3)).validate()
    with pytest.raises(SceneConfigError):
        SceneConfig(labeled_fraction=0.0).validate()


def test_dataset_labeled_split():
    ds = generate_dataset(SceneConfig(), 200, seed=5)
    assert len(ds.labeled) == 10
    assert len(ds.unlabeled_images()) == 190
    assert all(s.is_labeled for s in ds.samples[:10])


def test_images_in_unit_range():
    s = generate_scene(SceneConfig(), 9)
    assert s.image.dtype == np.float32
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_identity_augmentation_is_noop():
    s = generate_scene(SceneConfig(), 1)
    assert apply_augmentation(s, AugParams()) == s


def test_double_flip_restores():
    s = generate_scene(SceneConfig(), 2)
    for p in (AugParams(flip_h=True), AugParams(flip_v=True)):
        once = apply_augmentation(s, p)
        assert once != s
        assert apply_augmentation(once, p) == s


def test_label_histogram_preserved_without_crop():
    s = generate_scene(SceneConfig(), 4)
    before = np.bincount(s.label.ravel(), minlength=4)
    for rot in range(4):
        for fh in (False, True):
            for fv in (False, True):
                lab = apply_geometry(s.label, AugParams(rot, fh, fv))
                np.testing.assert_array_equal(np.bincount(lab.ravel(), minlength=4), before)


def test_weak_policy_is_geometric_only():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = draw_augmentation("weak", rng, (64, 64))
        assert p == p.geometric
    with pytest.raises(ValueError):
        draw_augmentation("medium", rng, (64, 64))


def test_strong_augmentation_keeps_shape_and_range():
    s = generate_scene(SceneConfig(), 6)
    for seed in range(20):
        a = augment(s, "strong", seed)
        assert a.image.shape == s.image.shape
        assert a.image.min() >= 0.0 and a.image.max() <= 1.0
        assert set(np.unique(a.label)) <= set(np.unique(s.label))
        assert a == augment(s, "strong", seed)


def test_round_trip(tmp_path):
    ds = generate_dataset(SceneConfig(), 7, seed=1, labeled_fraction=0.3)
    write_dataset(ds, tmp_path / "d.bin")
    back = read_dataset(tmp_path / "d.bin")
    assert back.samples == ds.samples
    assert (back.num_classes, back.height, back.width) == (4, 64, 64)


def test_empty_dataset(tmp_path):
    write_dataset(Dataset([], 4, 64, 64), tmp_path / "e.bin")
    back = read_dataset(tmp_path / "e.bin")
    assert len(back) == 0 and back.height == 64


def test_truncated_file(tmp_path):
    ds = generate_dataset(SceneConfig(), 3, seed=1)
    p = tmp_path / "d.bin"
    write_dataset(ds, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-100])
    with pytest.raises(TruncatedFileError):
        read_dataset(p)
    p.write_bytes(raw[:20])
    with pytest.raises((TruncatedFileError, CorruptHeaderError)):
        read_dataset(p)


def test_corrupt_and_version_errors(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOTADATA\n")
    with pytest.raises(CorruptHeaderError):
        read_dataset(p)
    ds = generate_dataset(SceneConfig(), 1, seed=1)
    write_dataset(ds, p)
    p.write_bytes(p.read_bytes().replace(b"version 1", b"version 9", 1))
    with pytest.raises(VersionMismatchError):
        read_dataset(p)
