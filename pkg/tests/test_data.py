import math

import numpy as np
import pytest
from PIL import Image

from pfanet.data import (AugmentConfig, BitDepthError, DatasetError, DepthSample,
                         SizeMismatchError, SynthSceneSpec, UnreadableImageError, augment,
                         batch_iter, crop, epoch_order, generate_synth, hflip, load_dataset,
                         load_depth_png, load_kitti_sample, materialize_synth, photometric,
                         rotate, synth_dataset, write_sample)


def sample_bytes(s):
    return s.rgb.tobytes() + s.depth.tobytes() + s.mask.tobytes() + s.id.encode()


def test_generator_deterministic_over_100_specs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        spec = SynthSceneSpec(seed=int(rng.integers(1 << 30)), height=32 * int(rng.integers(1, 3)),
                              width=32 * int(rng.integers(1, 5)),
                              invalid_fraction=float(rng.uniform(0, 0.3)))
        assert sample_bytes(generate_synth(spec)) == sample_bytes(generate_synth(spec))


def test_different_seeds_differ():
    a, b = synth_dataset(SynthSceneSpec(seed=3), 2)
    assert a.depth.tobytes() != b.depth.tobytes()
    assert (a.id, b.id) == ("synth_000003", "synth_000004")


def test_zero_objects_is_pure_ground_plane():
    s = generate_synth(SynthSceneSpec(seed=1, min_objects=0, max_objects=0))
    d = s.depth[0]
    assert np.all(d == d[:, :1])
    # distance grows strictly from the bottom row up to the horizon row
    assert np.all(np.diff(d[::-1, 0]) > 0)
    assert d[-1, 0] == pytest.approx(3.0) and d[0, 0] == pytest.approx(60.0)


def test_depth_within_range_and_rgb_unit_interval():
    for seed in range(20):
        spec = SynthSceneSpec(seed=seed, min_depth=5.0, max_depth=40.0, invalid_fraction=0.1)
        s = generate_synth(spec)
        valid = s.depth[s.mask]
        assert valid.min() >= 5.0 - 1e-9 and valid.max() <= 40.0 + 1e-9
        assert np.all(s.depth[~s.mask] == 0)
        assert 0 <= s.rgb.min() and s.rgb.max() <= 1
        assert s.rgb.shape == (3, 64, 128) and s.mask.dtype == bool


def test_generator_rejects_bad_size():
    with pytest.raises(ValueError):
        generate_synth(SynthSceneSpec(height=50))


def test_depth_png_conventions(tmp_path):
    raw = np.array([[25600, 0], [256, 65535]], dtype=np.uint16)
    Image.fromarray(raw).save(tmp_path / "d.png")
    depth, mask = load_depth_png(tmp_path / "d.png")
    assert depth[0, 0] == 100.0 and depth[1, 0] == 1.0
    np.testing.assert_array_equal(mask, [[True, False], [True, True]])


def test_png_round_trip_within_quantization(tmp_path):
    s = generate_synth(SynthSceneSpec(seed=5, invalid_fraction=0.2))
    write_sample(tmp_path, s)
    back = load_kitti_sample(tmp_path / "rgb" / f"{s.id}.png", tmp_path / "depth" / f"{s.id}.png")
    np.testing.assert_array_equal(back.mask, s.mask)
    assert np.abs(back.depth - s.depth).max() <= 1 / 512
    assert np.abs(back.rgb - s.rgb).max() <= 0.5 / 255 + 1e-12
    assert back.id == s.id


@pytest.fixture
def fixtures(tmp_path):
    Image.fromarray(np.zeros((4, 6, 3), np.uint8)).save(tmp_path / "rgb.png")
    Image.fromarray(np.ones((4, 6), np.uint16) * 300).save(tmp_path / "depth.png")
    Image.fromarray(np.ones((4, 6), np.uint8)).save(tmp_path / "depth8.png")
    Image.fromarray(np.ones((4, 5), np.uint16)).save(tmp_path / "depth_small.png")
    data = (tmp_path / "depth.png").read_bytes()
    (tmp_path / "trunc.png").write_bytes(data[:len(data) // 2])
    (tmp_path / "garbage.png").write_bytes(b"not a png at all")
    return tmp_path


def test_loader_accepts_good_fixture(fixtures):
    s = load_kitti_sample(fixtures / "rgb.png", fixtures / "depth.png")
    assert s.depth.shape == (1, 4, 6) and s.id == "rgb"


@pytest.mark.parametrize("depth,err", [("trunc.png", UnreadableImageError),
                                       ("garbage.png", UnreadableImageError),
                                       ("missing.png", UnreadableImageError),
                                       ("depth8.png", BitDepthError),
                                       ("depth_small.png", SizeMismatchError)])
def test_loader_rejects_malformed(fixtures, depth, err):
    with pytest.raises(err):
        load_kitti_sample(fixtures / "rgb.png", fixtures / depth)
    assert issubclass(err, DatasetError)


def test_dataset_directory_and_splits(tmp_path):
    ids = materialize_synth(tmp_path, SynthSceneSpec(seed=10), 3)
    assert (tmp_path / "train.txt").read_text().split() == ids
    assert [s.id for s in load_dataset(tmp_path, "train")] == ids
    assert [s.id for s in load_dataset(tmp_path)] == sorted(ids)
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, "val")


def rotation_oracle(h, w, angle_deg):
    """Per-pixel inverse map: True where the nearest source pixel is in frame."""
    t = math.radians(angle_deg)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    ok = np.zeros((h, w), bool)
    for y in range(h):
        for x in range(w):
            sy = math.cos(t) * (y - cy) - math.sin(t) * (x - cx) + cy
            sx = math.sin(t) * (y - cy) + math.cos(t) * (x - cx) + cx
            ry, rx = math.floor(sy + 0.5), math.floor(sx + 0.5)
            ok[y, x] = 0 <= ry < h and 0 <= rx < w
    return ok


@pytest.mark.parametrize("angle", [2.5, -2.5])
def test_rotation_mask_matches_inverse_map(angle):
    s = generate_synth(SynthSceneSpec(seed=2))
    out = rotate(s, angle)
    expected = rotation_oracle(64, 128, angle)
    np.testing.assert_array_equal(out.mask[0], expected)
    assert not expected.all()
    assert np.all(out.depth[0][~expected] == 0)


def test_rotation_zero_is_identity():
    s = generate_synth(SynthSceneSpec(seed=2, invalid_fraction=0.1))
    out = rotate(s, 0.0)
    np.testing.assert_array_equal(out.depth, s.depth)
    np.testing.assert_array_equal(out.mask, s.mask)
    np.testing.assert_allclose(out.rgb, s.rgb, atol=1e-15)


def test_geometry_commutes_with_masking():
    s = generate_synth(SynthSceneSpec(seed=4, invalid_fraction=0.2))
    cfg = AugmentConfig(crop_height=32, crop_width=64)
    for k in range(10):
        out = augment(s, cfg, np.random.default_rng(k))
        np.testing.assert_array_equal(out.depth > 0, out.mask)


def test_photometric_leaves_depth_and_mask_untouched():
    s = generate_synth(SynthSceneSpec(seed=6, invalid_fraction=0.1))
    cfg = AugmentConfig(rotation_deg=0, hflip_prob=0, brightness=0.5, contrast=0.5, color=0.3,
                        crop_height=64, crop_width=128)
    out = augment(s, cfg, np.random.default_rng(0))
    assert out.depth.tobytes() == s.depth.tobytes() and out.mask.tobytes() == s.mask.tobytes()
    assert out.rgb.tobytes() != s.rgb.tobytes()
    assert out.rgb.min() >= 0 and out.rgb.max() <= 1
    assert photometric(s.rgb, 1.0, 1.0, np.ones(3)).tobytes() == s.rgb.tobytes()


def test_identity_config_is_centre_crop():
    s = generate_synth(SynthSceneSpec(seed=8, height=96, width=160))
    out = augment(s, AugmentConfig.identity(64, 128), np.random.default_rng(0))
    ref = crop(s, 16, 16, 64, 128)
    for a, b in ((out.rgb, ref.rgb), (out.depth, ref.depth), (out.mask, ref.mask)):
        assert a.tobytes() == b.tobytes()


def test_hflip_is_an_involution_on_the_crop():
    s = generate_synth(SynthSceneSpec(seed=9))
    c = crop(s, 0, 32, 64, 64)
    twice = hflip(hflip(c))
    assert sample_bytes(twice) == sample_bytes(c)
    assert hflip(c).depth[0, :, 0].tobytes() == c.depth[0, :, -1].tobytes()


def test_crop_larger_than_image_rejected():
    s = generate_synth(SynthSceneSpec(seed=1, height=32, width=64))
    with pytest.raises(ValueError):
        augment(s, AugmentConfig(), np.random.default_rng(0))


def test_batches_keep_partial_tail():
    data = synth_dataset(SynthSceneSpec(seed=0, height=32, width=32), 10)
    sizes = [len(b.ids) for b in batch_iter(data, 4, shuffle_seed=1)]
    assert sizes == [4, 4, 2]
    b = next(batch_iter(data, 4, 1))
    assert b.rgb.shape == (4, 3, 32, 32) and b.mask.shape == (4, 1, 32, 32)


def test_epoch_orders():
    np.testing.assert_array_equal(epoch_order(10, 5, 0), epoch_order(10, 5, 0))
    assert sorted(epoch_order(10, 5, 0)) == list(range(10))
    assert epoch_order(10, 5, 0).tolist() != epoch_order(10, 5, 1).tolist()


def test_empty_dataset_rejected():
    with pytest.raises(DatasetError):
        next(batch_iter([], 4, 0))


def test_depth_sample_size():
    s = DepthSample(np.zeros((3, 4, 6)), np.zeros((1, 4, 6)), np.zeros((1, 4, 6), bool))
    assert s.size == (4, 6)
