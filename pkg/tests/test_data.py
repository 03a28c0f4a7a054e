import numpy as np
import pytest

from dualmod.data import (
    SceneSpec,
    crop_flip,
    generate_scene,
    load_dataset,
    read_annotations,
    read_pnm,
    synthetic_set,
    write_dataset,
    write_pnm,
)
from dualmod.errors import ConfigError, GenerationError, LoadError, ParseError


class TestGenerator:
    def test_empty_scene(self):
        s = generate_scene(SceneSpec(n_people=0, seed=3))
        assert s.count == 0 and s.annotations.points.shape == (0, 2)

    def test_deterministic(self):
        a = generate_scene(SceneSpec(n_people=7, seed=42))
        b = generate_scene(SceneSpec(n_people=7, seed=42))
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.thermal, b.thermal)
        np.testing.assert_array_equal(a.annotations.points, b.annotations.points)

    def test_seed_changes_scene(self):
        a = generate_scene(SceneSpec(n_people=7, seed=1))
        b = generate_scene(SceneSpec(n_people=7, seed=2))
        assert not np.array_equal(a.annotations.points, b.annotations.points)

    def test_dark_rgb_has_no_heads_but_thermal_does(self):
        spec = dict(n_people=6, seed=5)
        dark = generate_scene(SceneSpec(rgb_brightness=0.0, **spec))
        empty = generate_scene(SceneSpec(rgb_brightness=0.0, n_people=0, seed=5))
        bright = generate_scene(SceneSpec(rgb_brightness=1.0, **spec))
        # thermal ignores brightness
        np.testing.assert_array_equal(dark.thermal, bright.thermal)
        # with brightness 0 the rgb contrast at head centres is no larger than the background range
        pts = np.rint(dark.annotations.points).astype(int)
        at_heads = dark.rgb[:, pts[:, 1], pts[:, 0]]
        assert at_heads.max() <= dark.rgb.max()
        assert bright.rgb[:, pts[:, 1], pts[:, 0]].mean() > dark.rgb[:, pts[:, 1], pts[:, 0]].mean() + 0.3
        assert empty.count == 0

    def test_values_in_unit_range_and_bounds(self):
        s = generate_scene(SceneSpec(width=48, height=32, n_people=10, seed=9))
        assert s.rgb.shape == (3, 32, 48) and s.thermal.shape == (1, 32, 48)
        assert s.rgb.min() >= 0 and s.rgb.max() <= 1
        assert s.thermal.min() >= 0 and s.thermal.max() <= 1
        s.annotations.check_bounds(32, 48)

    def test_minimum_separation(self):
        s = generate_scene(SceneSpec(n_people=12, seed=4, blob_radius=3.0))
        p = s.annotations.points
        d = np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1)) + np.eye(len(p)) * 1e9
        assert d.min() >= 6.0

    def test_thermal_peaks_align_with_heads(self):
        s = generate_scene(SceneSpec(n_people=4, seed=8))
        for x, y in s.annotations.points:
            i0, j0 = int(round(y)), int(round(x))
            win = s.thermal[0, max(i0 - 2, 0):i0 + 3, max(j0 - 2, 0):j0 + 3]
            i, j = np.unravel_index(np.argmax(win), win.shape)
            assert abs(max(i0 - 2, 0) + i - y) <= 1.0 and abs(max(j0 - 2, 0) + j - x) <= 1.0

    def test_overcrowded(self):
        with pytest.raises(GenerationError):
            generate_scene(SceneSpec(width=10, height=10, n_people=50, seed=0))

    def test_invalid_spec(self):
        with pytest.raises(ConfigError):
            SceneSpec(rgb_brightness=1.5)
        with pytest.raises(ConfigError):
            SceneSpec(n_people=-1)

    def test_synthetic_set_ranges(self):
        ss = synthetic_set(10, 3, 32, (2, 4), (0.0, 1.0))
        assert len({s.id for s in ss}) == 10
        assert all(2 <= s.count <= 4 for s in ss)
        assert all(0.0 <= s.rgb_brightness <= 1.0 for s in ss)


class TestPnm:
    @pytest.mark.parametrize("plain", [False, True])
    @pytest.mark.parametrize("channels", [1, 3])
    def test_round_trip(self, tmp_path, plain, channels):
        img = np.random.default_rng(channels).random((channels, 5, 7))
        path = tmp_path / "im.pnm"
        write_pnm(path, img, plain)
        back = read_pnm(path)
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12

    def test_comments_in_header(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P2\n# comment\n2 1 # trailing\n255\n0 255\n")
        np.testing.assert_array_equal(read_pnm(p), [[[0.0, 1.0]]])

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.pgm"
        p.write_bytes(b"P5\n4 4\n255\n\x00\x01")
        with pytest.raises(ParseError):
            read_pnm(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "b.pgm"
        p.write_bytes(b"P7\n1 1\n255\n\x00")
        with pytest.raises(ParseError):
            read_pnm(p)


class TestDataset:
    def test_round_trip(self, tmp_path):
        samples = synthetic_set(4, 12, 32, (0, 6), (0.0, 1.0))
        write_dataset(samples, tmp_path, "train")
        loaded = load_dataset(tmp_path, "train")
        assert [s.id for s in loaded] == sorted(s.id for s in samples)
        by_id = {s.id: s for s in samples}
        for s in loaded:
            ref = by_id[s.id]
            assert np.abs(s.rgb - ref.rgb).max() <= 1 / 255
            assert np.abs(s.thermal - ref.thermal).max() <= 1 / 255
            np.testing.assert_array_equal(s.annotations.points, ref.annotations.points)

    def test_missing_thermal_named(self, tmp_path):
        write_dataset(synthetic_set(2, 0, 16, (1, 2)), tmp_path, "train")
        victim = sorted((tmp_path / "train" / "thermal").iterdir())[1]
        victim.unlink()
        with pytest.raises(LoadError, match=victim.stem):
            load_dataset(tmp_path, "train")

    def test_orphan_annotation_named(self, tmp_path):
        write_dataset(synthetic_set(1, 0, 16, (1, 2)), tmp_path, "train")
        (tmp_path / "train" / "annotations" / "ghost.txt").write_text("1 2\n")
        with pytest.raises(LoadError, match="ghost"):
            load_dataset(tmp_path, "train")

    def test_annotation_parse_error_line(self, tmp_path):
        p = tmp_path / "a.txt"
        p.write_text("1.0 2.0\n# fine\n3.0 four\n")
        with pytest.raises(ParseError, match=r":3:"):
            read_annotations(p)

    def test_misaligned_modalities(self, tmp_path):
        write_dataset(synthetic_set(1, 0, 16, (1, 2)), tmp_path, "train")
        th = next((tmp_path / "train" / "thermal").iterdir())
        write_pnm(th, np.zeros((1, 8, 16)))
        with pytest.raises(LoadError, match="misaligned"):
            load_dataset(tmp_path, "train")

    def test_bad_split(self, tmp_path):
        with pytest.raises(ConfigError):
            load_dataset(tmp_path, "holdout")


def random_case(rng):
    size = int(rng.integers(8, 40))
    crop = int(rng.integers(1, size + 1))
    spec = SceneSpec(size, size, int(rng.integers(0, 4)), int(rng.integers(0, 10**6)), 1.0, 1.0)
    s = generate_scene(spec)
    # add points on the exact borders to exercise the boundary rule
    extra = np.array([[0.0, 0.0], [size - 1.0, size - 1.0], [rng.uniform(0, size - 1), 0.0]])
    from dualmod.loss_metrics import PointAnnotations

    s.annotations = PointAnnotations(np.concatenate([s.annotations.points, extra]))
    x0 = int(rng.integers(0, size - crop + 1))
    y0 = int(rng.integers(0, size - crop + 1))
    return s, x0, y0, crop


class TestAugmentation:
    def test_flip_involution_identity_and_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            s, x0, y0, crop = random_case(rng)
            c = crop_flip(s, x0, y0, crop, False)
            ff = crop_flip(crop_flip(c, 0, 0, 0, True), 0, 0, 0, True)
            np.testing.assert_array_equal(ff.rgb, c.rgb)
            np.testing.assert_array_equal(ff.thermal, c.thermal)
            # x -> c-1-(c-1-x) is exact up to one rounding step
            np.testing.assert_allclose(ff.annotations.points, c.annotations.points, rtol=0, atol=1e-12)
            f = crop_flip(s, x0, y0, crop, True)
            assert f.count == c.count
            for a in (c, f):
                p = a.annotations.points
                assert np.all(p >= 0) and np.all(p <= crop - 1)
                assert a.rgb.shape == (3, crop, crop)
            # a point is kept iff it lies inside the crop window
            loc = s.annotations.points - [x0, y0]
            inside = np.all((loc >= 0) & (loc <= crop - 1), axis=1)
            assert c.count == int(inside.sum())

    def test_no_crop_no_flip_is_identity(self):
        s = generate_scene(SceneSpec(n_people=5, seed=1))
        t = crop_flip(s, 0, 0, 0, False)
        np.testing.assert_array_equal(t.rgb, s.rgb)
        np.testing.assert_array_equal(t.annotations.points, s.annotations.points)

    def test_flip_mirrors_pixels_with_points(self):
        s = generate_scene(SceneSpec(width=32, height=32, n_people=3, seed=2))
        f = crop_flip(s, 0, 0, 0, True)
        np.testing.assert_array_equal(f.thermal, s.thermal[:, :, ::-1])
        np.testing.assert_allclose(f.annotations.points[:, 0], 31 - s.annotations.points[:, 0])

    def test_window_outside_image(self):
        s = generate_scene(SceneSpec(width=16, height=16, n_people=1, seed=0))
        with pytest.raises(ConfigError):
            crop_flip(s, 10, 0, 8, False)
