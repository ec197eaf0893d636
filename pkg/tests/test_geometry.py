import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from voxlandmark.geometry import (
    AugmentParams,
    CubeMapping,
    LandmarkSet,
    augment,
    crop_to_input,
    flip_remap,
    map_to_image,
    map_to_volume,
    normalize_depth,
    read_landmarks,
    write_landmarks,
)
from voxlandmark.schemes import SCHEMES, UnknownSchemeError, get_scheme


def _lm(points, scheme=None):
    return LandmarkSet(np.asarray(points, dtype=float), scheme)


class TestLandmarkSet:
    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            LandmarkSet(np.zeros((0, 3)))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            _lm([[0, 0, np.inf]])

    def test_rejects_wrong_count_for_scheme(self):
        with pytest.raises(ValueError, match="expects 12"):
            LandmarkSet(np.zeros((11, 3)), "toy12")

    def test_points_are_read_only(self):
        lm = _lm([[1, 2, 3]])
        with pytest.raises(ValueError):
            lm.points[0, 0] = 5

    def test_flat_order(self):
        np.testing.assert_array_equal(_lm([[1, 2, 3], [4, 5, 6]]).flat(), [1, 2, 3, 4, 5, 6])


class TestNormalizeDepth:
    def test_simple(self):
        out = normalize_depth(_lm([[0, 0, 2], [1, 1, 4], [2, 2, 6]]))
        np.testing.assert_allclose(out.points[:, 2], [-2, 0, 2])
        np.testing.assert_array_equal(out.points[:, :2], [[0, 0], [1, 1], [2, 2]])

    def test_already_zero(self):
        out = normalize_depth(_lm(np.zeros((3, 3))))
        np.testing.assert_array_equal(out.points, 0)

    def test_random_68(self, rng):
        pts = np.column_stack([rng.uniform(0, 64, (68, 2)), rng.uniform(-50, 50, 68)])
        out = normalize_depth(LandmarkSet(pts, "68"))
        assert abs(out.points[:, 2].mean()) < 1e-9

    @settings(max_examples=50)
    @given(st.lists(st.tuples(*[st.floats(-1e3, 1e3)] * 3), min_size=1, max_size=20))
    def test_idempotent(self, pts):
        once = normalize_depth(_lm(pts))
        twice = normalize_depth(once)
        np.testing.assert_allclose(twice.points, once.points, atol=1e-9)


class TestCubeMapping:
    def test_midpoint(self):
        mapping = CubeMapping.from_bbox((0, 0, 256, 256), (64, 64, 64))
        out, flagged = map_to_volume(_lm([[128, 128, 0]]), mapping)
        np.testing.assert_allclose(out.points, [[32, 32, 32]])
        assert not flagged

    def test_identity(self, rng):
        mapping = CubeMapping((0, 0, 16, 16), 0.0, 1.0, (16, 16, 16))
        pts = rng.uniform(0, 15, size=(12, 3))
        out, flagged = map_to_volume(_lm(pts), mapping)
        np.testing.assert_array_equal(out.points, pts)
        assert not flagged

    def test_round_trip(self, rng):
        for _ in range(50):
            x0, y0 = rng.uniform(-50, 50, 2)
            bw, bh = rng.uniform(20, 300, 2)
            dims = tuple(int(v) for v in rng.integers(8, 65, 3))
            mapping = CubeMapping.from_bbox((x0, y0, x0 + bw, y0 + bh), dims, rng.uniform(0.5, 2))
            vol = rng.uniform(0, 1, size=(10, 3)) * (np.array(dims) - 1)
            img = map_to_image(_lm(vol), mapping)
            back, flagged = map_to_volume(img, mapping)
            assert not flagged
            np.testing.assert_allclose(back.points, vol, atol=1e-6)
            np.testing.assert_allclose(map_to_image(back, mapping).points, img.points, atol=1e-6)

    def test_clamps_and_flags(self):
        mapping = CubeMapping((0, 0, 16, 16), 0.0, 1.0, (16, 16, 16))
        out, flagged = map_to_volume(_lm([[17.0, -1.0, 5.0]]), mapping)
        assert flagged
        np.testing.assert_array_equal(out.points, [[15.0, 0.0, 5.0]])

    def test_rejects_far_outside(self):
        mapping = CubeMapping((0, 0, 16, 16), 0.0, 1.0, (16, 16, 16))
        with pytest.raises(ValueError):
            map_to_volume(_lm([[100.0, 5.0, 5.0]]), mapping)

    @pytest.mark.parametrize("bbox, scale", [((0, 0, 0, 10), 1.0), ((0, 0, 10, 10), 0.0)])
    def test_invalid(self, bbox, scale):
        with pytest.raises(ValueError):
            CubeMapping(bbox, 0.0, scale, (8, 8, 8))


class TestFlipRemap:
    @pytest.mark.parametrize("scheme", sorted(SCHEMES))
    def test_involution(self, scheme):
        perm = flip_remap(scheme)
        np.testing.assert_array_equal(perm[perm], np.arange(len(perm)))

    @pytest.mark.parametrize("scheme", sorted(SCHEMES))
    def test_fixed_points_are_midline(self, scheme):
        perm = flip_remap(scheme)
        fixed = tuple(int(i) for i in np.flatnonzero(perm == np.arange(len(perm))))
        assert fixed == get_scheme(scheme).midline

    @pytest.mark.parametrize("scheme", sorted(SCHEMES))
    def test_mirrored_template_restored(self, scheme):
        template = get_scheme(scheme).template
        mirrored = template * np.array([-1.0, 1.0, 1.0])
        np.testing.assert_allclose(mirrored[flip_remap(scheme)], template, atol=1e-12)

    def test_68_table(self):
        perm = flip_remap("68")
        assert perm[0] == 16 and perm[36] == 45 and perm[48] == 54
        assert perm[30] == 30 and perm[8] == 8

    def test_unknown(self):
        with pytest.raises(UnknownSchemeError):
            flip_remap("nope")


def _toy_landmarks(rng):
    return LandmarkSet(rng.uniform(4, 12, size=(12, 3)), "toy12")


class TestAugment:
    def test_identity(self, rng):
        image = rng.random((64, 64, 3))
        lm = _toy_landmarks(rng)
        out_img, out_lm = augment(image, lm, AugmentParams(), (16, 16, 16))
        np.testing.assert_array_equal(out_img, image)
        np.testing.assert_array_equal(out_lm.points, lm.points)

    def test_double_flip(self, rng):
        image = rng.random((64, 64, 3))
        lm = _toy_landmarks(rng)
        p = AugmentParams(flip=True)
        img1, lm1 = augment(image, lm, p, (16, 16, 16))
        img2, lm2 = augment(img1, lm1, p, (16, 16, 16))
        np.testing.assert_allclose(lm2.points, lm.points, atol=1e-6)
        # mirroring about W/2 sends column 0 off the pixel grid; the rest is a permutation
        np.testing.assert_allclose(img2[:, 1:], image[:, 1:], atol=1e-12)

    @pytest.mark.parametrize("angle, expected", [(90, (32, 16)), (-90, (32, 48))])
    def test_quarter_turn(self, angle, expected):
        pts = np.array([[48.0, 32.0, 20.0]])
        _, out = augment(np.zeros((64, 64, 3)), _lm(pts), AugmentParams(rotation_deg=angle), (64, 64, 64))
        np.testing.assert_allclose(out.points[0, :2], expected, atol=1e-12)
        np.testing.assert_allclose(out.points[0, :2], oracles.rotate_about((48, 32), (32, 32), angle), atol=1e-12)
        assert out.points[0, 2] == pytest.approx(20.0)

    def test_matches_rotation_oracle(self, rng):
        for _ in range(20):
            angle, scale = rng.uniform(-30, 30), rng.uniform(0.75, 1.25)
            pts = rng.uniform(0, 15, size=(12, 3))
            _, out = augment(np.zeros((64, 64, 3)), _lm(pts, "toy12"), AugmentParams(angle, scale), (16, 16, 16))
            for p, q in zip(pts, out.points):
                rx, ry = oracles.rotate_about(p[:2], (8, 8), angle)
                np.testing.assert_allclose(q[:2], [8 + scale * (rx - 8), 8 + scale * (ry - 8)], atol=1e-12)
                assert q[2] == pytest.approx(8 + scale * (p[2] - 8))

    def test_image_follows_landmarks(self):
        # a bright pixel must land where its landmark goes
        image = np.zeros((64, 64, 3))
        image[24, 44] = 1.0
        lm = _lm([[44 / 4, 24 / 4, 8]])
        out_img, out_lm = augment(image, lm, AugmentParams(rotation_deg=90), (16, 16, 16))
        y, x = np.unravel_index(out_img[..., 0].argmax(), (64, 64))
        np.testing.assert_allclose([x / 4, y / 4], out_lm.points[0, :2], atol=0.3)

    def test_flip_needs_scheme(self, rng):
        with pytest.raises(ValueError):
            augment(np.zeros((64, 64, 3)), _lm(rng.uniform(0, 15, (3, 3))), AugmentParams(flip=True), (16, 16, 16))

    def test_flip_keeps_left_right_identity(self, rng):
        template = get_scheme("toy12").template
        pts = 8 + 4 * template
        _, out = augment(np.zeros((64, 64, 3)), _lm(pts, "toy12"), AugmentParams(flip=True), (16, 16, 16))
        # the mirrored face is the same symmetric face with the same labels
        np.testing.assert_allclose(out.points, pts, atol=1e-12)

    def test_draw_is_seeded(self):
        assert AugmentParams.draw(7) == AugmentParams.draw(7)
        p = AugmentParams.draw(3)
        assert -30 <= p.rotation_deg <= 30 and 0.75 <= p.scale <= 1.25

    def test_rejects_bad_scale(self):
        with pytest.raises(ValueError):
            AugmentParams(scale=0)


class TestCrop:
    def test_full_frame_is_copy(self, rng):
        img = rng.random((64, 64, 3))
        np.testing.assert_array_equal(crop_to_input(img, (0, 0, 64, 64), (64, 64)), img)

    def test_downsample_constant(self):
        out = crop_to_input(np.full((128, 128, 3), 0.25), (0, 0, 128, 128), (64, 64))
        np.testing.assert_allclose(out, 0.25)


class TestLandmarkFiles:
    def test_round_trip(self, tmp_path, rng):
        lm = LandmarkSet(rng.normal(size=(12, 3)) * 100, "toy12")
        write_landmarks(tmp_path / "a.pts3", lm)
        back = read_landmarks(tmp_path / "a.pts3")
        assert back.scheme_id == "toy12"
        np.testing.assert_array_equal(back.points, lm.points)

    def test_header_count_mismatch(self, tmp_path):
        (tmp_path / "a.pts3").write_text("# scheme=toy12 n=12\n1 2 3\n")
        with pytest.raises(ValueError, match="n=12"):
            read_landmarks(tmp_path / "a.pts3")

    def test_bad_line_reports_location(self, tmp_path):
        (tmp_path / "a.pts3").write_text("1 2 3\n1 2\n")
        with pytest.raises(ValueError, match="a.pts3:2"):
            read_landmarks(tmp_path / "a.pts3")
