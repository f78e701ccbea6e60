"""Square localization: normalized cross-correlation against a brute-force
oracle, peak picking semantics, and crop geometry."""

from __future__ import annotations

import numpy as np
import pytest

from xcryonet.errors import (
    ConstantTemplate,
    DegenerateMontage,
    TemplateTooLarge,
)
from xcryonet.extract import (
    SquareImage,
    Template,
    build_template,
    crop_squares,
    ncc_map,
    pick_peaks,
)
from xcryonet.montage import Montage


def brute_ncc(image, template):
    """Direct zero-mean normalized cross correlation, one window at a
    time, entirely in float64. Intentionally slow and independent of the
    FFT implementation under test."""
    image = np.asarray(image, dtype=np.float64)
    template = np.asarray(template, dtype=np.float64)
    th, tw = template.shape
    out_h = image.shape[0] - th + 1
    out_w = image.shape[1] - tw + 1
    t0 = template - template.mean()
    t_norm = np.sqrt((t0 ** 2).sum())
    out = np.zeros((out_h, out_w))
    floor = 1e-10 * th * tw * max(1.0, np.abs(image).max() ** 2)
    for r in range(out_h):
        for c in range(out_w):
            win = image[r:r + th, c:c + tw]
            w0 = win - win.mean()
            denom = np.sqrt(max((w0 ** 2).sum(), floor)) * t_norm
            var = (w0 ** 2).sum()
            if var <= floor:
                out[r, c] = 0.0
            else:
                out[r, c] = np.clip((w0 * t0).sum() / denom, -1.0, 1.0)
    return out


def synthetic_scene(rng, size=48, square=10, n=3):
    """Dark background with bright squares at known top-left corners."""
    image = rng.uniform(0.0, 0.08, (size, size)).astype(np.float32)
    corners = [(4, 4), (4, 30), (30, 17)][:n]
    for r, c in corners:
        image[r:r + square, c:c + square] += 0.8
    return np.clip(image, 0, 1), corners


class TestNccOracle:
    def test_matches_brute_force_on_random_pairs(self, rng):
        for _ in range(10):
            ih = int(rng.integers(12, 24))
            iw = int(rng.integers(12, 24))
            th = int(rng.integers(3, 8))
            tw = int(rng.integers(3, 8))
            image = rng.standard_normal((ih, iw))
            template = rng.standard_normal((th, tw))
            fast = ncc_map(image, template)
            slow = brute_ncc(image, template)
            assert fast.shape == slow.shape
            assert np.max(np.abs(fast - slow)) < 1e-6

    def test_affine_intensity_invariance(self, rng):
        image = rng.standard_normal((30, 30))
        template = rng.standard_normal((7, 7))
        base = ncc_map(image, template)
        shifted = ncc_map(2.5 * image + 0.7, template)
        assert np.max(np.abs(base - shifted)) < 1e-5

    def test_scores_bounded(self, rng):
        image = rng.standard_normal((25, 25))
        template = rng.standard_normal((6, 6))
        scores = ncc_map(image, template)
        assert scores.min() >= -1.0 and scores.max() <= 1.0

    def test_perfect_match_scores_one(self, rng):
        image = rng.uniform(0, 1, (20, 20))
        template = image[5:12, 3:10].copy()
        scores = ncc_map(image, template)
        assert scores[5, 3] == pytest.approx(1.0, abs=1e-9)
        assert np.unravel_index(scores.argmax(), scores.shape) == (5, 3)

    def test_constant_windows_score_zero(self):
        image = np.zeros((15, 15))
        image[8:12, 8:12] = 1.0
        template = np.zeros((4, 4))
        template[1:3, 1:3] = 1.0
        scores = ncc_map(image, template)
        assert scores[0, 0] == 0.0  # flat region carries no signal

    def test_constant_template_rejected(self, rng):
        with pytest.raises(ConstantTemplate):
            ncc_map(rng.standard_normal((10, 10)), np.ones((3, 3)))

    def test_oversized_template_rejected(self, rng):
        with pytest.raises(TemplateTooLarge):
            ncc_map(rng.standard_normal((5, 5)), np.zeros((6, 6)))


class TestBuildTemplate:
    def montage_from(self, image):
        return Montage(image=image.astype(np.float32), placements=[])

    def test_levels_from_percentiles(self, rng):
        image, _ = synthetic_scene(rng)
        template = build_template(self.montage_from(image), side=10)
        assert isinstance(template, Template)
        assert template.image.shape == (10, 10)
        assert template.fg_level == pytest.approx(
            float(np.percentile(image, 75)))
        assert template.bg_level == pytest.approx(
            float(np.percentile(image, 25)))
        inner = round(0.7 * 10)
        start = (10 - inner) // 2
        np.testing.assert_allclose(
            template.image[start:start + inner, start:start + inner],
            template.fg_level)
        assert template.image[0, 0] == pytest.approx(template.bg_level)

    def test_constant_montage_rejected(self):
        with pytest.raises(DegenerateMontage):
            build_template(self.montage_from(np.full((20, 20), 0.5)), side=6)

    def test_side_bounds(self, rng):
        montage = self.montage_from(rng.uniform(0, 1, (12, 12)))
        with pytest.raises(TemplateTooLarge):
            build_template(montage, side=0)
        with pytest.raises(TemplateTooLarge):
            build_template(montage, side=13)


class TestPickPeaks:
    def test_orders_by_score_descending(self):
        scores = np.zeros((9, 9))
        scores[1, 1] = 0.5
        scores[7, 7] = 0.9
        scores[4, 4] = 0.7
        peaks = pick_peaks(scores, threshold=0.3, min_separation=2)
        assert [(r, c) for r, c, _ in peaks] == [(7, 7), (4, 4), (1, 1)]
        assert [s for _, _, s in peaks] == [0.9, 0.7, 0.5]

    def test_threshold_filters(self):
        scores = np.zeros((5, 5))
        scores[2, 2] = 0.29
        assert pick_peaks(scores, threshold=0.3) == []
        scores[2, 2] = 0.31
        assert len(pick_peaks(scores, threshold=0.3)) == 1

    def test_chebyshev_suppression(self):
        scores = np.zeros((10, 10))
        scores[5, 5] = 0.9
        scores[5, 7] = 0.8   # within reach 2 of the kept peak
        scores[5, 8] = 0.7   # outside reach 2
        peaks = pick_peaks(scores, threshold=0.3, min_separation=3)
        assert [(r, c) for r, c, _ in peaks] == [(5, 5), (5, 8)]

    def test_separation_one_keeps_adjacent(self):
        scores = np.zeros((6, 6))
        scores[2, 2] = 0.9
        scores[2, 3] = 0.8
        peaks = pick_peaks(scores, threshold=0.3, min_separation=1)
        assert len(peaks) == 2

    def test_max_count_truncates(self):
        scores = np.linspace(0.4, 0.9, 25).reshape(5, 5)
        peaks = pick_peaks(scores, threshold=0.3, min_separation=1,
                           max_count=4)
        assert len(peaks) == 4
        assert peaks[0][2] == pytest.approx(0.9)

    def test_ties_broken_row_major(self):
        scores = np.zeros((8, 8))
        for r, c in ((6, 1), (2, 5), (2, 1)):
            scores[r, c] = 0.5
        peaks = pick_peaks(scores, threshold=0.3, min_separation=2)
        assert [(r, c) for r, c, _ in peaks] == [(2, 1), (2, 5), (6, 1)]

    def test_no_pair_violates_separation(self, rng):
        scores = rng.uniform(0, 1, (40, 40))
        sep = 5
        peaks = pick_peaks(scores, threshold=0.3, min_separation=sep)
        coords = [(r, c) for r, c, _ in peaks]
        assert len(set(coords)) == len(coords)
        for i, (r1, c1) in enumerate(coords):
            for r2, c2 in coords[i + 1:]:
                assert max(abs(r1 - r2), abs(c1 - c2)) >= sep

    def test_parameter_validation(self):
        scores = np.zeros((4, 4))
        with pytest.raises(ValueError):
            pick_peaks(scores, threshold=0.0)
        with pytest.raises(ValueError):
            pick_peaks(scores, threshold=1.0)
        with pytest.raises(ValueError):
            pick_peaks(scores, min_separation=0)
        with pytest.raises(ValueError):
            pick_peaks(scores, max_count=0)


class TestCropSquares:
    def montage_from(self, image):
        return Montage(image=image.astype(np.float32), placements=[])

    def test_center_lands_mid_crop(self, rng):
        image = rng.uniform(0, 1, (30, 30)).astype(np.float32)
        side = 8
        peak = (11, 13, 0.9)
        crops = crop_squares(self.montage_from(image), [peak], side,
                             source_grid="g1")
        crop = crops[0]
        assert isinstance(crop, SquareImage)
        assert crop.pixels.shape == (side, side)
        assert crop.center == (11, 13)
        assert crop.ncc_score == 0.9
        assert crop.source_grid == "g1"
        half = side // 2
        window = image[11 - half:11 - half + side, 13 - half:13 - half + side]
        lo, hi = window.min(), window.max()
        np.testing.assert_allclose(crop.pixels, (window - lo) / (hi - lo),
                                   atol=1e-6)

    def test_border_crop_zero_padded(self):
        image = np.ones((20, 20), np.float32)
        image[0, 0] = 0.0  # give the window some spread
        crops = crop_squares(self.montage_from(image), [(1, 1, 0.5)], side=8)
        pixels = crops[0].pixels
        # rows/cols falling outside the montage stay zero
        np.testing.assert_array_equal(pixels[:3, 0], 0.0)
        np.testing.assert_array_equal(pixels[0, :3], 0.0)
        assert pixels[4, 4] > 0.0

    def test_constant_window_becomes_zeros(self):
        image = np.full((20, 20), 0.4, np.float32)
        crops = crop_squares(self.montage_from(image), [(10, 10, 0.5)],
                             side=6)
        np.testing.assert_array_equal(crops[0].pixels, 0.0)

    def test_odd_or_tiny_side_rejected(self):
        montage = self.montage_from(np.zeros((20, 20)))
        with pytest.raises(ValueError):
            crop_squares(montage, [(10, 10, 0.5)], side=7)
        with pytest.raises(ValueError):
            crop_squares(montage, [(10, 10, 0.5)], side=0)

    def test_center_outside_montage_rejected(self):
        montage = self.montage_from(np.zeros((20, 20)))
        with pytest.raises(ValueError):
            crop_squares(montage, [(25, 10, 0.5)], side=6)


class TestEndToEndLocalization:
    def test_recovers_known_squares(self, rng):
        image, corners = synthetic_scene(rng, size=48, square=10, n=3)
        montage = Montage(image=image, placements=[])
        template = build_template(montage, side=10)
        scores = ncc_map(montage.image, template.image)
        # partial-overlap responses sit below ~0.4; true squares near 0.75
        peaks = pick_peaks(scores, threshold=0.5, min_separation=8)
        assert len(peaks) == 3
        found = sorted((r, c) for r, c, _ in peaks)
        for (fr, fc), (tr, tc) in zip(found, sorted(corners)):
            assert abs(fr - tr) <= 2 and abs(fc - tc) <= 2
        crops = crop_squares(montage, peaks, side=14, source_grid="demo")
        assert len(crops) == 3
        for crop in crops:
            assert crop.pixels.shape == (14, 14)
            # crop center should sit on a bright square
            assert crop.pixels[7, 7] > 0.6
