"""Automatic scoring heuristics and the label CSV round trip."""

from __future__ import annotations

import numpy as np
import pytest

from xcryonet.autolabel import (
    CSV_HEADER,
    ScoreVector,
    brightness_score,
    canny_edges,
    load_labels,
    squareness_score,
    write_labels,
)
from xcryonet.errors import MalformedRow, ScoreOutOfRange
from xcryonet.extract import SquareImage


def square_image(size=64, side=40, value=0.9, background=0.0):
    image = np.full((size, size), background, np.float32)
    start = (size - side) // 2
    image[start:start + side, start:start + side] = value
    return image


class TestScoreVector:
    def test_items_ordered_like_csv(self):
        vec = ScoreVector(y_b=1, y_s=2, y_cr=3, y_co=4, y_o=0)
        assert [k for k, _ in vec.items()] == CSV_HEADER[1:]
        assert [v for _, v in vec.items()] == [1, 2, 3, 4, 0]

    def test_unlabeled_flag(self):
        assert ScoreVector(None, None, None, None, None).unlabeled
        assert not ScoreVector(1, None, None, None, None).unlabeled

    def test_as_array_uses_nan_for_missing(self):
        arr = ScoreVector(4, None, 2, None, 1).as_array()
        assert arr.dtype == np.float64
        assert arr[0] == 4 and arr[2] == 2 and arr[4] == 1
        assert np.isnan(arr[1]) and np.isnan(arr[3])


class TestBrightness:
    def test_mean_of_lit_pixels_scaled_to_four(self):
        image = np.zeros((10, 10), np.float32)
        image[:5] = 0.5  # half the pixels lit at 0.5
        assert brightness_score(image) == pytest.approx(4 * 0.5)

    def test_all_dark_scores_zero(self):
        assert brightness_score(np.zeros((8, 8), np.float32)) == 0.0

    def test_full_brightness_scores_four(self):
        assert brightness_score(np.ones((8, 8), np.float32)) == pytest.approx(4.0)

    def test_accepts_square_image_wrapper(self):
        wrapped = SquareImage(pixels=np.full((6, 6), 0.25, np.float32),
                              source_grid="g", center=(0, 0), ncc_score=1.0)
        assert brightness_score(wrapped) == pytest.approx(1.0)

    def test_zero_pixels_excluded_from_mean(self):
        image = np.zeros((4, 4), np.float32)
        image[0, 0] = 1.0
        # only the single lit pixel participates
        assert brightness_score(image) == pytest.approx(4.0)


class TestCannyEdges:
    def test_square_outline_detected(self):
        edges = canny_edges(square_image())
        assert edges.dtype == bool
        assert edges.any()
        rr, cc = np.nonzero(edges)
        start, stop = 12, 52  # square occupies [12, 52)
        assert abs(rr.min() - start) <= 2 and abs(rr.max() - (stop - 1)) <= 2
        assert abs(cc.min() - start) <= 2 and abs(cc.max() - (stop - 1)) <= 2
        # interior of the square stays empty
        assert not edges[20:44, 20:44].any()

    def test_constant_image_has_no_edges(self):
        assert not canny_edges(np.full((32, 32), 0.7, np.float32)).any()

    def test_outline_is_thin(self):
        # non-maximum suppression should leave roughly one-pixel edges:
        # close to the geometric perimeter, nowhere near the filled area
        edges = canny_edges(square_image(64, 40))
        perimeter = 4 * 40
        assert perimeter / 2 <= edges.sum() <= 2.5 * perimeter


class TestSquareness:
    def test_perfect_square_near_four(self):
        score = squareness_score(square_image())
        assert 3.4 <= score <= 4.0

    def test_circle_scores_below_square(self):
        size = 64
        yy, xx = np.mgrid[:size, :size]
        circle = ((yy - 32) ** 2 + (xx - 32) ** 2 <= 20 ** 2)
        image = np.where(circle, 0.9, 0.0).astype(np.float32)
        circle_score = squareness_score(image)
        square_score = squareness_score(square_image())
        assert circle_score < square_score
        # circle fills pi/4 of its bounding square
        assert circle_score == pytest.approx(4 * np.pi / 4, abs=0.5)

    def test_rotated_square_still_scores_high(self):
        size = 64
        yy, xx = np.mgrid[:size, :size]
        u = (yy - 32) + (xx - 32)
        v = (yy - 32) - (xx - 32)
        diamond = (np.abs(u) <= 24) & (np.abs(v) <= 24)
        image = np.where(diamond, 0.9, 0.0).astype(np.float32)
        assert squareness_score(image) >= 3.0

    def test_thin_bar_scores_low(self):
        image = np.zeros((64, 64), np.float32)
        image[30:34, 8:56] = 0.9
        assert squareness_score(image) < 1.5

    def test_featureless_image_scores_zero(self):
        assert squareness_score(np.zeros((32, 32), np.float32)) == 0.0


class TestCsvRoundTrip:
    def test_write_then_load(self, tmp_path):
        labels = {
            "sq_000": ScoreVector(4, 3, 2, 1, 0),
            "sq_001": ScoreVector(None, None, None, None, None),
            "sq_002": ScoreVector(2, None, 4, None, 3),
        }
        path = tmp_path / "labels.csv"
        write_labels(path, labels)
        back = load_labels(path)
        assert back == labels
        assert list(back) == list(labels)

    def test_header_written_exactly(self, tmp_path):
        path = tmp_path / "labels.csv"
        write_labels(path, {"a": ScoreVector(1, 1, 1, 1, 1)})
        first = path.read_text().splitlines()[0]
        assert first.split(",") == CSV_HEADER

    def test_blank_cells_mean_unlabeled(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("id,y_b,y_s,y_cr,y_co,y_o\nsq,4,,2,,\n")
        labels = load_labels(path)
        assert labels["sq"] == ScoreVector(4, None, 2, None, None)

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("id,y_b,y_s,y_cr,y_co\nsq,1,2,3,4\n")
        with pytest.raises(MalformedRow):
            load_labels(path)

    def test_wrong_cell_count_rejected(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("id,y_b,y_s,y_cr,y_co,y_o\nsq,1,2,3\n")
        with pytest.raises(MalformedRow):
            load_labels(path)

    def test_empty_id_rejected(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("id,y_b,y_s,y_cr,y_co,y_o\n,1,2,3,4,0\n")
        with pytest.raises(MalformedRow):
            load_labels(path)

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text(
            "id,y_b,y_s,y_cr,y_co,y_o\nsq,1,2,3,4,0\nsq,0,0,0,0,0\n")
        with pytest.raises(MalformedRow):
            load_labels(path)

    def test_non_numeric_cell_rejected(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("id,y_b,y_s,y_cr,y_co,y_o\nsq,high,2,3,4,0\n")
        with pytest.raises(MalformedRow):
            load_labels(path)

    def test_score_outside_scale_rejected(self, tmp_path):
        for bad in ("5", "-1", "2.5"):
            path = tmp_path / "labels.csv"
            path.write_text(f"id,y_b,y_s,y_cr,y_co,y_o\nsq,{bad},2,3,4,0\n")
            with pytest.raises(ScoreOutOfRange):
                load_labels(path)
