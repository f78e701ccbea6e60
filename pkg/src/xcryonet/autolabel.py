"""Automatic scoring of extracted squares and label CSV handling.

Brightness and squareness are computed directly from pixels; cracking and
contamination come from manual annotation, so their columns stay blank in
automatically produced label files. All scores live on the 0..4 scale where
4 is best.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull
from scipy.spatial._qhull import QhullError

from .errors import MalformedRow, ScoreOutOfRange

CSV_HEADER = ["id", "y_b", "y_s", "y_cr", "y_co", "y_o"]

CANNY_SIGMA = 1.4
CANNY_LOW = 0.1
CANNY_HIGH = 0.3


@dataclass(frozen=True)
class ScoreVector:
    """Per-square quality scores; None marks an absent value.

    Order: brightness, squareness, cracking, contamination, overall.
    Labels are integers in {0..4}; model predictions may be any real.
    """

    y_b: float | None = None
    y_s: float | None = None
    y_cr: float | None = None
    y_co: float | None = None
    y_o: float | None = None

    def __post_init__(self):
        for name, value in self.items():
            if value is None:
                continue
            if not np.isfinite(value):
                raise ScoreOutOfRange(f"{name} is not finite: {value}")
            if not 0.0 <= value <= 4.0:
                raise ScoreOutOfRange(f"{name}={value} outside [0, 4]")

    def items(self):
        return (
            ("y_b", self.y_b),
            ("y_s", self.y_s),
            ("y_cr", self.y_cr),
            ("y_co", self.y_co),
            ("y_o", self.y_o),
        )

    @property
    def unlabeled(self) -> bool:
        return all(v is None for _, v in self.items())

    def as_array(self) -> np.ndarray:
        """Scores as float64 with NaN for absent entries."""
        return np.array(
            [np.nan if v is None else float(v) for _, v in self.items()], dtype=np.float64
        )


def _pixels(square) -> np.ndarray:
    arr = square.pixels if hasattr(square, "pixels") else np.asarray(square)
    return np.asarray(arr, dtype=np.float64)


def brightness_score(square) -> float:
    """4 times the mean value of the non-zero pixels (all-zero image -> 0)."""
    px = _pixels(square)
    nz = px[px > 0]
    if nz.size == 0:
        return 0.0
    return float(4.0 * nz.mean())


def canny_edges(image, sigma: float = CANNY_SIGMA,
                low: float = CANNY_LOW, high: float = CANNY_HIGH) -> np.ndarray:
    """Canny edge map with hysteresis thresholds on max-normalized gradients.

    Gaussian smoothing, Sobel gradients, 4-direction non-maximum suppression,
    then hysteresis: weak pixels survive only in 8-connected components that
    contain at least one strong pixel.
    """
    img = np.asarray(image, dtype=np.float64)
    smoothed = ndimage.gaussian_filter(img, sigma=sigma)
    gy = ndimage.sobel(smoothed, axis=0)
    gx = ndimage.sobel(smoothed, axis=1)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak == 0:
        return np.zeros(img.shape, dtype=bool)
    mag = mag / peak

    angle = np.mod(np.arctan2(gy, gx), np.pi)
    sector = ((angle + np.pi / 8) // (np.pi / 4)).astype(int) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros(img.shape, dtype=bool)
    padded = np.pad(mag, 1, mode="constant")
    for s, (dr, dc) in offsets.items():
        fwd = padded[1 + dr : 1 + dr + img.shape[0], 1 + dc : 1 + dc + img.shape[1]]
        bwd = padded[1 - dr : 1 - dr + img.shape[0], 1 - dc : 1 - dc + img.shape[1]]
        sel = sector == s
        keep |= sel & (mag >= fwd) & (mag >= bwd)

    nms = np.where(keep, mag, 0.0)
    strong = nms >= high
    weak = nms >= low
    if not strong.any():
        return np.zeros(img.shape, dtype=bool)
    labels, count = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    strong_labels = np.unique(labels[strong])
    strong_labels = strong_labels[strong_labels > 0]
    return np.isin(labels, strong_labels)


def _min_enclosing_square_side(mask: np.ndarray) -> float:
    """Side of the smallest enclosing square over all orientations.

    Measured between pixel centers, so 1 is added by the caller to account
    for pixel extent. Falls back to the axis-aligned extent when the pixel
    set is degenerate for hull construction.
    """
    ys, xs = np.nonzero(mask)
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    if len(pts) == 1:
        return 0.0
    try:
        hull = ConvexHull(pts)
        pts = pts[hull.vertices]
    except QhullError:
        pass  # collinear or tiny; the raw points are few enough to rotate directly
    thetas = np.linspace(0.0, np.pi / 2, 181)
    cos, sin = np.cos(thetas), np.sin(thetas)
    x = pts[:, 0:1] * cos + pts[:, 1:2] * sin  # (npts, ntheta)
    y = -pts[:, 0:1] * sin + pts[:, 1:2] * cos
    widths = x.max(axis=0) - x.min(axis=0)
    heights = y.max(axis=0) - y.min(axis=0)
    return float(np.maximum(widths, heights).min())


def squareness_score(square) -> float:
    """4 times the filled-region area over its minimum enclosing square area.

    The region comes from Canny edges, morphological closing, and hole
    filling. The enclosing square may rotate freely. An empty edge map
    scores 0; a perfect axis-aligned filled square scores 4.
    """
    px = _pixels(square)
    edges = canny_edges(px)
    if not edges.any():
        return 0.0
    closed = ndimage.binary_closing(edges, structure=np.ones((3, 3), dtype=bool))
    filled = ndimage.binary_fill_holes(closed)
    area = float(filled.sum())
    if area == 0:
        return 0.0
    side = _min_enclosing_square_side(filled) + 1.0
    return float(min(4.0, 4.0 * area / (side * side)))


def _parse_cell(text: str, row_id: str, column: str):
    text = text.strip()
    if text == "":
        return None
    try:
        value = float(text)
    except ValueError as exc:
        raise MalformedRow(f"row {row_id!r}: {column}={text!r} is not a number") from exc
    if value not in (0.0, 1.0, 2.0, 3.0, 4.0):
        raise ScoreOutOfRange(f"row {row_id!r}: {column}={text} not in {{0,1,2,3,4}}")
    return value


def load_labels(path) -> dict:
    """Read a label CSV into {square_id: ScoreVector}.

    The header must be exactly `id,y_b,y_s,y_cr,y_co,y_o`. Blank cells mean
    the score is absent; present values must be integers 0..4.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRow(f"{path}: empty file") from None
        if [h.strip() for h in header] != CSV_HEADER:
            raise MalformedRow(f"{path}: header {header} != {CSV_HEADER}")
        out = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise MalformedRow(f"{path}:{lineno}: expected 6 cells, got {len(row)}")
            row_id = row[0].strip()
            if not row_id:
                raise MalformedRow(f"{path}:{lineno}: empty id")
            if row_id in out:
                raise MalformedRow(f"{path}:{lineno}: duplicate id {row_id!r}")
            values = [_parse_cell(cell, row_id, col) for cell, col in zip(row[1:], CSV_HEADER[1:])]
            out[row_id] = ScoreVector(*values)
    return out


def write_labels(path, labels: dict) -> None:
    """Write {square_id: ScoreVector} in the canonical CSV schema."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row_id in labels:
            vec = labels[row_id]
            cells = [
                "" if v is None else ("%g" % v) for _, v in vec.items()
            ]
            writer.writerow([row_id] + cells)
