"""Locate grid squares in a montage by template matching.

A synthetic bright-square template is correlated against the montage with
zero-mean unit-variance NCC, peaks are picked greedily under a Chebyshev
separation constraint, and fixed-size crops are cut around each peak.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .errors import ConstantTemplate, DegenerateMontage, TemplateTooLarge

DEFAULT_THRESHOLD = 0.3
DEFAULT_MAX_COUNT = 250
INNER_FRACTION = 0.7  # bright core occupies 70% of the template side


@dataclass(frozen=True)
class Template:
    image: np.ndarray  # float32 (side, side)
    fg_level: float
    bg_level: float


@dataclass
class SquareImage:
    pixels: np.ndarray  # float32 (side, side) in [0, 1]
    source_grid: str
    center: tuple  # (row, col) in montage coordinates
    ncc_score: float


def _as_image(montage) -> np.ndarray:
    return montage.image if hasattr(montage, "image") else np.asarray(montage)


def build_template(montage, side: int) -> Template:
    """Construct the matching template from montage intensity percentiles.

    The foreground level is the 75th percentile and the background the 25th;
    a centered bright square covering 70% of the side sits on the background.
    """
    image = _as_image(montage)
    if side < 1 or side > min(image.shape):
        raise TemplateTooLarge(f"side {side} does not fit montage {image.shape}")
    lo = float(image.min())
    hi = float(image.max())
    if hi == lo:
        raise DegenerateMontage("montage is constant")
    bg = float(np.percentile(image, 25))
    fg = float(np.percentile(image, 75))
    if fg <= bg:
        raise DegenerateMontage(
            f"intensity percentiles collapsed (25th={bg}, 75th={fg}); "
            "montage has no usable foreground fraction"
        )
    tmpl = np.full((side, side), bg, dtype=np.float32)
    inner = int(round(INNER_FRACTION * side))
    inner = max(1, inner)
    start = (side - inner) // 2
    tmpl[start : start + inner, start : start + inner] = fg
    return Template(tmpl, fg, bg)


def _box_sums(arr: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Exact sliding-window sums over all th x tw windows via an integral image."""
    ii = np.zeros((arr.shape[0] + 1, arr.shape[1] + 1), dtype=np.float64)
    ii[1:, 1:] = arr.cumsum(axis=0).cumsum(axis=1)
    return ii[th:, tw:] - ii[:-th, tw:] - ii[th:, :-tw] + ii[:-th, :-tw]


def ncc_map(image, template) -> np.ndarray:
    """Zero-mean unit-variance normalized cross correlation, valid mode.

    Constant windows (zero variance) score exactly 0. Scores are clipped to
    [-1, 1] to absorb floating point overshoot.
    """
    img = np.asarray(_as_image(image), dtype=np.float64)
    tmpl = template.image if isinstance(template, Template) else np.asarray(template)
    tmpl = np.asarray(tmpl, dtype=np.float64)
    th, tw = tmpl.shape
    if th > img.shape[0] or tw > img.shape[1]:
        raise TemplateTooLarge(f"template {tmpl.shape} larger than image {img.shape}")
    t0 = tmpl - tmpl.mean()
    t_ss = float((t0 * t0).sum())
    if t_ss == 0.0:
        raise ConstantTemplate("template has zero variance")

    n = th * tw
    # sum over window of w*(t - tbar); the window-mean term cancels exactly
    num = fftconvolve(img, t0[::-1, ::-1], mode="valid")
    s1 = _box_sums(img, th, tw)
    s2 = _box_sums(img * img, th, tw)
    var = s2 - s1 * s1 / n
    np.maximum(var, 0.0, out=var)

    scale = max(1.0, float(np.abs(img).max()) ** 2)
    floor = 1e-10 * n * scale
    denom = np.sqrt(var * t_ss)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(var > floor, num / denom, 0.0)
    return np.clip(out, -1.0, 1.0)


def pick_peaks(scores, threshold: float = DEFAULT_THRESHOLD,
               min_separation: int = 1, max_count: int = DEFAULT_MAX_COUNT) -> list:
    """Greedy non-maximum suppression over an NCC map.

    Candidates at or above `threshold` are visited in descending score order
    (ties broken row-major); a candidate is kept when its Chebyshev distance
    to every kept peak is at least `min_separation`. Returns at most
    `max_count` tuples (row, col, score).
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    if min_separation < 1:
        raise ValueError("min_separation must be >= 1")
    if max_count < 1:
        raise ValueError("max_count must be >= 1")
    arr = np.asarray(scores, dtype=np.float64)
    rr, cc = np.nonzero(arr >= threshold)
    if rr.size == 0:
        return []
    vals = arr[rr, cc]
    order = np.lexsort((cc, rr, -vals))
    suppressed = np.zeros(arr.shape, dtype=bool)
    reach = min_separation - 1
    peaks = []
    for k in order:
        r = int(rr[k])
        c = int(cc[k])
        if suppressed[r, c]:
            continue
        peaks.append((r, c, float(vals[k])))
        if len(peaks) == max_count:
            break
        suppressed[max(0, r - reach) : r + reach + 1, max(0, c - reach) : c + reach + 1] = True
    return peaks


def crop_squares(montage, peaks, side: int, source_grid: str = "") -> list:
    """Cut side x side crops centered on peaks, zero-padding at borders.

    Each crop is min-max normalized to [0, 1] on its own; a constant crop
    becomes all zeros. `side` must be even so the center sits on the corner
    of the four central pixels.
    """
    if side < 2 or side % 2 != 0:
        raise ValueError("side must be an even integer >= 2")
    image = _as_image(montage)
    h, w = image.shape
    half = side // 2
    out = []
    for peak in peaks:
        r, c = int(peak[0]), int(peak[1])
        score = float(peak[2]) if len(peak) > 2 else 0.0
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"peak ({r}, {c}) outside montage {image.shape}")
        crop = np.zeros((side, side), dtype=np.float32)
        r0, c0 = r - half, c - half
        src_r0, src_c0 = max(0, r0), max(0, c0)
        src_r1, src_c1 = min(h, r0 + side), min(w, c0 + side)
        crop[src_r0 - r0 : src_r1 - r0, src_c0 - c0 : src_c1 - c0] = image[
            src_r0:src_r1, src_c0:src_c1
        ]
        lo, hi = float(crop.min()), float(crop.max())
        if hi > lo:
            crop = (crop - lo) / (hi - lo)
        else:
            crop = np.zeros((side, side), dtype=np.float32)
        out.append(SquareImage(crop.astype(np.float32), source_grid, (r, c), score))
    return out
