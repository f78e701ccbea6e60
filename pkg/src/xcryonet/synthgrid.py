"""Procedural synthetic grid squares with exact ground-truth scores.

Each sample is a bright, possibly distorted quadrilateral on a dark
background, optionally marred by dark polyline cracks and dark
contamination blobs, plus Gaussian noise. Scores follow fixed formulas:
brightness and squareness from the requested parameters, cracking from the
measured cracked fraction of the quad surface (saturating at 1/4 of the
surface), contamination from the requested coverage (saturating at 1/2),
and the overall score as the mean of the four with the two defect scores
inverted so that higher is always better.

Rendering is a pure function of the parameter set, seed included.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .autolabel import ScoreVector, write_labels
from .errors import InvalidParams
from .extract import SquareImage

QUAD_FRACTION = 0.71        # quad side relative to image size
MAX_ROTATION_DEG = 15.0
CORNER_JITTER_FRACTION = 0.16   # peak corner displacement at distortion 1
CRACK_SATURATION = 0.25     # cracked fraction that maps to score 4
COVERAGE_SATURATION = 0.5   # contamination coverage that maps to score 4
MIN_BLOB_RADIUS = 2.0
MAX_BLOBS = 200


@dataclass(frozen=True)
class SynthParams:
    size: int
    brightness_level: float
    squareness_distortion: float
    crack_count: int
    crack_width_px: int
    contamination_coverage: float
    noise_sigma: float
    seed: int

    def __post_init__(self):
        if self.size < 8:
            raise InvalidParams(f"size must be >= 8, got {self.size}")
        for name in ("brightness_level", "squareness_distortion", "contamination_coverage"):
            v = getattr(self, name)
            if not (np.isfinite(v) and 0.0 <= v <= 1.0):
                raise InvalidParams(f"{name} must lie in [0,1], got {v}")
        if self.crack_count < 0:
            raise InvalidParams(f"crack_count must be >= 0, got {self.crack_count}")
        if self.crack_count > 0 and self.crack_width_px < 1:
            raise InvalidParams(f"crack_width_px must be >= 1, got {self.crack_width_px}")
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0.0):
            raise InvalidParams(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass(frozen=True)
class SynthSample:
    """A rendered square plus the masks its scores were measured from."""

    image: np.ndarray        # (size, size) float32 in [0,1]
    scores: ScoreVector
    quad_mask: np.ndarray    # bool, the bright surface
    crack_mask: np.ndarray   # bool, crack pixels on the surface
    contam_mask: np.ndarray  # bool, contamination pixels on the surface


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _quad_corners(size: int, distortion: float, rng) -> np.ndarray:
    """Corner coordinates (x, y) of the distorted, rotated quad."""
    half = QUAD_FRACTION * size / 2.0
    base = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
    angle = np.deg2rad(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    corners = base @ rot.T
    jitter_max = CORNER_JITTER_FRACTION * size * distortion
    corners += rng.uniform(-jitter_max, jitter_max, size=(4, 2))
    center = (size - 1) / 2.0
    corners += center
    return np.clip(corners, 0.0, size - 1.0)


def _polygon_mask(size: int, corners: np.ndarray) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    ImageDraw.Draw(canvas).polygon([tuple(p) for p in corners], fill=255)
    return np.asarray(canvas, dtype=np.uint8) > 0


def _crack_mask(size: int, quad: np.ndarray, count: int, width: int, rng) -> np.ndarray:
    """Dark polyline fissures clipped to the quad surface."""
    if count == 0 or not quad.any():
        return np.zeros((size, size), dtype=bool)
    ys, xs = np.nonzero(quad)
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    for _ in range(count):
        k = rng.integers(0, len(xs))
        x, y = float(xs[k]), float(ys[k])
        angle = rng.uniform(0.0, 2.0 * np.pi)
        points = [(x, y)]
        remaining = rng.uniform(0.6, 1.1) * size
        segments = rng.integers(3, 6)
        for _ in range(segments):
            step = remaining / segments
            angle += rng.uniform(-0.7, 0.7)
            x += step * np.cos(angle)
            y += step * np.sin(angle)
            points.append((x, y))
        draw.line(points, fill=255, width=width)
    return (np.asarray(canvas, dtype=np.uint8) > 0) & quad


def _contamination_mask(size: int, quad: np.ndarray, coverage: float, rng) -> np.ndarray:
    """Dark elliptical blobs accreted until they cover the requested
    fraction of the quad surface (within half the stopping slack)."""
    mask = np.zeros((size, size), dtype=bool)
    quad_area = int(quad.sum())
    if coverage <= 0.0 or quad_area == 0:
        return mask
    target = coverage * quad_area
    slack = max(1.0, 0.01 * quad_area)
    max_radius = size / 6.0
    ys, xs = np.nonzero(quad)
    for _ in range(MAX_BLOBS):
        covered = float((mask & quad).sum())
        remaining = target - covered
        if remaining <= slack:
            break
        radius = float(np.clip(np.sqrt(remaining / np.pi), MIN_BLOB_RADIUS, max_radius))
        # elongate while keeping the area, so blobs are not all circles
        stretch = rng.uniform(0.75, 1.3)
        rx, ry = radius * stretch, radius / stretch
        k = rng.integers(0, len(xs))
        cx, cy = float(xs[k]), float(ys[k])
        canvas = Image.new("L", (size, size), 0)
        ImageDraw.Draw(canvas).ellipse(
            (cx - rx, cy - ry, cx + rx, cy + ry), fill=255
        )
        mask |= np.asarray(canvas, dtype=np.uint8) > 0
    return mask & quad


def render_sample(params: SynthParams) -> SynthSample:
    """Render one synthetic grid square with its ground-truth scores."""
    rng = np.random.default_rng(params.seed)
    size = params.size
    corners = _quad_corners(size, params.squareness_distortion, rng)
    quad = _polygon_mask(size, corners)
    cracks = _crack_mask(size, quad, params.crack_count, params.crack_width_px, rng)
    contam = _contamination_mask(size, quad, params.contamination_coverage, rng)

    surface = quad & ~cracks & ~contam
    image = np.where(surface, np.float64(params.brightness_level), 0.0)
    if params.noise_sigma > 0.0:
        image = image + rng.normal(0.0, params.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    quad_area = int(quad.sum())
    cracked_fraction = float(cracks.sum()) / quad_area if quad_area else 0.0

    y_b = _round_half_up(4.0 * params.brightness_level)
    y_s = _round_half_up(4.0 * (1.0 - params.squareness_distortion))
    y_cr = _round_half_up(4.0 * min(1.0, cracked_fraction / CRACK_SATURATION))
    y_co = _round_half_up(4.0 * min(1.0, params.contamination_coverage / COVERAGE_SATURATION))
    y_o = _round_half_up((y_b + y_s + (4 - y_cr) + (4 - y_co)) / 4.0)
    scores = ScoreVector(y_b=y_b, y_s=y_s, y_cr=y_cr, y_co=y_co, y_o=y_o)

    return SynthSample(image=image, scores=scores, quad_mask=quad,
                       crack_mask=cracks, contam_mask=contam)


def generate(params: SynthParams) -> tuple:
    """Render a sample as a (SquareImage, ScoreVector) pair."""
    sample = render_sample(params)
    half = params.size // 2
    square = SquareImage(
        pixels=sample.image,
        source_grid="synthetic",
        center=(half, half),
        ncc_score=1.0,
    )
    return square, sample.scores


# --------------------------------------------------------------------------
# corpora
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthCorpus:
    images: np.ndarray   # (n, size, size) float32
    labels: dict         # id -> ScoreVector, all-blank rows for unlabeled samples
    truth: dict          # id -> fully populated ScoreVector
    ids: tuple
    params: tuple        # the SynthParams each sample was rendered from


def _draw_params(size: int, seed: int, rng) -> SynthParams:
    return SynthParams(
        size=size,
        brightness_level=float(rng.uniform(0.0, 1.0)),
        squareness_distortion=float(rng.uniform(0.0, 1.0)),
        crack_count=int(rng.integers(0, 5)),
        crack_width_px=int(rng.integers(1, 4)),
        contamination_coverage=float(rng.uniform(0.0, 0.75)),
        noise_sigma=float(rng.uniform(0.0, 0.05)),
        seed=seed,
    )


def generate_corpus(n: int, seed: int, label_fraction: float,
                    out_dir=None, size: int = 64) -> SynthCorpus:
    """n uniformly drawn samples; a seeded round(n*fraction)-row subset keeps
    its scores, the rest are emitted unlabeled.

    When out_dir is given, writes images/<id>.png (8-bit), labels.csv in the
    standard schema, and truth.csv holding every score for reference.
    """
    if n < 1:
        raise InvalidParams(f"need n >= 1 samples, got {n}")
    if not (0.0 <= label_fraction <= 1.0):
        raise InvalidParams(f"label_fraction must lie in [0,1], got {label_fraction}")
    root = np.random.SeedSequence(seed)
    param_child, label_child = root.spawn(2)
    param_rng = np.random.default_rng(param_child)
    sample_seeds = root.generate_state(n, dtype=np.uint64)

    images = np.empty((n, size, size), dtype=np.float32)
    ids = tuple(f"sq_{i:06d}" for i in range(n))
    truth = {}
    all_params = []
    for i in range(n):
        params = _draw_params(size, int(sample_seeds[i]), param_rng)
        sample = render_sample(params)
        images[i] = sample.image
        truth[ids[i]] = sample.scores
        all_params.append(params)

    n_labeled = _round_half_up(n * label_fraction)
    labeled_rows = set(
        np.random.default_rng(label_child).permutation(n)[:n_labeled].tolist()
    )
    blank = ScoreVector(y_b=None, y_s=None, y_cr=None, y_co=None, y_o=None)
    labels = {
        ids[i]: (truth[ids[i]] if i in labeled_rows else blank) for i in range(n)
    }

    corpus = SynthCorpus(images=images, labels=labels, truth=truth,
                         ids=ids, params=tuple(all_params))
    if out_dir is not None:
        _write_corpus(corpus, out_dir)
    return corpus


def _write_corpus(corpus: SynthCorpus, out_dir) -> None:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for i, square_id in enumerate(corpus.ids):
        arr = np.clip(np.rint(corpus.images[i] * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(out_dir / "images" / f"{square_id}.png")
    write_labels(out_dir / "labels.csv", corpus.labels)
    write_labels(out_dir / "truth.csv", corpus.truth)


# --------------------------------------------------------------------------
# montage scaffolding for extraction tests
# --------------------------------------------------------------------------


def render_lattice_montage(rows: int, cols: int, pitch: int, square_side: int,
                           brightness: float = 0.8, noise_sigma: float = 0.0,
                           jitter_px: int = 0, seed: int = 0) -> tuple:
    """A rows x cols lattice of bright squares on a dark canvas.

    Returns (image, centers) where centers lists each square's (row, col)
    pixel center. Squares sit on a regular grid of the given pitch, each
    optionally jittered by up to jitter_px in both axes.
    """
    if rows < 1 or cols < 1:
        raise InvalidParams("lattice needs at least one row and column")
    if not 0 < square_side < pitch:
        raise InvalidParams(f"square_side {square_side} must lie in (0, pitch={pitch})")
    rng = np.random.default_rng(seed)
    image = np.zeros((rows * pitch, cols * pitch), dtype=np.float32)
    centers = []
    half = square_side // 2
    for r in range(rows):
        for c in range(cols):
            cy = r * pitch + pitch // 2
            cx = c * pitch + pitch // 2
            if jitter_px:
                cy += int(rng.integers(-jitter_px, jitter_px + 1))
                cx += int(rng.integers(-jitter_px, jitter_px + 1))
            top, left = cy - half, cx - half
            image[top:top + square_side, left:left + square_side] = brightness
            centers.append((cy, cx))
    if noise_sigma > 0.0:
        image = image + rng.normal(0.0, noise_sigma, size=image.shape).astype(np.float32)
        image = np.clip(image, 0.0, 1.0)
    return image, centers
