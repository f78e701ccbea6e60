"""Assemble a grid montage from individually acquired tiles.

Stage positions come from a JSON manifest, a list of objects with keys
"tile", "x_um", "y_um". Tiles are placed by abutting them on a rows x cols
lattice; there is no blending or feathering, and absent cells stay zero.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import mrc_io
from .errors import (
    DuplicatePosition,
    IoFailure,
    MissingTileFile,
    MixedTileSizes,
    TooManyTiles,
)

MAX_GRID = 5  # acquisition protocol caps montages at 5x5 tiles


@dataclass(frozen=True)
class StagePosition:
    tile_path: str
    x_um: float
    y_um: float


@dataclass(frozen=True)
class Placement:
    tile: str | None  # None marks an empty (zero-filled) cell
    row: int
    col: int
    offset: tuple  # (pixel_row, pixel_col) of the cell origin


@dataclass
class Montage:
    image: np.ndarray  # float32, (rows*tile_h, cols*tile_w)
    placements: list


def load_manifest(path) -> list:
    """Read stage positions from JSON, resolving tile paths against the manifest."""
    try:
        with open(path) as fh:
            rows = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IoFailure(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(rows, list):
        raise IoFailure(f"{path}: manifest must be a JSON array")
    base = os.path.dirname(os.path.abspath(path))
    positions = []
    for i, row in enumerate(rows):
        try:
            tile = row["tile"]
            x_um = float(row["x_um"])
            y_um = float(row["y_um"])
        except (TypeError, KeyError, ValueError) as exc:
            raise IoFailure(f"{path}: entry {i} is not a stage position: {exc}") from exc
        if not os.path.isabs(tile):
            tile = os.path.join(base, tile)
        positions.append(StagePosition(tile, x_um, y_um))
    return positions


def assign_grid_cells(positions, rows: int, cols: int) -> dict:
    """Map each stage position to its (row, col) grid cell.

    Tiles are sorted by stage y into row bands (ties broken by x), filling
    each band with up to `cols` tiles, then sorted by x within a band to get
    the column. With jitter below half the lattice spacing this recovers the
    acquisition lattice exactly.
    """
    if rows < 1 or cols < 1 or rows > MAX_GRID or cols > MAX_GRID:
        raise ValueError(f"rows and cols must be in [1, {MAX_GRID}]")
    if len(positions) > rows * cols:
        raise TooManyTiles(f"{len(positions)} tiles exceed a {rows}x{cols} grid")
    seen = {}
    for pos in positions:
        if not (math.isfinite(pos.x_um) and math.isfinite(pos.y_um)):
            raise ValueError(f"non-finite stage coordinates for {pos.tile_path}")
        key = (pos.x_um, pos.y_um)
        if key in seen:
            raise DuplicatePosition(
                f"{pos.tile_path} and {seen[key].tile_path} share stage position {key}"
            )
        seen[key] = pos

    by_y = sorted(positions, key=lambda p: (p.y_um, p.x_um))
    cells = {}
    for band_index in range(0, len(by_y), cols):
        band = sorted(by_y[band_index : band_index + cols], key=lambda p: (p.x_um, p.y_um))
        for col, pos in enumerate(band):
            cells[pos] = (band_index // cols, col)
    return cells


def load_tile(path) -> np.ndarray:
    """Load one tile as raw float32 intensities (first section for MRC stacks)."""
    if not os.path.exists(path):
        raise MissingTileFile(path)
    if str(path).lower().endswith((".mrc", ".map", ".mrcs")):
        return mrc_io.read_mrc(path).data[0]
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    arr = arr.astype(np.float32)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    if arr.max() > 1.0:
        arr = arr / (65535.0 if arr.max() > 255.0 else 255.0)
    return arr


def compose(tiles: dict, rows: int, cols: int, names: dict | None = None) -> Montage:
    """Place tile arrays keyed by (row, col); unfilled cells stay zero."""
    shapes = {arr.shape for arr in tiles.values()}
    if len(shapes) > 1:
        raise MixedTileSizes(f"tile shapes differ: {sorted(shapes)}")
    if not tiles:
        raise ValueError("no tiles to compose")
    tile_h, tile_w = next(iter(shapes))
    image = np.zeros((rows * tile_h, cols * tile_w), dtype=np.float32)
    placements = []
    for r in range(rows):
        for c in range(cols):
            offset = (r * tile_h, c * tile_w)
            if (r, c) in tiles:
                image[offset[0] : offset[0] + tile_h, offset[1] : offset[1] + tile_w] = tiles[(r, c)]
                name = names.get((r, c)) if names else None
                placements.append(Placement(name, r, c, offset))
            else:
                placements.append(Placement(None, r, c, offset))
    return Montage(image, placements)


def stitch(positions, rows: int = 5, cols: int = 5) -> Montage:
    """Assign cells, load every tile and abut them into one image."""
    cells = assign_grid_cells(positions, rows, cols)
    tiles = {}
    names = {}
    for pos, cell in cells.items():
        tiles[cell] = load_tile(pos.tile_path).astype(np.float32)
        names[cell] = pos.tile_path
    return compose(tiles, rows, cols, names)


def export_montage(montage: Montage, path) -> None:
    """Write the montage image as mode-2 MRC or 16-bit PNG, by extension."""
    text = str(path).lower()
    if text.endswith((".mrc", ".map")):
        mrc_io.write_mrc(mrc_io.MrcVolume.from_array(montage.image), path, mode=2)
        return
    if not text.endswith(".png"):
        raise ValueError(f"unsupported montage format: {path}")
    img = montage.image
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    as16 = (scaled * 65535.0).round().astype(np.uint16)
    try:
        Image.fromarray(as16).save(path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def placements_as_json(montage: Montage) -> list:
    return [
        {"tile": p.tile, "row": p.row, "col": p.col, "offset": list(p.offset)}
        for p in montage.placements
    ]
