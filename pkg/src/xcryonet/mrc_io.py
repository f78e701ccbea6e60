"""MRC/CCP4-2014 volume reader and writer.

The format is a 1024 byte header followed by an optional extended header
(NSYMBT bytes, preserved opaquely) and the voxel block. Only the fields
this pipeline relies on are parsed; everything is round-tripped through a
canonical writer so that write(read(f)) is byte-identical for files this
module produced itself.

Header words used here (1-based word numbering, 4 bytes per word):

    1-3    NX NY NZ        voxel counts (column, row, section)
    4      MODE            0=int8 1=int16 2=float32 6=uint16
    5-7    NXSTART...      grid start offsets
    8-10   MX MY MZ        sampling grid size
    11-13  CELLA           cell dimensions in Angstrom
    20-22  DMIN DMAX DMEAN density statistics
    24     NSYMBT          extended header size in bytes
    53     MAP             magic, must be b"MAP "
    54     MACHST          machine stamp, first byte 0x44 little / 0x11 big
    55     RMS             density rms deviation

Data is returned as canonical float32 without rescaling.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMachineStamp,
    BadMagic,
    IndexOutOfRange,
    IoFailure,
    TruncatedFile,
    UnsupportedMode,
    ValueOutOfRange,
)

HEADER_BYTES = 1024

MODE_DTYPES = {
    0: np.dtype(np.int8),
    1: np.dtype(np.int16),
    2: np.dtype(np.float32),
    6: np.dtype(np.uint16),
}

_INT_BOUNDS = {0: (-128, 127), 1: (-32768, 32767), 6: (0, 65535)}

STAMP_LITTLE = b"\x44\x44\x00\x00"
STAMP_BIG = b"\x11\x11\x00\x00"


@dataclass(frozen=True)
class MrcHeader:
    nx: int
    ny: int
    nz: int
    mode: int
    nxstart: int = 0
    nystart: int = 0
    nzstart: int = 0
    mx: int = 1
    my: int = 1
    mz: int = 1
    cell_dims: tuple = (1.0, 1.0, 1.0)
    map_id: bytes = b"MAP "
    machine_stamp: bytes = STAMP_LITTLE
    nsymbt: int = 0
    dmin: float = 0.0
    dmax: float = 0.0
    dmean: float = 0.0

    @property
    def byte_order(self) -> str:
        """struct byte-order character implied by the machine stamp."""
        return _stamp_to_order(self.machine_stamp)


@dataclass
class MrcVolume:
    header: MrcHeader
    data: np.ndarray  # float32, shape (nz, ny, nx)
    extended: bytes = b""

    @classmethod
    def from_array(cls, data, cell_dims=None) -> "MrcVolume":
        """Wrap a 2D or 3D array as a mode-2 volume with a fresh header."""
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.ndim != 3:
            raise ValueError("expected a 2D or 3D array")
        nz, ny, nx = arr.shape
        if cell_dims is None:
            cell_dims = (float(nx), float(ny), float(nz))
        header = MrcHeader(
            nx=nx, ny=ny, nz=nz, mode=2,
            mx=nx, my=ny, mz=nz,
            cell_dims=tuple(float(c) for c in cell_dims),
            dmin=float(arr.min()), dmax=float(arr.max()),
            dmean=float(arr.astype(np.float64).mean()),
        )
        return cls(header, np.ascontiguousarray(arr))


def _stamp_to_order(stamp: bytes) -> str:
    if len(stamp) != 4:
        raise BadMachineStamp(f"machine stamp must be 4 bytes, got {len(stamp)}")
    # 0x44 0x44 is canonical little-endian; 0x44 0x41 appears in the wild.
    if stamp[0] == 0x44 and stamp[1] in (0x44, 0x41):
        return "<"
    if stamp[0] == 0x11 and stamp[1] == 0x11:
        return ">"
    raise BadMachineStamp(f"unrecognized machine stamp {stamp!r}")


def read_mrc(path) -> MrcVolume:
    """Read an MRC file, validating structure before touching voxel data.

    Raises TruncatedFile, BadMagic, BadMachineStamp, UnsupportedMode or
    IoFailure. The returned volume holds float32 data of shape (nz, ny, nx)
    and the extended header as opaque bytes.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    if len(raw) < HEADER_BYTES:
        raise TruncatedFile(
            f"{path}: file is {len(raw)} bytes, smaller than the 1024 byte header"
        )

    map_id = raw[208:212]
    if map_id != b"MAP ":
        raise BadMagic(f"{path}: bytes 208-211 are {map_id!r}, expected b'MAP '")
    stamp = raw[212:216]
    order = _stamp_to_order(stamp)

    nx, ny, nz, mode, nxstart, nystart, nzstart, mx, my, mz = struct.unpack(
        order + "10i", raw[0:40]
    )
    cell_dims = struct.unpack(order + "3f", raw[40:52])
    dmin, dmax, dmean = struct.unpack(order + "3f", raw[76:88])
    (nsymbt,) = struct.unpack(order + "i", raw[92:96])

    if mode not in MODE_DTYPES:
        raise UnsupportedMode(f"{path}: mode {mode} not in {sorted(MODE_DTYPES)}")
    if min(nx, ny, nz) <= 0:
        raise TruncatedFile(f"{path}: non-positive dimensions ({nx}, {ny}, {nz})")
    if nsymbt < 0:
        raise TruncatedFile(f"{path}: negative extended header size {nsymbt}")

    dtype = MODE_DTYPES[mode].newbyteorder(order)
    nvox = nx * ny * nz
    expected = HEADER_BYTES + nsymbt + nvox * dtype.itemsize
    if len(raw) != expected:
        raise TruncatedFile(
            f"{path}: file is {len(raw)} bytes but the header implies {expected}"
        )

    extended = raw[HEADER_BYTES : HEADER_BYTES + nsymbt]
    flat = np.frombuffer(raw, dtype=dtype, count=nvox, offset=HEADER_BYTES + nsymbt)
    data = np.ascontiguousarray(flat.astype(np.float32).reshape(nz, ny, nx))
    if not np.all(np.isfinite(data)):
        raise IoFailure(f"{path}: volume contains non-finite values")

    header = MrcHeader(
        nx=nx, ny=ny, nz=nz, mode=mode,
        nxstart=nxstart, nystart=nystart, nzstart=nzstart,
        mx=mx, my=my, mz=mz,
        cell_dims=tuple(float(c) for c in cell_dims),
        map_id=map_id, machine_stamp=stamp, nsymbt=nsymbt,
        dmin=float(dmin), dmax=float(dmax), dmean=float(dmean),
    )
    return MrcVolume(header, data, extended)


def _quantize(data: np.ndarray, mode: int) -> np.ndarray:
    """Convert canonical float32 data to the storage dtype for `mode`."""
    if mode == 2:
        return data.astype(np.float32, copy=False)
    lo, hi = _INT_BOUNDS[mode]
    q = np.rint(data)
    qmin, qmax = float(q.min()), float(q.max())
    if qmin < lo or qmax > hi:
        raise ValueOutOfRange(
            f"data range [{qmin}, {qmax}] does not fit mode {mode} bounds [{lo}, {hi}]"
        )
    return q.astype(MODE_DTYPES[mode])


def write_mrc(volume: MrcVolume, path, mode: int = 2, byte_order: str = "little") -> None:
    """Write a volume in the given mode, recomputing density statistics.

    Integer modes round to nearest and raise ValueOutOfRange on overflow.
    The header is emitted canonically: unused words are zero, so a file
    written here and read back re-serializes byte-identically.
    """
    if mode not in MODE_DTYPES:
        raise UnsupportedMode(f"mode {mode} not in {sorted(MODE_DTYPES)}")
    if byte_order not in ("little", "big"):
        raise ValueError("byte_order must be 'little' or 'big'")
    order = "<" if byte_order == "little" else ">"
    stamp = STAMP_LITTLE if byte_order == "little" else STAMP_BIG

    data = np.ascontiguousarray(volume.data, dtype=np.float32)
    if data.ndim != 3:
        raise ValueError("volume data must be 3D (nz, ny, nx)")
    stored = _quantize(data, mode)
    nz, ny, nx = data.shape

    as64 = stored.astype(np.float64)
    dmin, dmax = float(as64.min()), float(as64.max())
    dmean, rms = float(as64.mean()), float(as64.std())

    h = volume.header
    header = bytearray(HEADER_BYTES)
    struct.pack_into(
        order + "10i", header, 0,
        nx, ny, nz, mode,
        h.nxstart, h.nystart, h.nzstart,
        h.mx, h.my, h.mz,
    )
    struct.pack_into(order + "3f", header, 40, *(float(c) for c in h.cell_dims))
    struct.pack_into(order + "3f", header, 52, 90.0, 90.0, 90.0)  # cell angles
    struct.pack_into(order + "3i", header, 64, 1, 2, 3)  # axis order
    struct.pack_into(order + "3f", header, 76, dmin, dmax, dmean)
    struct.pack_into(order + "i", header, 92, len(volume.extended))
    header[208:212] = b"MAP "
    header[212:216] = stamp
    struct.pack_into(order + "f", header, 216, rms)

    out_dtype = stored.dtype.newbyteorder(order)
    payload = stored.astype(out_dtype, copy=False).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(bytes(header))
            fh.write(volume.extended)
            fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def tile_slice(volume: MrcVolume, z: int) -> np.ndarray:
    """Return section z min-max normalized to [0, 1] (constant slice -> zeros)."""
    nz = volume.data.shape[0]
    if not 0 <= z < nz:
        raise IndexOutOfRange(f"section {z} outside [0, {nz})")
    plane = volume.data[z]
    lo = float(plane.min())
    hi = float(plane.max())
    if hi == lo:
        return np.zeros_like(plane)
    return ((plane - lo) / (hi - lo)).astype(np.float32)
