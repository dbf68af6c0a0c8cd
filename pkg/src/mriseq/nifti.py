"""Single-volume container I/O in a gzip-compressed NIfTI-1-compatible layout.

Files written here follow the single-file NIfTI-1 convention: a 348-byte
header, a 4-byte extension flag (zero), then the voxel payload at byte
offset 352 in Fortran order (x fastest). Written files always carry magic
``n+1``, an sform affine (code 1) that is a pure scaling plus translation
in canonical RAS axes, and a gzip stream with mtime forced to 0 so output
bytes are reproducible.

The reader accepts the wider format: either byte order, sform or qform
(quaternion) orientation, the common scalar datatypes, scl slope/inter
rescaling, and plain uncompressed ``.nii`` files.
"""

from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np

from .errors import Not3DError, UnreadableFileError
from .volume import SeriesVolume, canonicalize

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
    768: np.dtype(np.uint32),
}
_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.float32): 16,
          np.dtype(np.float64): 64}


def _build_header(dims, pixdim, affine, datatype_code, bitpix) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    ndim = len(dims)
    dim = [ndim] + list(dims) + [1] * (7 - ndim)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, datatype_code)
    struct.pack_into("<h", hdr, 72, bitpix)
    pd = [1.0] + list(pixdim) + [1.0] * (7 - len(pixdim))
    struct.pack_into("<8f", hdr, 76, *pd)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<h", hdr, 252, 0)    # qform_code
    struct.pack_into("<h", hdr, 254, 1)    # sform_code
    struct.pack_into("<4f", hdr, 280, *affine[0])
    struct.pack_into("<4f", hdr, 296, *affine[1])
    struct.pack_into("<4f", hdr, 312, *affine[2])
    hdr[344:348] = MAGIC
    return bytes(hdr)


def write_volume(path, volume: SeriesVolume, dtype=np.float32) -> Path:
    """Write a canonical volume; gzip-compressed when path ends in .gz."""
    path = Path(path)
    dtype = np.dtype(dtype)
    if dtype not in _CODES:
        raise ValueError(f"unsupported write dtype {dtype}")
    data = np.asarray(volume.voxels, dtype=dtype)
    aff = volume.affine()
    affine_rows = [aff[i, :].tolist() for i in range(3)]
    header = _build_header(
        data.shape, volume.spacing, affine_rows, _CODES[dtype], dtype.itemsize * 8
    )
    payload = header + b"\x00\x00\x00\x00" + data.tobytes(order="F")
    tmp = path.with_name(path.name + ".tmp")
    if path.name.endswith(".gz"):
        with open(tmp, "wb") as fh:
            with gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        tmp.write_bytes(payload)
    os.replace(tmp, path)
    return path


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            head = fh.read(2)
            fh.seek(0)
            if head == b"\x1f\x8b":
                with gzip.GzipFile(fileobj=fh) as gz:
                    return gz.read()
            return fh.read()
    except OSError as exc:
        raise UnreadableFileError(f"{path}: {exc}") from exc


def read_volume(path) -> SeriesVolume:
    """Read a volume file and return it reoriented to canonical axes.

    Raises UnreadableFileError for anything that does not parse, and
    Not3DError when the payload is not 3D after squeezing singleton dims.
    """
    try:
        raw = _read_bytes(path)
    except (OSError, EOFError, gzip.BadGzipFile) as exc:
        raise UnreadableFileError(f"{path}: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise UnreadableFileError(f"{path}: shorter than a NIfTI-1 header")

    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr == HEADER_SIZE:
        bo = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
        bo = ">"
    else:
        raise UnreadableFileError(f"{path}: bad sizeof_hdr, not a NIfTI-1 file")
    if raw[344:347] != b"n+1"[:3]:
        raise UnreadableFileError(f"{path}: unsupported magic {raw[344:348]!r}")

    dim = struct.unpack_from(bo + "8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise UnreadableFileError(f"{path}: invalid dim[0]={ndim}")
    dims = [max(1, d) for d in dim[1 : 1 + ndim]]
    (datatype_code,) = struct.unpack_from(bo + "h", raw, 70)
    dt = _DTYPES.get(datatype_code)
    if dt is None:
        raise UnreadableFileError(f"{path}: unsupported datatype code {datatype_code}")
    dt = dt.newbyteorder(bo)
    pixdim = struct.unpack_from(bo + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(bo + "f", raw, 108)
    vox_offset = int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET
    scl_slope, scl_inter = struct.unpack_from(bo + "2f", raw, 112)

    count = int(np.prod(dims))
    end = vox_offset + count * dt.itemsize
    if len(raw) < end:
        raise UnreadableFileError(f"{path}: truncated voxel payload")
    data = np.frombuffer(raw, dtype=dt, count=count, offset=vox_offset)
    data = data.reshape(dims, order="F")

    data = np.squeeze(data)
    if data.ndim != 3:
        raise Not3DError(f"{path}: volume rank is {data.ndim} after squeezing, expected 3")
    data = np.ascontiguousarray(data, dtype=np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data * np.float32(slope) + np.float32(scl_inter)

    affine = _affine_from_header(raw, bo, pixdim)
    try:
        return canonicalize(data, affine)
    except ValueError as exc:
        raise UnreadableFileError(f"{path}: {exc}") from exc


def _affine_from_header(raw: bytes, bo: str, pixdim) -> np.ndarray:
    (qform_code,) = struct.unpack_from(bo + "h", raw, 252)
    (sform_code,) = struct.unpack_from(bo + "h", raw, 254)
    affine = np.eye(4)
    if sform_code > 0:
        affine[0, :] = struct.unpack_from(bo + "4f", raw, 280)
        affine[1, :] = struct.unpack_from(bo + "4f", raw, 296)
        affine[2, :] = struct.unpack_from(bo + "4f", raw, 312)
        return affine
    if qform_code > 0:
        b, c, d = struct.unpack_from(bo + "3f", raw, 256)
        qx, qy, qz = struct.unpack_from(bo + "3f", raw, 268)
        a_sq = 1.0 - (b * b + c * c + d * d)
        a = float(np.sqrt(max(0.0, a_sq)))
        rot = np.array(
            [
                [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
                [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
                [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
            ]
        )
        qfac = -1.0 if pixdim[0] == -1.0 else 1.0
        scale = np.diag([pixdim[1], pixdim[2], qfac * pixdim[3]])
        affine[:3, :3] = rot @ scale
        affine[:3, 3] = (qx, qy, qz)
        return affine
    affine[:3, :3] = np.diag([abs(pixdim[1]) or 1.0, abs(pixdim[2]) or 1.0, abs(pixdim[3]) or 1.0])
    return affine
