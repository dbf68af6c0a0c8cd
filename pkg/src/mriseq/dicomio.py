"""Minimal DICOM part-10 reader for MRI slice files.

Reads the subset this pipeline needs: part-10 files (128-byte preamble +
``DICM``), explicit or implicit VR little endian transfer syntaxes, with
native (uncompressed) single-frame pixel data. Sequences are skipped, not
descended. Anything outside that envelope raises UnreadableFileError
rather than guessing.

Decoded attributes are exposed under normalized snake_case names in
``SliceRecord.fields``; raw pixel values stay untouched (rescale slope
and intercept are applied later by the series assembler).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import UnreadableFileError

TS_IMPLICIT_LE = "1.2.840.10008.1.2"
TS_EXPLICIT_LE = "1.2.840.10008.1.2.1"

_TEXT_VRS = {"AE", "AS", "CS", "DA", "DT", "LO", "LT", "PN", "SH", "ST", "TM", "UC", "UI", "UR", "UT"}
_LONG_VRS = {"OB", "OW", "OF", "OD", "OL", "SQ", "UT", "UC", "UR", "UN"}

# tag -> (field name, VR assumed under implicit syntax)
TAG_MAP = {
    (0x0008, 0x0060): ("modality", "CS"),
    (0x0008, 0x103E): ("series_description", "LO"),
    (0x0008, 0x1090): ("scanner_model", "LO"),
    (0x0010, 0x0020): ("patient_id", "LO"),
    (0x0018, 0x0015): ("body_part_examined", "CS"),
    (0x0018, 0x0050): ("slice_thickness", "DS"),
    (0x0018, 0x0080): ("repetition_time_ms", "DS"),
    (0x0018, 0x0081): ("echo_time_ms", "DS"),
    (0x0018, 0x0088): ("spacing_between_slices", "DS"),
    (0x0018, 0x1030): ("protocol_name", "LO"),
    (0x0018, 0x9087): ("diffusion_b_value", "FD"),
    (0x0019, 0x0010): ("private_creator_0019", "LO"),
    (0x0019, 0x100C): ("siemens_b_value", "IS"),
    (0x0020, 0x000D): ("study_uid", "UI"),
    (0x0020, 0x000E): ("series_uid", "UI"),
    (0x0020, 0x0013): ("instance_number", "IS"),
    (0x0020, 0x0032): ("image_position", "DS"),
    (0x0020, 0x0037): ("image_orientation", "DS"),
    (0x0028, 0x0008): ("number_of_frames", "IS"),
    (0x0028, 0x0010): ("rows", "US"),
    (0x0028, 0x0011): ("columns", "US"),
    (0x0028, 0x0030): ("pixel_spacing", "DS"),
    (0x0028, 0x0100): ("bits_allocated", "US"),
    (0x0028, 0x0103): ("pixel_representation", "US"),
    (0x0028, 0x1052): ("rescale_intercept", "DS"),
    (0x0028, 0x1053): ("rescale_slope", "DS"),
    (0x0040, 0x0254): ("procedure_step_description", "LO"),
    (0x0043, 0x0010): ("private_creator_0043", "LO"),
    (0x0043, 0x1039): ("ge_b_value", "DS"),
}
PIXEL_DATA_TAG = (0x7FE0, 0x0010)


@dataclass
class SliceRecord:
    """One decoded slice: normalized header fields plus the raw pixel grid."""

    fields: dict
    pixels: np.ndarray | None = None
    path: str | None = None

    def get(self, name, default=None):
        return self.fields.get(name, default)


def is_dicom_file(path) -> bool:
    try:
        with open(path, "rb") as fh:
            head = fh.read(132)
    except OSError:
        return False
    return len(head) == 132 and head[128:132] == b"DICM"


def read_slice(path) -> SliceRecord:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise UnreadableFileError(f"{path}: {exc}") from exc
    record = parse_slice_bytes(data)
    record.path = str(path)
    return record


def parse_slice_bytes(data: bytes) -> SliceRecord:
    if len(data) < 132 or data[128:132] != b"DICM":
        raise UnreadableFileError("missing part-10 preamble / DICM marker")
    pos = 132
    meta, pos = _parse_meta(data, pos)
    ts = meta.get((0x0002, 0x0010), TS_EXPLICIT_LE)
    if ts == TS_EXPLICIT_LE:
        implicit = False
    elif ts == TS_IMPLICIT_LE:
        implicit = True
    else:
        raise UnreadableFileError(f"unsupported transfer syntax '{ts}'")

    fields: dict = {}
    pixel_bytes = None
    while pos < len(data):
        try:
            tag, vr, value, pos = _read_element(data, pos, implicit)
        except struct.error as exc:
            raise UnreadableFileError(f"truncated element near byte {pos}") from exc
        if tag == PIXEL_DATA_TAG:
            if value is None:
                raise UnreadableFileError("encapsulated (compressed) pixel data not supported")
            pixel_bytes = value
            break
        entry = TAG_MAP.get(tag)
        if entry is None or value is None:
            continue
        name, default_vr = entry
        use_vr = default_vr if (implicit or vr == "UN") else vr
        decoded = _decode(value, use_vr)
        if decoded is not None:
            fields[name] = decoded

    pixels = _decode_pixels(fields, pixel_bytes)
    return SliceRecord(fields=fields, pixels=pixels)


def _parse_meta(data: bytes, pos: int):
    """File meta group (0002): always explicit VR little endian."""
    meta = {}
    end = None
    while pos + 8 <= len(data):
        group, elem = struct.unpack_from("<HH", data, pos)
        if group != 0x0002:
            break
        tag, vr, value, pos = _read_element(data, pos, implicit=False)
        if tag == (0x0002, 0x0000) and value is not None and len(value) == 4:
            (glen,) = struct.unpack("<I", value)
            end = pos + glen
        elif value is not None:
            meta[tag] = _decode(value, vr or "UI")
        if end is not None and pos >= end:
            break
    return meta, pos


def _read_element(data: bytes, pos: int, implicit: bool):
    group, elem = struct.unpack_from("<HH", data, pos)
    pos += 4
    if implicit:
        vr = None
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
    else:
        vr = data[pos : pos + 2].decode("ascii", "replace")
        pos += 2
        if vr in _LONG_VRS:
            pos += 2  # reserved
            (length,) = struct.unpack_from("<I", data, pos)
            pos += 4
        else:
            (length,) = struct.unpack_from("<H", data, pos)
            pos += 2
    if length == 0xFFFFFFFF:
        # undefined length: a sequence (or encapsulated pixel data); skip it
        return (group, elem), vr, None, _skip_sequence(data, pos, implicit)
    value = data[pos : pos + length]
    if len(value) != length:
        raise UnreadableFileError("element value extends past end of file")
    pos += length
    if vr == "SQ":
        # defined-length sequence: contents are not needed, drop the value
        return (group, elem), vr, None, pos
    return (group, elem), vr, value, pos


def _skip_sequence(data: bytes, pos: int, implicit: bool) -> int:
    """Skip items until the sequence delimiter (FFFE,E0DD)."""
    while pos + 8 <= len(data):
        group, elem = struct.unpack_from("<HH", data, pos)
        (length,) = struct.unpack_from("<I", data, pos + 4)
        pos += 8
        if (group, elem) == (0xFFFE, 0xE0DD):
            return pos
        if (group, elem) != (0xFFFE, 0xE000):
            raise UnreadableFileError("malformed sequence item tag")
        if length == 0xFFFFFFFF:
            pos = _skip_item(data, pos, implicit)
        else:
            pos += length
    raise UnreadableFileError("unterminated sequence")


def _skip_item(data: bytes, pos: int, implicit: bool) -> int:
    """Skip elements until the item delimiter (FFFE,E00D)."""
    while pos + 8 <= len(data):
        group, elem = struct.unpack_from("<HH", data, pos)
        if (group, elem) == (0xFFFE, 0xE00D):
            return pos + 8
        _, _, _, pos = _read_element(data, pos, implicit)
    raise UnreadableFileError("unterminated sequence item")


def _decode(value: bytes, vr: str):
    if vr in _TEXT_VRS:
        text = value.decode("latin-1", "replace").strip("\x00 ").strip()
        return text if text else None
    try:
        if vr == "DS":
            parts = [float(p) for p in value.decode("latin-1").split("\\") if p.strip()]
        elif vr == "IS":
            parts = [int(p) for p in value.decode("latin-1").split("\\") if p.strip()]
        elif vr == "US":
            parts = list(struct.unpack(f"<{len(value) // 2}H", value))
        elif vr == "SS":
            parts = list(struct.unpack(f"<{len(value) // 2}h", value))
        elif vr == "UL":
            parts = list(struct.unpack(f"<{len(value) // 4}I", value))
        elif vr == "SL":
            parts = list(struct.unpack(f"<{len(value) // 4}i", value))
        elif vr == "FL":
            parts = list(struct.unpack(f"<{len(value) // 4}f", value))
        elif vr == "FD":
            parts = list(struct.unpack(f"<{len(value) // 8}d", value))
        else:
            return None
    except (ValueError, struct.error):
        return None
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else parts


def _decode_pixels(fields: dict, pixel_bytes: bytes | None) -> np.ndarray | None:
    if pixel_bytes is None:
        return None
    rows = fields.get("rows")
    cols = fields.get("columns")
    bits = fields.get("bits_allocated", 16)
    signed = fields.get("pixel_representation", 0) == 1
    frames = int(fields.get("number_of_frames", 1) or 1)
    if rows is None or cols is None:
        raise UnreadableFileError("pixel data present without Rows/Columns")
    if frames != 1:
        raise UnreadableFileError("multi-frame pixel data not supported")
    if bits == 8:
        dtype = np.int8 if signed else np.uint8
    elif bits == 16:
        dtype = np.int16 if signed else np.uint16
    else:
        raise UnreadableFileError(f"unsupported BitsAllocated={bits}")
    count = int(rows) * int(cols)
    if len(pixel_bytes) < count * np.dtype(dtype).itemsize:
        raise UnreadableFileError("pixel data shorter than Rows*Columns")
    arr = np.frombuffer(pixel_bytes, dtype=dtype, count=count)
    return arr.reshape(int(rows), int(cols))
