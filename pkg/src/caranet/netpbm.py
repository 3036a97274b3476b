"""Binary netpbm I/O: 8-bit P5 (grayscale) and P6 (color), maxval 255 only.

Round trips are bit-exact: reads scale to [0,1] by /255, writes quantize with
round-half-up. Header comments (#) are honored; anything else malformed is a
FormatError, never a crash.
"""

from __future__ import annotations

import numpy as np

__all__ = ["FormatError", "read_pnm", "read_image", "read_mask", "write_image"]

_MAXVAL = 255


class FormatError(ValueError):
    """Malformed or unsupported netpbm data."""


def _parse_header(data: bytes) -> tuple[bytes, int, int, int]:
    if len(data) < 2:
        raise FormatError("file too short for a netpbm magic")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r} (binary P5/P6 only)")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        # skip whitespace and comment lines
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        token = data[start:pos]
        if not token:
            raise FormatError("truncated header")
        try:
            fields.append(int(token))
        except ValueError:
            raise FormatError(f"non-numeric header token {token!r}") from None
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after maxval")
    pos += 1
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError(f"non-positive extent {width}x{height}")
    if maxval != _MAXVAL:
        raise FormatError(f"unsupported maxval {maxval} (must be {_MAXVAL})")
    return magic, width, height, pos


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file to uint8, shape (H, W) or (H, W, 3)."""
    with open(path, "rb") as f:
        data = f.read()
    magic, width, height, pos = _parse_header(data)
    channels = 1 if magic == b"P5" else 3
    count = width * height * channels
    payload = data[pos:pos + count]
    if len(payload) != count or len(data) > pos + count:
        raise FormatError(f"payload size mismatch (want {count} bytes, have {len(data) - pos})")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((height, width) if channels == 1 else (height, width, 3))


def read_image(path) -> np.ndarray:
    """Read an image to float32 (3, H, W) in [0,1]; grayscale is replicated."""
    raw = read_pnm(path)
    if raw.ndim == 2:
        raw = np.stack([raw] * 3, axis=-1)
    return (raw.astype(np.float32) / _MAXVAL).transpose(2, 0, 1)


def read_mask(path) -> np.ndarray:
    """Read a grayscale mask to float32 (1, H, W), binarized at 128."""
    raw = read_pnm(path)
    if raw.ndim != 2:
        raise FormatError("masks must be grayscale (P5)")
    return (raw >= 128).astype(np.float32)[None]


def write_image(arr: np.ndarray, path) -> None:
    """Write float (C, H, W) values in [0,1] as P5 (C=1) or P6 (C=3)."""
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"write_image expects (1|3, H, W), got {arr.shape}")
    qt = np.floor(np.clip(arr, 0.0, 1.0) * _MAXVAL + 0.5).astype(np.uint8)
    c, h, w = qt.shape
    magic = b"P5" if c == 1 else b"P6"
    payload = qt[0] if c == 1 else qt.transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n%d\n" % (w, h, _MAXVAL))
        f.write(np.ascontiguousarray(payload).tobytes())


def image_bytes(arr: np.ndarray) -> bytes:
    """The exact bytes write_image would produce (used for change detection)."""
    qt = np.floor(np.clip(arr, 0.0, 1.0) * _MAXVAL + 0.5).astype(np.uint8)
    c, h, w = qt.shape
    magic = b"P5" if c == 1 else b"P6"
    payload = qt[0] if c == 1 else qt.transpose(1, 2, 0)
    return magic + b"\n%d %d\n%d\n" % (w, h, _MAXVAL) + np.ascontiguousarray(payload).tobytes()
