"""Binary PGM (P5) and PPM (P6) readers/writers, maxval 255.

The writers emit a fixed header layout (``P5\\n<w> <h>\\n255\\n`` plus
raster) so outputs are byte-reproducible; the readers accept any
legal whitespace and ``#`` comments.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DataError


def _read_header(data: bytes, path: str, magic: bytes) -> tuple[int, int, int, int]:
    if not data.startswith(magic):
        raise DataError(f"{path}: expected {magic.decode()} magic, "
                        f"got {data[:2]!r}")
    pos = len(magic)
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise DataError(f"{path}: malformed header token {token!r}")
        fields.append(int(token))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise DataError(f"{path}: header not terminated by whitespace")
    pos += 1  # single whitespace byte separates header from raster
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    if width < 1 or height < 1:
        raise DataError(f"{path}: invalid dimensions {width}x{height}")
    return width, height, maxval, pos


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM into a (H, W) uint8 array."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    width, height, _, pos = _read_header(data, path, b"P5")
    raster = data[pos:pos + width * height]
    if len(raster) != width * height:
        raise DataError(f"{path}: raster has {len(raster)} bytes, "
                        f"expected {width * height}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PPM into a (H, W, 3) uint8 array."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    width, height, _, pos = _read_header(data, path, b"P6")
    n = width * height * 3
    raster = data[pos:pos + n]
    if len(raster) != n:
        raise DataError(f"{path}: raster has {len(raster)} bytes, expected {n}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def _to_u8(values: np.ndarray) -> np.ndarray:
    if values.dtype == np.uint8:
        return values
    arr = np.asarray(values, dtype=np.float64)
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path: str | os.PathLike, values: np.ndarray) -> None:
    """Write a (H, W) array as binary PGM. Float input is taken as
    [0, 1] and quantized; uint8 passes through unchanged."""
    arr = _to_u8(values)
    if arr.ndim != 2:
        raise DataError(f"write_pgm needs a 2-D array, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())


def write_ppm(path: str | os.PathLike, values: np.ndarray) -> None:
    """Write a (H, W, 3) array as binary PPM (same quantization rule)."""
    arr = _to_u8(values)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"write_ppm needs a (H, W, 3) array, got shape {arr.shape}")
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())
