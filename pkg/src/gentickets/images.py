"""Binary PGM/PPM image grids for eyeballing samples."""

from pathlib import Path

import numpy as np

from .data import unit_to_bytes
from .errors import ContractError, FormatError

SEPARATOR = 255


def grid_bytes(images, columns):
    """Tile ``[n, C, H, W]`` images in [-1, 1] into a ``(rows, cols, C)`` uint8 canvas.

    Tiles are separated by 1-pixel lines of value 255; there is no outer
    border.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4 or len(x) == 0:
        raise ContractError(f"need a non-empty [n, C, H, W] batch, got shape {x.shape}")
    n, c, h, w = x.shape
    if c not in (1, 3):
        raise ContractError(f"images must have 1 or 3 channels, got {c}")
    if columns < 1:
        raise ContractError("columns must be >= 1")
    cols = min(columns, n)
    rows = -(-n // cols)
    canvas = np.full((rows * (h + 1) - 1, cols * (w + 1) - 1, c), SEPARATOR, np.uint8)
    tiles = unit_to_bytes(x).transpose(0, 2, 3, 1)
    for i in range(n):
        r, q = divmod(i, cols)
        canvas[r * (h + 1):r * (h + 1) + h, q * (w + 1):q * (w + 1) + w] = tiles[i]
    return canvas


def emit_image_grid(images, columns, path):
    """Write a P5 (grayscale) or P6 (colour) grid; returns the path."""
    canvas = grid_bytes(images, columns)
    height, width, c = canvas.shape
    magic = b"P5" if c == 1 else b"P6"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(magic + f"\n{width} {height}\n255\n".encode("ascii") + canvas.tobytes())
    return path


def read_pnm(path):
    """Parse a binary PGM/PPM written by :func:`emit_image_grid`; returns ``(H, W, C)`` uint8."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("PNM header truncated", offset=pos)
        fields.append(raw[start:pos])
    magic, width, height, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise FormatError(f"unsupported PNM header {magic!r} maxval {maxval}", offset=0)
    c = 1 if magic == b"P5" else 3
    pos += 1
    data = raw[pos:]
    if len(data) != width * height * c:
        raise FormatError(f"PNM payload has {len(data)} bytes, expected {width * height * c}", offset=pos)
    return np.frombuffer(data, np.uint8).reshape(height, width, c)
