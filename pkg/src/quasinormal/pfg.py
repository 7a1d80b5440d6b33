"""Portable Float Grid (PFG) reader/writer.

Layout::

    PFG1
    dims: d n1 n2 [n3]
    spacing: s1 s2 [s3]
    channels: c
    <blank line>
    c * prod(n) little-endian float32, x-fastest, channel-major

2D 8-bit PGM files are accepted on input and rescaled to [0, 1].
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import ParseFailure
from .grid import Grid, VectorField

MAGIC = "PFG1"


def _header(dims, spacing, channels):
    return (
        f"{MAGIC}\n"
        f"dims: {len(dims)} {' '.join(str(int(n)) for n in dims)}\n"
        f"spacing: {' '.join(repr(float(s)) for s in spacing)}\n"
        f"channels: {channels}\n\n"
    ).encode("ascii")


def write_array(path, arr, spacing):
    """Write ``arr`` of shape ``(c, *dims)`` atomically."""
    arr = np.asarray(arr)
    dims = arr.shape[1:]
    payload = b"".join(
        np.asarray(ch, dtype="<f4").ravel(order="F").tobytes() for ch in arr
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_header(dims, spacing, arr.shape[0]))
        fh.write(payload)
    os.replace(tmp, path)


def write_grid(path, grid: Grid):
    write_array(path, grid.data[None], grid.spacing)


def write_field(path, field: VectorField):
    write_array(path, field.data, field.spacing)


def _parse_header(raw, path):
    lines = []
    pos = 0
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise ParseFailure(f"{path}: truncated header")
        line = raw[pos:nl].decode("ascii", errors="replace").strip()
        pos = nl + 1
        if line == "":
            break
        lines.append(line)
        if len(lines) > 8:
            raise ParseFailure(f"{path}: header too long")
    if not lines or lines[0] != MAGIC:
        raise ParseFailure(f"{path}: missing {MAGIC} magic")
    fields = {}
    for line in lines[1:]:
        key, sep, value = line.partition(":")
        if not sep:
            raise ParseFailure(f"{path}: malformed header line {line!r}")
        fields[key.strip()] = value.split()
    try:
        d, *dims = (int(v) for v in fields["dims"])
        spacing = tuple(float(v) for v in fields["spacing"])
        channels = int(fields["channels"][0])
    except (KeyError, ValueError, IndexError) as exc:
        raise ParseFailure(f"{path}: bad header ({exc})") from None
    if d != len(dims) or len(spacing) != d or any(n <= 0 for n in dims) or channels < 1:
        raise ParseFailure(f"{path}: inconsistent header")
    return tuple(dims), spacing, channels, pos


def read_array(path):
    """Return ``(array of shape (c, *dims), spacing)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ParseFailure(f"{path}: {exc}") from None
    if path.suffix.lower() == ".pgm":
        return _read_pgm(path)[None], (1.0, 1.0)
    dims, spacing, channels, pos = _parse_header(raw, path)
    count = channels * int(np.prod(dims))
    body = raw[pos:]
    if len(body) != 4 * count:
        raise ParseFailure(f"{path}: expected {4 * count} data bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f4").astype(np.float64)
    arr = values.reshape((channels,) + tuple(reversed(dims))).transpose(
        (0,) + tuple(range(len(dims), 0, -1))
    )
    if not np.all(np.isfinite(arr)):
        raise ParseFailure(f"{path}: non-finite values")
    return np.ascontiguousarray(arr), spacing


def _read_pgm(path):
    from PIL import Image

    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "1", "P"):
                raise ParseFailure(f"{path}: only 8-bit grayscale PGM is supported")
            arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    except (OSError, SyntaxError) as exc:
        raise ParseFailure(f"{path}: {exc}") from None
    # PIL gives rows (y) first.
    return arr.T.copy()


def read_grid(path) -> Grid:
    arr, spacing = read_array(path)
    if arr.shape[0] != 1:
        raise ParseFailure(f"{path}: expected 1 channel, found {arr.shape[0]}")
    return Grid(arr[0], spacing)


def read_field(path) -> VectorField:
    arr, spacing = read_array(path)
    if arr.shape[0] != arr.ndim - 1:
        raise ParseFailure(f"{path}: {arr.shape[0]} channels for a {arr.ndim - 1}-d field")
    return VectorField(arr, spacing)


def read_stack(directory):
    """All ``*.pfg``/``*.pgm`` grids in a directory, sorted by filename."""
    directory = Path(directory)
    paths = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in (".pfg", ".pgm")
    )
    if not paths:
        raise ParseFailure(f"{directory}: no .pfg or .pgm images")
    return paths, [read_grid(p) for p in paths]
