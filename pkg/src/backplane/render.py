"""Surface sheets: normalization, tiling, and byte-stable PNG/PPM encoding.

Each input-shaped surface is normalized independently: divide by its own
max-abs (guarded by the smallest positive normal binary32 so an all-zero
surface stays black), take the absolute value, quantize to 8 bits with
round-half-away-from-zero. Single-channel surfaces replicate to RGB so both
writers share one output contract.

The PNG encoder frames stored (uncompressed) DEFLATE blocks by hand instead
of calling a compressor, so the emitted bytes depend only on the pixels;
different zlib builds cannot perturb golden files.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .tensor import FP32_TINY


@dataclass(frozen=True)
class RenderSpec:
    border: int = 0  # pixels between tiles
    border_value: float = 0.5  # gray level of the separator


def normalize_surface(surface: np.ndarray) -> np.ndarray:
    """Per-surface |.|/max-abs in [0,1]; an exactly zero surface maps to zeros."""
    surface = np.asarray(surface, dtype=np.float64)
    scale = max(float(np.max(np.abs(surface))), FP32_TINY)
    return np.abs(surface) / scale


def quantize(normalized: np.ndarray) -> np.ndarray:
    """[0,1] floats -> uint8 with round-half-away-from-zero."""
    v = np.clip(np.asarray(normalized, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def _as_rgb(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    if img.shape[2] != 3:
        raise ValueError(f"expected 1 or 3 channels, got {img.shape[2]}")
    return img


def _tile_grid(tiles: list, rows: int, cols: int, spec: RenderSpec) -> np.ndarray:
    """Normalize each tile independently and lay them out row-major."""
    if len(tiles) > rows * cols:
        raise ValueError(f"{len(tiles)} tiles do not fit a {rows}x{cols} grid")
    th, tw = tiles[0].shape[0], tiles[0].shape[1]
    tc = 1 if tiles[0].ndim == 2 else tiles[0].shape[2]
    b = spec.border
    h = rows * th + (rows - 1) * b
    w = cols * tw + (cols - 1) * b
    sheet = np.full((h, w, tc), spec.border_value, dtype=np.float64)
    for n, tile in enumerate(tiles):
        if tile.shape != tiles[0].shape:
            raise ValueError(f"tile {n} shape {tile.shape} != {tiles[0].shape}")
        r, c = divmod(n, cols)
        y = r * (th + b)
        x = c * (tw + b)
        sheet[y : y + th, x : x + tw, :] = normalize_surface(tile).reshape(th, tw, tc)
    # Unused trailing cells (non-rectangular counts) render as separator gray.
    for n in range(len(tiles), rows * cols):
        r, c = divmod(n, cols)
        y = r * (th + b)
        x = c * (tw + b)
        sheet[y : y + th, x : x + tw, :] = spec.border_value
    return sheet


def tile_strides(surfaces: list, spec: RenderSpec = RenderSpec()) -> np.ndarray:
    """Row-major sqrt(|S|) x sqrt(|S|) sheet of per-stride surfaces in [0,1]."""
    side = int(round(np.sqrt(len(surfaces))))
    if side * side != len(surfaces):
        raise ValueError(f"{len(surfaces)} stride surfaces do not form a square grid")
    return _tile_grid(surfaces, side, side, spec)


def tile_channels(surfaces: list, c_in: int, c_out: int, spec: RenderSpec = RenderSpec()) -> np.ndarray:
    """c_in x c_out sheet; surfaces ordered j-major (all i for j=0, then j=1, ...)."""
    if len(surfaces) != c_in * c_out:
        raise ValueError(f"{len(surfaces)} surfaces != {c_in} x {c_out}")
    return _tile_grid(surfaces, c_in, c_out, spec)


def grid_shape(n: int) -> tuple:
    """Near-square grid: rows is the largest divisor of n at or below sqrt(n)."""
    if n < 1:
        raise ValueError("empty grid")
    rows = 1
    d = 1
    while d * d <= n:
        if n % d == 0:
            rows = d
        d += 1
    return rows, n // rows


def class_grid(surfaces: list, spec: RenderSpec = RenderSpec(border=1)) -> np.ndarray:
    """Near-square grid of per-class surfaces with separator lines."""
    rows, cols = grid_shape(len(surfaces))
    return _tile_grid(surfaces, rows, cols, spec)


def difference_image(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|a - b| normalized by its own max-abs; identical inputs render black."""
    return normalize_surface(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))


def surface_filename(arch: str, mode: int, layer: str, s=None, j=None, i=None, k=None, ext: str = "png") -> str:
    parts = [arch, f"rm{mode}", layer]
    for v in (s, j, i, k):
        if v is not None:
            parts.append(str(v))
    return "_".join(parts) + "." + ext


# ---------------------------------------------------------------------------
# Encoders


def _deflate_stored(data: bytes) -> bytes:
    """A zlib stream of stored DEFLATE blocks: fully determined by the input."""
    out = bytearray(b"\x78\x01")  # 32K window, fastest-compression flag
    n = len(data)
    pos = 0
    while True:
        chunk = data[pos : pos + 65535]
        pos += len(chunk)
        final = 1 if pos >= n else 0
        out += bytes([final])
        out += struct.pack("<HH", len(chunk), 0xFFFF ^ len(chunk))
        out += chunk
        if final:
            break
    out += struct.pack(">I", zlib.adler32(data) & 0xFFFFFFFF)
    return bytes(out)


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    body = tag + payload
    return struct.pack(">I", len(payload)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)


def write_png(img: np.ndarray, path) -> None:
    """8-bit RGB, no alpha, no interlace, filter 0 on every scanline."""
    img = _as_rgb(np.asarray(img, dtype=np.uint8))
    h, w, _ = img.shape
    raw = bytearray()
    for row in range(h):
        raw += b"\x00"
        raw += img[row].tobytes()
    out = b"\x89PNG\r\n\x1a\n"
    out += _png_chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0))
    out += _png_chunk(b"IDAT", _deflate_stored(bytes(raw)))
    out += _png_chunk(b"IEND", b"")
    with open(path, "wb") as fh:
        fh.write(out)


def write_ppm(img: np.ndarray, path) -> None:
    """Binary P6 with maxval 255."""
    img = _as_rgb(np.asarray(img, dtype=np.uint8))
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a P6 file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).copy()


def render_sheet_to_files(sheet01: np.ndarray, path_base: str) -> tuple:
    """Quantize a [0,1] sheet and write both encodings; returns the two paths."""
    img = quantize(sheet01)
    png = path_base + ".png"
    ppm = path_base + ".ppm"
    write_png(img, png)
    write_ppm(img, ppm)
    return png, ppm
