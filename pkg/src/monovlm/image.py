"""Raw images, PPM (P6) IO, bilinear resizing and dynamic tiling.

The dynamic high-resolution step picks the tile grid whose aspect ratio best
matches the image, resizes, cuts square tiles row-major, and appends a global
thumbnail. All preprocessing is deterministic and total for positive-area
images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ImageError(ValueError):
    """Degenerate or malformed image input."""


@dataclass
class RawImage:
    """8-bit RGB image, row-major (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.uint8)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ImageError(f"expected (h, w, 3) pixel array, got {p.shape}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ImageError("image has zero area")
        self.pixels = p

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class TileSet:
    """Square tiles in row-major grid order plus one global thumbnail."""

    tiles: list[np.ndarray]
    thumbnail: np.ndarray
    grid: tuple[int, int]  # (rows, cols)

    @property
    def num_tiles(self) -> int:
        return len(self.tiles)

    @property
    def tile_size(self) -> int:
        return self.thumbnail.shape[0]


def write_ppm(path, img: RawImage) -> None:
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (img.width, img.height))
        f.write(img.pixels.tobytes())


def read_ppm(path) -> RawImage:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise ImageError(f"{path}: not a binary PPM (P6) file")
    # Header: magic, width, height, maxval; '#' comments allowed between fields.
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageError(f"{path}: truncated PPM header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ImageError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    need = w * h * 3
    raw = data[pos : pos + need]
    if len(raw) != need:
        raise ImageError(f"{path}: pixel data truncated ({len(raw)} of {need} bytes)")
    return RawImage(np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3))


def bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (h, w, ch) float array with half-pixel-centered bilinear sampling."""
    src = np.asarray(pixels, dtype=np.float64)
    h, w = src.shape[:2]
    if (h, w) == (out_h, out_w):
        return src.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def _resize_u8(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return np.clip(np.rint(bilinear_resize(pixels, out_h, out_w)), 0, 255).astype(np.uint8)


def choose_grid(width: int, height: int, max_tiles: int) -> tuple[int, int]:
    """Tile grid (rows, cols) with rows*cols <= max_tiles whose aspect ratio
    rows:cols is closest to the image's height:width.

    Ties break toward fewer tiles, then fewer rows, so the choice is total
    and deterministic.
    """
    target = height / width
    best = None
    for rows in range(1, max_tiles + 1):
        for cols in range(1, max_tiles // rows + 1):
            key = (abs(rows / cols - target), rows * cols, rows)
            if best is None or key < best[0]:
                best = (key, (rows, cols))
    return best[1]


def dyn_process(img: RawImage, tile_size: int, max_tiles: int) -> TileSet:
    """Dynamic high-resolution tiling: aspect-matched grid of square tiles
    (bilinear resize, row-major cut) plus a global thumbnail, appended last."""
    if max_tiles < 1:
        raise ImageError("max_tiles must be >= 1")
    rows, cols = choose_grid(img.width, img.height, max_tiles)
    resized = _resize_u8(img.pixels, rows * tile_size, cols * tile_size)
    tiles = [
        resized[r * tile_size : (r + 1) * tile_size, c * tile_size : (c + 1) * tile_size]
        for r in range(rows)
        for c in range(cols)
    ]
    thumbnail = _resize_u8(img.pixels, tile_size, tile_size)
    return TileSet(tiles=tiles, thumbnail=thumbnail, grid=(rows, cols))


def tile_patches(tile: np.ndarray, stride: int) -> np.ndarray:
    """Non-overlapping s x s patches of one tile, row-major, each flattened
    (y, x, channel)-order and scaled to [-1, 1]. Returns (g*g, 3*s*s)."""
    t = tile.shape[0]
    if t % stride != 0:
        raise ImageError(f"tile size {t} not divisible by stride {stride}")
    g = t // stride
    x = tile.astype(np.float32) / 127.5 - 1.0
    x = x.reshape(g, stride, g, stride, 3).transpose(0, 2, 1, 3, 4)
    return x.reshape(g * g, 3 * stride * stride)


def tileset_patches(ts: TileSet, stride: int) -> np.ndarray:
    """Patch vectors for all tiles then the thumbnail: ((tiles+1)*g*g, 3s^2)."""
    parts = [tile_patches(t, stride) for t in ts.tiles]
    parts.append(tile_patches(ts.thumbnail, stride))
    return np.concatenate(parts, axis=0)
