"""Raster data model, LUCR/LUCF file formats and windowed access.

Conventions
-----------
* Coordinates are ``(row, col)`` tuples; arrays are row-major ``(height, width)``.
* A :class:`LuGrid` holds category codes (``uint8``) plus an optional nodata mask
  where ``True`` marks a masked cell.
* Multi-band images are ``float32`` arrays of shape ``(bands, height, width)``;
  scalar fields are ``float64`` arrays of shape ``(height, width)``; region masks
  are boolean arrays of shape ``(height, width)``.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from . import kernels

GRID_MAGIC = b"LUCR"
FIELD_MAGIC = b"LUCF"
FORMAT_VERSION = 1

FLAG_MASK = 0x1
# LUCF only: payload stored as 64-bit reals instead of 32-bit.
FLAG_FLOAT64 = 0x1

_GRID_HEADER = struct.Struct("<4sHHIIdH")
_FIELD_HEADER = struct.Struct("<4sHHHII")


class RasterFormatError(ValueError):
    """Base class for malformed raster files."""


class BadMagicError(RasterFormatError):
    pass


class LengthMismatchError(RasterFormatError):
    pass


class CategoryError(RasterFormatError):
    pass


class LuGrid:
    """Immutable categorical land-use raster.

    Parameters
    ----------
    data : array_like, shape (height, width)
        Category code per cell.
    categories : sequence of int
        Ordered category codes; every unmasked cell must hold one of them.
    cell_size : float
        Cell edge length in meters.
    mask : array_like of bool, optional
        ``True`` where the cell is nodata.
    """

    __slots__ = ("data", "categories", "cell_size", "mask")

    def __init__(self, data, categories: Sequence[int], cell_size: float = 1.0,
                 mask=None):
        data = np.array(data, dtype=np.uint8, copy=True)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"grid data must be a non-empty 2D array, got shape {data.shape}")
        categories = tuple(int(c) for c in categories)
        if len(categories) == 0 or len(set(categories)) != len(categories):
            raise ValueError("categories must be a non-empty list of distinct codes")
        if mask is not None:
            mask = np.array(mask, dtype=bool, copy=True)
            if mask.shape != data.shape:
                raise ValueError("mask shape differs from data shape")
            if not mask.any():
                mask = None
        valid = np.isin(data, np.array(categories, dtype=np.int64))
        if mask is not None:
            valid |= mask
        if not valid.all():
            bad = int(data[~valid][0])
            raise CategoryError(f"cell value {bad} not in category list {categories}")
        data.setflags(write=False)
        if mask is not None:
            mask.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "categories", categories)
        object.__setattr__(self, "cell_size", float(cell_size))
        object.__setattr__(self, "mask", mask)

    def __setattr__(self, name, value):
        raise AttributeError("LuGrid is immutable")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def valid_mask(self) -> np.ndarray:
        """Boolean array, ``True`` on unmasked cells."""
        if self.mask is None:
            return np.ones(self.shape, dtype=bool)
        return ~self.mask

    def replace(self, data=None, mask=None) -> "LuGrid":
        return LuGrid(self.data if data is None else data, self.categories,
                      self.cell_size, self.mask if mask is None else mask)

    def __eq__(self, other):
        if not isinstance(other, LuGrid):
            return NotImplemented
        if self.mask is None or other.mask is None:
            masks_equal = self.mask is None and other.mask is None
        else:
            masks_equal = np.array_equal(self.mask, other.mask)
        return (self.categories == other.categories
                and self.cell_size == other.cell_size
                and masks_equal
                and np.array_equal(self.data, other.data))

    __hash__ = None

    def __repr__(self):
        return (f"LuGrid({self.height}x{self.width}, categories={self.categories}, "
                f"cell_size={self.cell_size}, masked={0 if self.mask is None else int(self.mask.sum())})")


def save_grid(grid: LuGrid, path) -> None:
    path = Path(path)
    flags = FLAG_MASK if grid.mask is not None else 0
    header = _GRID_HEADER.pack(GRID_MAGIC, FORMAT_VERSION, flags, grid.width,
                               grid.height, grid.cell_size, len(grid.categories))
    parts = [header, struct.pack(f"<{len(grid.categories)}H", *grid.categories),
             np.ascontiguousarray(grid.data, dtype=np.uint8).tobytes()]
    if grid.mask is not None:
        parts.append(grid.mask.astype(np.uint8).tobytes())
    try:
        path.write_bytes(b"".join(parts))
    except OSError as exc:
        raise OSError(f"cannot write grid to {path}: {exc}") from exc


def load_grid(path) -> LuGrid:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"grid file not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != GRID_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {GRID_MAGIC!r}")
    if len(raw) < _GRID_HEADER.size:
        raise LengthMismatchError(f"{path}: truncated header")
    _, version, flags, width, height, cell_size, ncat = _GRID_HEADER.unpack_from(raw, 0)
    if version != FORMAT_VERSION:
        raise RasterFormatError(f"{path}: unsupported version {version}")
    off = _GRID_HEADER.size
    if len(raw) < off + 2 * ncat:
        raise LengthMismatchError(f"{path}: truncated category list")
    categories = struct.unpack_from(f"<{ncat}H", raw, off)
    off += 2 * ncat
    n = width * height
    expected = off + n + (n if flags & FLAG_MASK else 0)
    if len(raw) != expected:
        raise LengthMismatchError(
            f"{path}: body is {len(raw) - off} bytes, header declares {expected - off}")
    data = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off).reshape(height, width)
    mask = None
    if flags & FLAG_MASK:
        mask = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off + n).reshape(height, width)
        if mask.max(initial=0) > 1:
            raise RasterFormatError(f"{path}: mask bytes must be 0 or 1")
        mask = mask.astype(bool)
    return LuGrid(data, categories, cell_size, mask)


def save_field(array, path, float64: bool = False) -> None:
    """Write a ``(bands, H, W)`` or ``(H, W)`` array as a LUCF file."""
    path = Path(path)
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"field must be 2D or 3D, got shape {arr.shape}")
    bands, height, width = arr.shape
    dtype = "<f8" if float64 else "<f4"
    header = _FIELD_HEADER.pack(FIELD_MAGIC, FORMAT_VERSION,
                                FLAG_FLOAT64 if float64 else 0, bands, width, height)
    try:
        path.write_bytes(header + np.ascontiguousarray(arr, dtype=dtype).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write field to {path}: {exc}") from exc


def load_field(path) -> np.ndarray:
    """Read a LUCF file into a ``(bands, H, W)`` array (float32 or float64)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"field file not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != FIELD_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {FIELD_MAGIC!r}")
    if len(raw) < _FIELD_HEADER.size:
        raise LengthMismatchError(f"{path}: truncated header")
    _, version, flags, bands, width, height = _FIELD_HEADER.unpack_from(raw, 0)
    if version != FORMAT_VERSION:
        raise RasterFormatError(f"{path}: unsupported version {version}")
    dtype = np.dtype("<f8" if flags & FLAG_FLOAT64 else "<f4")
    n = bands * width * height
    if len(raw) - _FIELD_HEADER.size != n * dtype.itemsize:
        raise LengthMismatchError(
            f"{path}: body is {len(raw) - _FIELD_HEADER.size} bytes, "
            f"header declares {n * dtype.itemsize}")
    arr = np.frombuffer(raw, dtype=dtype, count=n, offset=_FIELD_HEADER.size)
    return arr.reshape(bands, height, width).astype(dtype.newbyteorder("="))


def _check_center(shape, center):
    r, c = center
    if not (0 <= r < shape[0] and 0 <= c < shape[1]):
        raise IndexError(f"center {center} outside raster of shape {shape}")


def _check_odd(size, what="size"):
    if size < 1 or size % 2 == 0:
        raise ValueError(f"{what} must be a positive odd integer, got {size}")


def crop_patch(image: np.ndarray, center: Tuple[int, int], size: int) -> np.ndarray:
    """Crop a ``(bands, size, size)`` window centred on ``center``.

    Positions outside the image take the value of the nearest edge cell.
    """
    _check_odd(size)
    _check_center(image.shape[1:], center)
    half = size // 2
    rows = np.clip(np.arange(center[0] - half, center[0] + half + 1), 0, image.shape[1] - 1)
    cols = np.clip(np.arange(center[1] - half, center[1] + half + 1), 0, image.shape[2] - 1)
    return image[:, rows[:, None], cols[None, :]]


def crop_patches(image: np.ndarray, rows, cols, size: int, dtype=np.float64) -> np.ndarray:
    """Vectorised :func:`crop_patch` for many centres; returns ``(N, bands, size, size)``."""
    _check_odd(size)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    half = size // 2
    offs = np.arange(-half, half + 1)
    rr = np.clip(rows[:, None] + offs[None, :], 0, image.shape[1] - 1)
    cc = np.clip(cols[:, None] + offs[None, :], 0, image.shape[2] - 1)
    out = image[:, rr[:, :, None], cc[:, None, :]]  # (bands, N, size, size)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3), dtype=dtype)


def neighborhood_counts(grid: LuGrid, center: Tuple[int, int], window: int) -> np.ndarray:
    """Per-category counts in the ``window`` x ``window`` neighbourhood of ``center``.

    The window is clipped to the grid and masked cells are skipped. The result is
    indexed like ``grid.categories``.
    """
    _check_odd(window, "window")
    _check_center(grid.shape, center)
    half = window // 2
    r0, r1 = max(center[0] - half, 0), min(center[0] + half + 1, grid.height)
    c0, c1 = max(center[1] - half, 0), min(center[1] + half + 1, grid.width)
    block = grid.data[r0:r1, c0:c1]
    valid = grid.valid_mask()[r0:r1, c0:c1]
    vals = block[valid]
    return np.array([np.count_nonzero(vals == k) for k in grid.categories], dtype=np.int64)


def neighborhood_count_maps(grid: LuGrid, window: int) -> np.ndarray:
    """Counts for every cell at once: ``(n_categories, H, W)`` int64 array."""
    _check_odd(window, "window")
    index = category_index(grid)
    return kernels.window_counts(index, len(grid.categories), window // 2)


def category_index(grid: LuGrid) -> np.ndarray:
    """Position of each cell's code in ``grid.categories``; ``-1`` on masked cells."""
    lut = np.full(256, -1, dtype=np.int32)
    for i, code in enumerate(grid.categories):
        lut[code] = i
    index = lut[grid.data]
    if grid.mask is not None:
        index = np.where(grid.mask, -1, index)
    return np.ascontiguousarray(index, dtype=np.int32)


def fields_shape_check(*arrays, shape: Optional[Tuple[int, int]] = None) -> Tuple[int, int]:
    """Assert that all arrays share trailing ``(H, W)`` dimensions."""
    for a in arrays:
        s = tuple(np.shape(a)[-2:])
        if shape is None:
            shape = s
        elif s != tuple(shape):
            raise ValueError(f"dimension mismatch: {s} vs {tuple(shape)}")
    return shape
