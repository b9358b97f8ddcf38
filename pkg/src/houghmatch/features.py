"""Dense feature grids, max ROI pooling, and the ``FGRD`` binary format.

A :class:`FeatureGrid` stands in for a convolutional feature map: an
``H x W x C`` array where cell ``(i, j)`` covers pixels
``[j * cell_size, (j + 1) * cell_size) x [i * cell_size, (i + 1) * cell_size)``.

``FGRD`` layout (all little-endian)::

    b"FGRD" | u8 version=1 | u32 H | u32 W | u32 C | u32 cell_num | u32 cell_den
    | H*W*C float32, row-major, channel innermost
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError
from .geometry import Box, ImageSize, validate_boxes

__all__ = ["FeatureGrid", "roi_pool", "roi_pool_many", "flatten", "load_feature_grid", "save_feature_grid"]

MAGIC = b"FGRD"
VERSION = 1
_HEADER = struct.Struct("<4sB5I")
# Refuse payloads above 1 GiB; guards against corrupted dimension fields.
MAX_PAYLOAD = 1 << 30


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    data: np.ndarray  # (H, W, C) float32
    cell_size: Fraction = Fraction(1)

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidInputError(f"feature grid must be H x W x C with all dims >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("feature grid contains non-finite values")
        cs = Fraction(self.cell_size).limit_denominator(2**32 - 1)
        if cs <= 0:
            raise InvalidInputError("cell_size must be positive")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "cell_size", cs)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def image_size(self) -> ImageSize:
        cs = float(self.cell_size)
        return ImageSize(self.width * cs, self.height * cs)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureGrid):
            return NotImplemented
        return (
            self.cell_size == other.cell_size
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def _window_bounds(lo, hi, n_cells: int, P: int) -> tuple[np.ndarray, np.ndarray]:
    """Sub-window [start, end) cell indices along one axis, rounded outward."""
    edges = lo + (hi - lo) * np.arange(P + 1) / P
    start = np.floor(edges[..., :-1]).astype(np.int64)
    end = np.ceil(edges[..., 1:]).astype(np.int64)
    start = np.clip(start, 0, n_cells - 1)
    end = np.clip(end, 1, n_cells)
    end = np.maximum(end, start + 1)
    return start, end


def roi_pool(grid: FeatureGrid, box: Box | np.ndarray, P: int = 7) -> np.ndarray:
    """Max-pool the features under ``box`` onto a ``P x P x C`` lattice.

    The box (pixels) is converted to cell units and clipped to the grid; each
    of the ``P x P`` sub-windows has its boundaries rounded outward so it
    covers at least one cell.
    """
    if P < 1:
        raise InvalidInputError("pooling resolution must be >= 1")
    b = box.as_array() if isinstance(box, Box) else validate_boxes(box)[0]
    cs = float(grid.cell_size)
    x0, y0, x1, y1 = (b / cs).tolist()
    x0, x1 = max(x0, 0.0), min(x1, grid.width)
    y0, y1 = max(y0, 0.0), min(y1, grid.height)
    if x1 <= x0 or y1 <= y0:
        raise InvalidInputError(f"box {b.tolist()} lies outside the feature grid")
    xs, xe = _window_bounds(x0, x1, grid.width, P)
    ys, ye = _window_bounds(y0, y1, grid.height, P)
    data = grid.data
    out = np.empty((P, P, grid.channels), dtype=np.float32)
    for i in range(P):
        band = data[ys[i] : ye[i]]
        for j in range(P):
            out[i, j] = band[:, xs[j] : xe[j]].max(axis=(0, 1))
    return out


class _RangeMax:
    """2-D sparse table answering max queries over cell rectangles in O(1)."""

    def __init__(self, data: np.ndarray):
        H, W, _ = data.shape
        self.levels: dict[tuple[int, int], np.ndarray] = {}
        rows = [data]
        k = 1
        while 2 * k <= H:
            prev = rows[-1]
            rows.append(np.maximum(prev[:-k], prev[k:]))
            k *= 2
        for a, base in enumerate(rows):
            cur = base
            self.levels[(a, 0)] = cur
            k, b = 1, 0
            while 2 * k <= W:
                cur = np.maximum(cur[:, :-k], cur[:, k:])
                k *= 2
                b += 1
                self.levels[(a, b)] = cur

    def query(self, y0: np.ndarray, y1: np.ndarray, x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
        """Max over ``[y0, y1) x [x0, x1)`` for arrays of rectangles; returns ``(n, C)``."""
        ly = np.floor(np.log2(y1 - y0)).astype(np.int64)
        lx = np.floor(np.log2(x1 - x0)).astype(np.int64)
        C = self.levels[(0, 0)].shape[2]
        out = np.empty((len(y0), C), dtype=self.levels[(0, 0)].dtype)
        for a, b in set(zip(ly.tolist(), lx.tolist())):
            sel = np.flatnonzero((ly == a) & (lx == b))
            t = self.levels[(a, b)]
            ya, yb = y0[sel], y1[sel] - (1 << a)
            xa, xb = x0[sel], x1[sel] - (1 << b)
            out[sel] = np.maximum(np.maximum(t[ya, xa], t[ya, xb]), np.maximum(t[yb, xa], t[yb, xb]))
        return out


def roi_pool_many(grid: FeatureGrid, boxes: np.ndarray, P: int = 7) -> np.ndarray:
    """Pool and flatten each box; returns ``(n, P * P * C)`` float64.

    Same result as calling :func:`roi_pool` per box, computed with range-max
    lookups.
    """
    if P < 1:
        raise InvalidInputError("pooling resolution must be >= 1")
    boxes = validate_boxes(boxes)
    n = len(boxes)
    cs = float(grid.cell_size)
    b = boxes / cs
    x0 = np.maximum(b[:, 0], 0.0)
    y0 = np.maximum(b[:, 1], 0.0)
    x1 = np.minimum(b[:, 2], grid.width)
    y1 = np.minimum(b[:, 3], grid.height)
    outside = (x1 <= x0) | (y1 <= y0)
    if np.any(outside):
        i = int(np.flatnonzero(outside)[0])
        raise InvalidInputError(f"box {boxes[i].tolist()} lies outside the feature grid")
    xs, xe = _window_bounds(x0[:, None], x1[:, None], grid.width, P)
    ys, ye = _window_bounds(y0[:, None], y1[:, None], grid.height, P)
    # (n, P, P) window corners, row index i over y, column j over x
    Y0 = np.broadcast_to(ys[:, :, None], (n, P, P)).ravel()
    Y1 = np.broadcast_to(ye[:, :, None], (n, P, P)).ravel()
    X0 = np.broadcast_to(xs[:, None, :], (n, P, P)).ravel()
    X1 = np.broadcast_to(xe[:, None, :], (n, P, P)).ravel()
    pooled = _RangeMax(grid.data).query(Y0, Y1, X0, X1)
    return pooled.reshape(n, P * P * grid.channels).astype(np.float64)


def flatten(pooled: np.ndarray) -> np.ndarray:
    """Row-major, channel-innermost raw vector of a ``P x P x C`` pooled feature."""
    return np.asarray(pooled, dtype=np.float64).reshape(-1)


def save_feature_grid(path: str | Path, grid: FeatureGrid) -> None:
    cs = grid.cell_size
    header = _HEADER.pack(MAGIC, VERSION, grid.height, grid.width, grid.channels, cs.numerator, cs.denominator)
    payload = grid.data.astype("<f4", copy=False).tobytes(order="C")
    Path(path).write_bytes(header + payload)


def load_feature_grid(path: str | Path) -> FeatureGrid:
    """Read an ``FGRD`` file, raising :class:`FormatError` on any defect."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError("bad magic, expected b'FGRD'", offset=0)
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", offset=len(raw))
    _, version, H, W, C, num, den = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if min(H, W, C) < 1:
        raise FormatError(f"zero dimension in header ({H}, {W}, {C})", offset=5)
    if num == 0 or den == 0:
        raise FormatError("cell size must be a positive fraction", offset=17)
    count = H * W * C
    if count * 4 > MAX_PAYLOAD:
        raise FormatError(f"dimension overflow: {H}x{W}x{C} exceeds payload limit", offset=5)
    expected = _HEADER.size + 4 * count
    if len(raw) < expected:
        raise FormatError(f"truncated payload: need {expected} bytes, have {len(raw)}", offset=len(raw))
    if len(raw) > expected:
        raise FormatError("trailing bytes after payload", offset=expected)
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=_HEADER.size)
    bad = ~np.isfinite(data)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise FormatError("non-finite feature value", offset=_HEADER.size + 4 * k)
    return FeatureGrid(data.reshape(H, W, C).astype(np.float32), Fraction(num, den))

