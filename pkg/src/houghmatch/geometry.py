"""Box arithmetic, match offsets and hard offset binning.

Boxes are axis-aligned with half-open continuous pixel coordinates
``(x_min, y_min, x_max, y_max)``.  Scalar helpers take :class:`Box`
instances; the ``*_matrix`` / ``pairwise_*`` variants operate on ``(n, 4)``
float arrays and are what the rest of the package uses in hot loops.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, InvalidInputError

__all__ = [
    "Box",
    "ImageSize",
    "Offset",
    "OffsetBin",
    "BinGrid",
    "iou",
    "iou_matrix",
    "offset",
    "pairwise_offsets",
    "assign_bin",
    "assign_bins",
    "kernel_entry",
    "boxes_to_array",
    "validate_boxes",
    "read_proposals",
    "write_proposals",
]


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError(f"non-finite box coordinates: {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidInputError(f"degenerate box: {vals}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)


@dataclass(frozen=True)
class ImageSize:
    width: float
    height: float

    def __post_init__(self) -> None:
        if not (self.width > 0 and self.height > 0):
            raise InvalidInputError(f"image size must be positive, got {self.width}x{self.height}")

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)


@dataclass(frozen=True)
class Offset:
    """Center translation (normalized by image size) and log2 size ratios."""

    tx: float
    ty: float
    sx: float
    sy: float


@dataclass(frozen=True)
class OffsetBin:
    itx: int
    ity: int
    isx: int
    isy: int


@dataclass(frozen=True)
class BinGrid:
    """Regular grid of offset points.

    The translation axes span ``[-t_range, t_range]`` in steps of
    ``t_width``; the log-scale axes span ``[-s_range, s_range]`` in steps of
    ``s_width``.
    """

    t_width: float = 0.25
    s_width: float = 1.0
    t_range: float = 1.0
    s_range: float = 2.0

    def __post_init__(self) -> None:
        if not (self.t_width > 0 and self.s_width > 0):
            raise InvalidInputError("bin widths must be positive")
        if not (self.t_range >= 0 and self.s_range >= 0):
            raise InvalidInputError("bin ranges must contain 0")
        for rng, w in ((self.t_range, self.t_width), (self.s_range, self.s_width)):
            q = rng / w
            if abs(q - round(q)) > 1e-9:
                raise InvalidInputError(f"range {rng} is not a multiple of width {w}")

    @property
    def t_max_index(self) -> int:
        return int(round(self.t_range / self.t_width))

    @property
    def s_max_index(self) -> int:
        return int(round(self.s_range / self.s_width))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        nt = 2 * self.t_max_index + 1
        ns = 2 * self.s_max_index + 1
        return (nt, nt, ns, ns)

    @property
    def n_bins(self) -> int:
        nt, _, ns, _ = self.shape
        return nt * nt * ns * ns

    def encode(self, bins: np.ndarray) -> np.ndarray:
        """Flatten ``(n, 4)`` bin indices into integer keys ordered like the tuples."""
        bins = np.asarray(bins, dtype=np.int64)
        nt, _, ns, _ = self.shape
        t0, s0 = self.t_max_index, self.s_max_index
        return (((bins[..., 0] + t0) * nt + (bins[..., 1] + t0)) * ns + (bins[..., 2] + s0)) * ns + (
            bins[..., 3] + s0
        )

    def decode(self, keys: np.ndarray) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        nt, _, ns, _ = self.shape
        t0, s0 = self.t_max_index, self.s_max_index
        isy = keys % ns - s0
        keys = keys // ns
        isx = keys % ns - s0
        keys = keys // ns
        ity = keys % nt - t0
        itx = keys // nt - t0
        return np.stack([itx, ity, isx, isy], axis=-1)


def boxes_to_array(boxes: Iterable[Box] | np.ndarray) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=np.float64)
    else:
        arr = np.array([b.as_array() for b in boxes], dtype=np.float64).reshape(-1, 4)
    return arr.reshape(-1, 4)


def validate_boxes(boxes: np.ndarray) -> np.ndarray:
    """Return ``boxes`` as an ``(n, 4)`` float64 array, raising on invalid rows."""
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("non-finite box coordinates")
    bad = ~((arr[:, 0] < arr[:, 2]) & (arr[:, 1] < arr[:, 3]))
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise InvalidInputError(f"degenerate box at row {i}: {arr[i].tolist()}")
    return arr


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between the rows of ``a`` (n, 4) and ``b`` (m, 4)."""
    a = validate_boxes(a)
    b = validate_boxes(b)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def offset(r: Box, s: Box, size_a: ImageSize, size_b: ImageSize) -> Offset:
    """Offset of the match ``r -> s``."""
    (cxr, cyr), (cxs, cys) = r.center, s.center
    return Offset(
        tx=cxs / size_b.width - cxr / size_a.width,
        ty=cys / size_b.height - cyr / size_a.height,
        sx=math.log2((s.width / size_b.width) / (r.width / size_a.width)),
        sy=math.log2((s.height / size_b.height) / (r.height / size_a.height)),
    )


def pairwise_offsets(
    src: np.ndarray,
    tgt: np.ndarray,
    size_a: ImageSize,
    size_b: ImageSize,
    src_idx: np.ndarray | None = None,
    tgt_idx: np.ndarray | None = None,
) -> np.ndarray:
    """Offsets ``(tx, ty, sx, sy)`` for candidate matches.

    Without index arrays, returns the dense ``(p_a * p_b, 4)`` set in
    row-major (source-major) order.  With ``src_idx``/``tgt_idx``, returns the
    offsets of those matches only.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 4)
    tgt = np.asarray(tgt, dtype=np.float64).reshape(-1, 4)
    if src_idx is None:
        src_idx, tgt_idx = np.divmod(np.arange(len(src) * len(tgt)), len(tgt))
    r = src[src_idx]
    s = tgt[tgt_idx]
    cxr = 0.5 * (r[:, 0] + r[:, 2]) / size_a.width
    cyr = 0.5 * (r[:, 1] + r[:, 3]) / size_a.height
    cxs = 0.5 * (s[:, 0] + s[:, 2]) / size_b.width
    cys = 0.5 * (s[:, 1] + s[:, 3]) / size_b.height
    wr = (r[:, 2] - r[:, 0]) / size_a.width
    hr = (r[:, 3] - r[:, 1]) / size_a.height
    ws = (s[:, 2] - s[:, 0]) / size_b.width
    hs = (s[:, 3] - s[:, 1]) / size_b.height
    return np.stack([cxs - cxr, cys - cyr, np.log2(ws / wr), np.log2(hs / hr)], axis=1)


def _round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def assign_bins(offsets: np.ndarray, grid: BinGrid) -> np.ndarray:
    """Vectorized :func:`assign_bin` over an ``(n, 4)`` offset array."""
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    widths = np.array([grid.t_width, grid.t_width, grid.s_width, grid.s_width])
    limits = np.array([grid.t_max_index, grid.t_max_index, grid.s_max_index, grid.s_max_index])
    idx = _round_half_away(offsets / widths)
    return np.clip(idx, -limits, limits).astype(np.int64)


def assign_bin(o: Offset, grid: BinGrid) -> OffsetBin:
    """Nearest grid point per coordinate (ties away from zero), clamped to the grid."""
    itx, ity, isx, isy = assign_bins(np.array([[o.tx, o.ty, o.sx, o.sy]]), grid)[0]
    return OffsetBin(int(itx), int(ity), int(isx), int(isy))


def kernel_entry(m: OffsetBin, m2: OffsetBin) -> int:
    return int(m == m2)


def read_proposals(path: str | Path) -> np.ndarray:
    """Read a proposals CSV (header ``x_min,y_min,x_max,y_max``)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["x_min", "y_min", "x_max", "y_max"]:
            raise FormatError(f"{path}: bad proposals header {header!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if len(rows[-1]) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 columns")
    arr = np.array(rows, dtype=np.float64).reshape(-1, 4)
    try:
        return validate_boxes(arr)
    except InvalidInputError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_proposals(path: str | Path, boxes: Sequence[Sequence[float]] | np.ndarray) -> None:
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x_min", "y_min", "x_max", "y_max"])
        for row in arr:
            w.writerow([repr(float(v)) for v in row])
