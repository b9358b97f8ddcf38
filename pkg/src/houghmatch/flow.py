"""Greedy densification of region matches into a per-pixel flow field.

Pixels are the integer lattice points ``(x, y)`` with ``0 <= x < width`` and
``0 <= y < height``; a pixel belongs to a box when
``x_min <= x < x_max`` and ``y_min <= y < y_max``.

``FLOW`` file layout, little-endian::

    b"FLOW" | u32 width | u32 height | width*height (dx, dy) float32 pairs, row-major
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError, InvalidInputError
from .geometry import ImageSize, validate_boxes

__all__ = ["FlowField", "densify", "warp_keypoint", "warp_points", "save_flow", "load_flow"]

_HEADER = struct.Struct("<4sII")


@dataclass
class FlowField:
    dx: np.ndarray  # (height, width)
    dy: np.ndarray
    assigned: np.ndarray  # bool (height, width)

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @classmethod
    def empty(cls, width: int, height: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)), np.zeros((height, width), dtype=bool))


def _pixel_dims(size: ImageSize) -> tuple[int, int]:
    return int(math.ceil(size.width - 1e-9)), int(math.ceil(size.height - 1e-9))


def _pixel_span(lo: float, hi: float, n: int) -> tuple[int, int]:
    return max(0, math.ceil(lo)), min(n, math.ceil(hi))


def densify(
    src_boxes: np.ndarray,
    tgt_boxes: np.ndarray,
    scores: np.ndarray,
    size_a: ImageSize,
    size_b: ImageSize | None = None,
    src_ids: np.ndarray | None = None,
) -> FlowField:
    """Assign each pixel the box-to-box map of the best-scoring match covering it.

    Matches are visited by score descending (ties: lower ``src_ids``, which
    default to row order).  Each visit only fills pixels not yet assigned.
    Pixels no source box covers copy the flow of the nearest assigned pixel.
    ``size_b`` is accepted for symmetry with the metrics; the map itself does
    not need it.
    """
    src_boxes = validate_boxes(src_boxes)
    tgt_boxes = validate_boxes(tgt_boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(src_boxes) == 0:
        raise InvalidInputError("densify needs at least one match")
    if not (len(src_boxes) == len(tgt_boxes) == len(scores)):
        raise InvalidInputError("match arrays differ in length")
    if not np.all(np.isfinite(scores)):
        raise InvalidInputError("match scores must be finite")
    src_ids = np.arange(len(scores)) if src_ids is None else np.asarray(src_ids)
    W, H = _pixel_dims(size_a)
    flow = FlowField.empty(W, H)
    xs_all = np.arange(W, dtype=np.float64)
    ys_all = np.arange(H, dtype=np.float64)
    for k in np.lexsort((src_ids, -scores)):
        r, s = src_boxes[k], tgt_boxes[k]
        x0, x1 = _pixel_span(r[0], r[2], W)
        y0, y1 = _pixel_span(r[1], r[3], H)
        if x0 >= x1 or y0 >= y1:
            continue
        free = ~flow.assigned[y0:y1, x0:x1]
        if not free.any():
            continue
        sx = (s[2] - s[0]) / (r[2] - r[0])
        sy = (s[3] - s[1]) / (r[3] - r[1])
        px = xs_all[x0:x1]
        py = ys_all[y0:y1]
        fx = np.broadcast_to((s[0] + (px - r[0]) * sx - px)[None, :], free.shape)
        fy = np.broadcast_to((s[1] + (py - r[1]) * sy - py)[:, None], free.shape)
        flow.dx[y0:y1, x0:x1][free] = fx[free]
        flow.dy[y0:y1, x0:x1][free] = fy[free]
        flow.assigned[y0:y1, x0:x1] |= free
    _nearest_fill(flow)
    return flow


def _nearest_fill(flow: FlowField) -> None:
    """Copy flow into unassigned pixels from the nearest assigned pixel.

    Distances are Euclidean; ties pick the assigned pixel first in row-major
    order.  Squared distances are integers, so ties are detected exactly.
    """
    if flow.assigned.all() or not flow.assigned.any():
        return
    W = flow.width
    have = np.flatnonzero(flow.assigned.ravel())
    need = np.flatnonzero(~flow.assigned.ravel())
    pts = np.stack([have // W, have % W], axis=1)
    q = np.stack([need // W, need % W], axis=1)
    tree = cKDTree(pts)
    k = min(16, len(have))
    _, idx = tree.query(q, k=k)
    idx = idx.reshape(len(q), k)
    d2 = ((pts[idx] - q[:, None, :]) ** 2).sum(axis=2)
    best = d2.min(axis=1)
    tie = d2 == best[:, None]
    src = np.where(tie, have[idx], np.iinfo(np.int64).max).min(axis=1)
    if k < len(have):
        # candidate list saturated with equidistant points: widen the search
        for row in np.flatnonzero(tie.all(axis=1)):
            ball = np.asarray(tree.query_ball_point(q[row], math.sqrt(best[row]) + 1e-6))
            dd = ((pts[ball] - q[row]) ** 2).sum(axis=1)
            src[row] = have[ball[dd == best[row]]].min()
    dx, dy = flow.dx.ravel(), flow.dy.ravel()
    dx[need] = dx[src]
    dy[need] = dy[src]
    flow.assigned[:] = True


def _lookup(flow: FlowField, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ix = np.clip(np.floor(x + 0.5).astype(np.int64), 0, flow.width - 1)
    iy = np.clip(np.floor(y + 0.5).astype(np.int64), 0, flow.height - 1)
    return flow.dx[iy, ix], flow.dy[iy, ix]


def warp_keypoint(flow: FlowField, p: tuple[float, float]) -> tuple[float, float]:
    """``p + flow(round(p))`` with nearest-pixel lookup."""
    x, y = float(p[0]), float(p[1])
    if not (0.0 <= x < flow.width and 0.0 <= y < flow.height):
        raise InvalidInputError(f"point {p} lies outside the {flow.width}x{flow.height} source image")
    dx, dy = _lookup(flow, np.array([x]), np.array([y]))
    return (x + float(dx[0]), y + float(dy[0]))


def warp_points(flow: FlowField, pts: np.ndarray) -> np.ndarray:
    """Vectorized :func:`warp_keypoint` for an ``(n, 2)`` array."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    if np.any((x < 0) | (x >= flow.width) | (y < 0) | (y >= flow.height)):
        raise InvalidInputError("keypoint outside the source image")
    dx, dy = _lookup(flow, x, y)
    return np.stack([x + dx, y + dy], axis=1)


def save_flow(path: str | Path, flow: FlowField) -> None:
    body = np.stack([flow.dx, flow.dy], axis=-1).astype("<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(b"FLOW", flow.width, flow.height) + body)


def load_flow(path: str | Path) -> FlowField:
    raw = Path(path).read_bytes()
    if raw[:4] != b"FLOW":
        raise FormatError("bad magic, expected b'FLOW'", offset=0)
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", offset=len(raw))
    _, W, H = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 8 * W * H
    if len(raw) != expected:
        raise FormatError(f"flow payload size mismatch: expected {expected} bytes", offset=min(len(raw), expected))
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(H, W, 2).astype(np.float64)
    return FlowField(data[..., 0].copy(), data[..., 1].copy(), np.ones((H, W), dtype=bool))
