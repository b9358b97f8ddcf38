"""Seeded synthetic image pairs related by a known affine warp.

The source grid is box-filtered Gaussian noise.  The target grid resamples
the source through the inverse warp (bilinear, cell centers), so region
descriptors move with the warp.  A configurable number of *nuisance*
channels are drawn independently for the two images, and optional
observation noise is added to the target; these play the role of
instance-level appearance variation that an embedding has to learn to
ignore.

With ``repeat_period`` set, part of the texture repeats along x every
``repeat_period`` cells, and each object box gets a *twin* target proposal
shifted by one period.  Twins look alike but sit at the wrong offset, so
appearance alone cannot separate them from the true match while offset
voting can.

Transforms map source pixel coordinates to target pixel coordinates:
``q = M @ p + t`` with ``M`` 2x2 and ``t`` a 2-vector, stored as a 2x3 matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import InvalidInputError
from .features import FeatureGrid
from .geometry import ImageSize
from .learning import LabeledPair

__all__ = [
    "SynthConfig",
    "SynthPair",
    "generate_pair",
    "generate_pairs",
    "make_transform",
    "warp_points",
    "warp_box_hull",
    "ground_truth_for",
    "proposal_variants",
    "sliding_window_boxes",
    "uniform_random_boxes",
    "jitter_boxes",
    "with_proposals",
    "pair_seed",
]

WARP_KINDS = ("affine", "identity", "translation")
PROPOSAL_KINDS = ("gt_jitter", "sliding_window", "uniform_random")
# Named sub-streams of the run seed.
STREAM_DATASET = 0
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_PROPOSALS = 3


@dataclass(frozen=True)
class SynthConfig:
    height: int = 64
    width: int = 64
    channels: int = 16
    cell_size: int = 4
    nuisance_channels: int = 8
    nuisance_scale: float = 2.0
    target_noise: float = 0.3
    smooth_radius: int = 2
    repeat_period: int = 6
    repeat_mix: float = 0.5
    twin_proposals: bool = True
    warp: str = "affine"
    max_rotation_deg: float = 10.0
    min_scale: float = 0.85
    max_scale: float = 1.15
    max_translation: float = 0.08
    translation_px: tuple[float, float] = (10.0, 0.0)
    n_gt: int = 50
    n_jitter: int = 4
    n_proposals: int = 500
    n_keypoints: int = 20
    gt_size: tuple[float, float] = (0.12, 0.35)
    distractor_size: tuple[float, float] = (0.08, 0.5)
    jitter_center: float = 0.1
    jitter_scale: float = 0.2
    max_retries: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.height, self.width, self.channels, self.cell_size) < 1:
            raise InvalidInputError("grid dimensions and cell size must be >= 1")
        if not 0 <= self.nuisance_channels <= self.channels:
            raise InvalidInputError("nuisance_channels must lie in [0, channels]")
        if min(self.n_gt, self.n_jitter, self.n_proposals, self.n_keypoints, self.smooth_radius) < 0:
            raise InvalidInputError("counts must be non-negative")
        if self.repeat_period < 0 or not self.repeat_mix >= 0:
            raise InvalidInputError("repeat_period and repeat_mix must be non-negative")
        if self.warp not in WARP_KINDS:
            raise InvalidInputError(f"warp must be one of {WARP_KINDS}")
        if not (0 < self.min_scale <= self.max_scale):
            raise InvalidInputError("need 0 < min_scale <= max_scale")
        for lo, hi in (self.gt_size, self.distractor_size):
            if not (0 < lo <= hi <= 1):
                raise InvalidInputError("box size fractions must satisfy 0 < lo <= hi <= 1")
        if self.n_keypoints > 0 and self.n_gt == 0:
            raise InvalidInputError("keypoints are sampled inside ground-truth boxes; n_gt must be > 0")

    @property
    def image_size(self) -> ImageSize:
        return ImageSize(self.width * self.cell_size, self.height * self.cell_size)


@dataclass
class SynthPair:
    """A labeled pair plus its generating warp.

    ``object_src``/``object_tgt`` are the annotated object boxes in the two
    images (``object_tgt[k]`` is the warped hull of ``object_src[k]``).
    """

    pair: LabeledPair
    transform: np.ndarray  # (2, 3)
    seed: int
    index: int = 0
    object_src: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    object_tgt: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    config: SynthConfig | None = None
    # proposals made without reference to any object (random fill, twins)
    distractor_src: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    distractor_tgt: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def pair_seed(seed: int, index: int, stream: int = STREAM_DATASET) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(stream), int(index)])


def make_transform(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    size = cfg.image_size
    if cfg.warp == "identity":
        return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    if cfg.warp == "translation":
        tx, ty = cfg.translation_px
        return np.array([[1.0, 0.0, float(tx)], [0.0, 1.0, float(ty)]])
    theta = math.radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    scale = rng.uniform(cfg.min_scale, cfg.max_scale)
    shift = rng.uniform(-cfg.max_translation, cfg.max_translation, size=2) * [size.width, size.height]
    c, s = math.cos(theta), math.sin(theta)
    M = scale * np.array([[c, -s], [s, c]])
    center = np.array([size.width / 2, size.height / 2])
    t = center - M @ center + shift
    return np.column_stack([M, t])


def warp_points(A: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    return pts @ A[:, :2].T + A[:, 2]


def warp_box_hull(A: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Axis-aligned hull of each box's four corners under ``A``."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    corners = np.stack(
        [b[:, [0, 1]], b[:, [2, 1]], b[:, [0, 3]], b[:, [2, 3]]], axis=1
    )  # (n, 4, 2)
    w = corners @ A[:, :2].T + A[:, 2]
    return np.concatenate([w.min(axis=1), w.max(axis=1)], axis=1)


def _smooth_noise(rng: np.random.Generator, shape: tuple[int, int, int], radius: int) -> np.ndarray:
    x = rng.standard_normal(shape)
    if radius > 0:
        x = uniform_filter(x, size=(2 * radius + 1, 2 * radius + 1, 1), mode="reflect")
    x -= x.mean(axis=(0, 1), keepdims=True)
    std = x.std(axis=(0, 1), keepdims=True)
    return x / np.where(std > 0, std, 1.0)


def _periodic_noise(rng: np.random.Generator, shape: tuple[int, int, int], radius: int, period: int) -> np.ndarray:
    """Smooth noise that repeats every ``period`` columns."""
    H, W, C = shape
    x = rng.standard_normal((H, period, C))
    if radius > 0:
        x = uniform_filter(x, size=(2 * radius + 1, 2 * radius + 1, 1), mode=("reflect", "wrap", "reflect"))
    x = np.tile(x, (1, -(-W // period), 1))[:, :W]
    x -= x.mean(axis=(0, 1), keepdims=True)
    std = x.std(axis=(0, 1), keepdims=True)
    return x / np.where(std > 0, std, 1.0)


def _texture(rng: np.random.Generator, cfg: "SynthConfig") -> np.ndarray:
    shape = (cfg.height, cfg.width, cfg.channels)
    x = _smooth_noise(rng, shape, cfg.smooth_radius)
    if cfg.repeat_period:
        x = _periodic_noise(rng, shape, cfg.smooth_radius, cfg.repeat_period) + cfg.repeat_mix * x
        x /= math.sqrt(1.0 + cfg.repeat_mix**2)
    return x


def _twin_boxes(rng: np.random.Generator, cfg: "SynthConfig", A: np.ndarray, hulls: np.ndarray) -> np.ndarray:
    """Target hulls moved by one texture period, where they still fit."""
    shift = A[:, :2] @ np.array([cfg.repeat_period * cfg.cell_size, 0.0])
    sign = np.where(rng.uniform(size=len(hulls)) < 0.5, -1.0, 1.0)
    out = []
    for b, s in zip(hulls, sign):
        for direction in (s, -s):
            t = b + direction * np.concatenate([shift, shift])
            if _inside(t[None], cfg.image_size)[0]:
                out.append(t)
                break
    return np.array(out).reshape(-1, 4)


def _resample(src: np.ndarray, A: np.ndarray, cell: float, fill: np.ndarray) -> np.ndarray:
    """Bilinear sample ``src`` at ``A^{-1}`` of every target cell center."""
    H, W, _ = src.shape
    jj, ii = np.meshgrid(np.arange(W), np.arange(H))
    q = np.stack([(jj + 0.5) * cell, (ii + 0.5) * cell], axis=-1).reshape(-1, 2)
    Minv = np.linalg.inv(A[:, :2])
    p = (q - A[:, 2]) @ Minv.T
    u = p[:, 0] / cell - 0.5
    v = p[:, 1] / cell - 0.5
    inside = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    u0 = np.clip(np.floor(u), 0, W - 1).astype(np.int64)
    v0 = np.clip(np.floor(v), 0, H - 1).astype(np.int64)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    a = np.clip(u - u0, 0, 1)[:, None]
    b = np.clip(v - v0, 0, 1)[:, None]
    top = src[v0, u0] * (1 - a) + src[v0, u1] * a
    bot = src[v1, u0] * (1 - a) + src[v1, u1] * a
    out = top * (1 - b) + bot * b
    out = np.where(inside[:, None], out, fill.reshape(-1, src.shape[2]))
    return out.reshape(src.shape)


def _random_boxes(rng: np.random.Generator, n: int, size: ImageSize, frac: tuple[float, float]) -> np.ndarray:
    w = rng.uniform(frac[0], frac[1], n) * size.width
    h = rng.uniform(frac[0], frac[1], n) * size.height
    x0 = rng.uniform(0, 1, n) * (size.width - w)
    y0 = rng.uniform(0, 1, n) * (size.height - h)
    return np.stack([x0, y0, x0 + w, y0 + h], axis=1)


def _inside(boxes: np.ndarray, size: ImageSize) -> np.ndarray:
    return (boxes[:, 0] >= 0) & (boxes[:, 1] >= 0) & (boxes[:, 2] <= size.width) & (boxes[:, 3] <= size.height)


def _clip_boxes(boxes: np.ndarray, size: ImageSize, min_side: float = 1.0) -> np.ndarray:
    b = boxes.copy()
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, size.width)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, size.height)
    # keep a minimum extent so clipped boxes stay valid
    b[:, 2] = np.maximum(b[:, 2], np.minimum(b[:, 0] + min_side, size.width))
    b[:, 0] = np.minimum(b[:, 0], b[:, 2] - min_side)
    b[:, 3] = np.maximum(b[:, 3], np.minimum(b[:, 1] + min_side, size.height))
    b[:, 1] = np.minimum(b[:, 1], b[:, 3] - min_side)
    return b


def jitter_boxes(
    rng: np.random.Generator, boxes: np.ndarray, size: ImageSize, center: float = 0.1, scale: float = 0.2
) -> np.ndarray:
    """Perturb centers by up to ``center`` x box size and sides by up to ``scale``."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(b)
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    cx = 0.5 * (b[:, 0] + b[:, 2]) + rng.uniform(-center, center, n) * w
    cy = 0.5 * (b[:, 1] + b[:, 3]) + rng.uniform(-center, center, n) * h
    w = w * (1 + rng.uniform(-scale, scale, n))
    h = h * (1 + rng.uniform(-scale, scale, n))
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    if center == 0 and scale == 0:
        return b.copy()
    return _clip_boxes(out, size)


def ground_truth_for(
    A: np.ndarray, src_props: np.ndarray, size_b: ImageSize, min_visible: float = 0.5
) -> tuple[np.ndarray, np.ndarray]:
    """True target boxes for every source proposal whose warp stays visible.

    The target is the hull of the warped corners, clipped to the target
    image; proposals keeping less than ``min_visible`` of the hull area are
    left without ground truth.
    """
    hull = warp_box_hull(A, src_props)
    clipped = _clip_boxes(hull, size_b, min_side=0.0)
    area = lambda b: np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    keep = (area(clipped) >= min_visible * area(hull)) & (area(clipped) > 0)
    idx = np.flatnonzero(keep)
    return idx, clipped[idx]


def _sample_gt_boxes(rng: np.random.Generator, cfg: SynthConfig, A: np.ndarray) -> np.ndarray:
    size = cfg.image_size
    out = []
    tries = 0
    while len(out) < cfg.n_gt:
        tries += 1
        if tries > cfg.max_retries * max(cfg.n_gt, 1):
            raise InvalidInputError("could not place ground-truth boxes inside both images; retry cap exhausted")
        b = _random_boxes(rng, 1, size, cfg.gt_size)
        if _inside(warp_box_hull(A, b), size)[0]:
            out.append(b[0])
    return np.array(out).reshape(-1, 4)


def _sample_keypoints(rng: np.random.Generator, cfg: SynthConfig, A: np.ndarray, gt: np.ndarray) -> np.ndarray:
    size = cfg.image_size
    out = []
    tries = 0
    while len(out) < cfg.n_keypoints:
        tries += 1
        if tries > cfg.max_retries * max(cfg.n_keypoints, 1):
            raise InvalidInputError("could not place keypoints; retry cap exhausted")
        b = gt[rng.integers(len(gt))]
        p = np.array([rng.uniform(b[0], b[2]), rng.uniform(b[1], b[3])])
        q = warp_points(A, p)[0]
        if 0 <= p[0] < size.width and 0 <= p[1] < size.height and 0 <= q[0] < size.width and 0 <= q[1] < size.height:
            out.append(np.concatenate([p, q]))
    return np.array(out).reshape(-1, 4)


def generate_pair(cfg: SynthConfig, seed: int | None = None, index: int = 0) -> SynthPair:
    """Pair number ``index`` of the dataset seeded by ``seed`` (default ``cfg.seed``).

    Identical ``(cfg, seed, index)`` give bitwise-identical pairs.
    """
    seed = cfg.seed if seed is None else int(seed)
    rng = np.random.default_rng(pair_seed(seed, index))
    H, W, C = cfg.height, cfg.width, cfg.channels
    size = cfg.image_size
    A = make_transform(cfg, rng)

    n_inf = C - cfg.nuisance_channels
    src = _texture(rng, cfg)
    fill = _smooth_noise(rng, (H, W, C), cfg.smooth_radius)
    tgt = _resample(src, A, float(cfg.cell_size), fill)
    if cfg.nuisance_channels:
        src[..., n_inf:] *= cfg.nuisance_scale
        tgt[..., n_inf:] = cfg.nuisance_scale * _smooth_noise(rng, (H, W, cfg.nuisance_channels), cfg.smooth_radius)
    if cfg.target_noise > 0:
        tgt = tgt + cfg.target_noise * rng.standard_normal(tgt.shape)

    gt_src_boxes = _sample_gt_boxes(rng, cfg, A)
    gt_tgt_boxes = warp_box_hull(A, gt_src_boxes)
    n_src_fill = max(0, cfg.n_proposals - cfg.n_gt)
    src_props = np.concatenate([gt_src_boxes, _random_boxes(rng, n_src_fill, size, cfg.distractor_size)])
    jit = [gt_tgt_boxes]
    if cfg.n_jitter and cfg.n_gt:
        rep = np.repeat(gt_tgt_boxes, cfg.n_jitter, axis=0)
        jit.append(jitter_boxes(rng, rep, size, cfg.jitter_center, cfg.jitter_scale))
    if cfg.repeat_period and cfg.twin_proposals:
        jit.append(_twin_boxes(rng, cfg, A, gt_tgt_boxes))
    tgt_obj = np.concatenate(jit)
    n_tgt_fill = max(0, cfg.n_proposals - len(tgt_obj))
    tgt_props = np.concatenate([tgt_obj, _random_boxes(rng, n_tgt_fill, size, cfg.distractor_size)])
    n_twin = len(jit[-1]) if cfg.repeat_period and cfg.twin_proposals else 0
    src_distract = np.arange(len(src_props)) >= len(gt_src_boxes)
    tgt_distract = np.arange(len(tgt_props)) >= len(tgt_obj) - n_twin
    perm_src, perm_tgt = rng.permutation(len(src_props)), rng.permutation(len(tgt_props))
    src_props, src_distract = src_props[perm_src], src_distract[perm_src]
    tgt_props, tgt_distract = tgt_props[perm_tgt], tgt_distract[perm_tgt]

    kps = _sample_keypoints(rng, cfg, A, gt_src_boxes) if cfg.n_keypoints else np.zeros((0, 4))
    gt_idx, gt_boxes = ground_truth_for(A, src_props, size)
    cs = Fraction(cfg.cell_size)
    pair = LabeledPair(
        FeatureGrid(src.astype(np.float32), cs),
        FeatureGrid(tgt.astype(np.float32), cs),
        src_props,
        tgt_props,
        gt_idx,
        gt_boxes,
        kps,
        name=f"pair_{index:04d}",
    )
    return SynthPair(pair, A, seed, index, gt_src_boxes, gt_tgt_boxes, cfg, src_distract, tgt_distract)


def generate_pairs(cfg: SynthConfig, n: int, seed: int | None = None, offset: int = 0) -> list[SynthPair]:
    return [generate_pair(cfg, seed, offset + k) for k in range(n)]


def sliding_window_boxes(
    size: ImageSize, scales: tuple[float, ...] = (0.5,), grids: tuple[int, ...] | None = None, count: int | None = None
) -> np.ndarray:
    """Regular multi-scale window grid.

    Each scale ``s`` places square-proportioned windows of ``s`` x image size
    on a ``g x g`` lattice spanning the image.  With ``grids`` omitted the
    lattices are made as dense as possible without exceeding ``count``
    windows in total.
    """
    scales = tuple(float(s) for s in scales)
    if grids is None:
        if count is None:
            raise InvalidInputError("pass grids or count")

        def layout(d: float) -> list[int]:
            return [1 + math.ceil(d * (1 - s) / s) if s < 1 else 1 for s in scales]

        lo, hi = 0.0, 64.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if sum(g * g for g in layout(mid)) <= count:
                lo = mid
            else:
                hi = mid
        grids = tuple(layout(lo))
    out = []
    for s, g in zip(scales, grids):
        w, h = s * size.width, s * size.height
        xs = np.linspace(0, size.width - w, g) if g > 1 else np.array([(size.width - w) / 2])
        ys = np.linspace(0, size.height - h, g) if g > 1 else np.array([(size.height - h) / 2])
        for y in ys:
            for x in xs:
                out.append([x, y, x + w, y + h])
    return np.array(out, dtype=np.float64).reshape(-1, 4)


def uniform_random_boxes(
    rng: np.random.Generator, count: int, size: ImageSize, frac: tuple[float, float] = (0.08, 0.5)
) -> np.ndarray:
    return _random_boxes(rng, count, size, frac)


def proposal_variants(
    sp: SynthPair,
    kind: str,
    count: int,
    side: str = "source",
    rng: np.random.Generator | None = None,
    scales: tuple[float, ...] = (0.15, 0.25, 0.35, 0.5),
) -> np.ndarray:
    """Alternative proposal sets for one side of a synthetic pair.

    ``gt_jitter`` jitters that side's ground-truth object boxes (each box once
    verbatim, then ``n_jitter`` perturbed copies) and fills up to ``count``
    with random boxes; ``sliding_window`` is a regular multi-scale grid;
    ``uniform_random`` draws boxes i.i.d.
    """
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    if kind not in PROPOSAL_KINDS:
        raise InvalidInputError(f"unknown proposal kind {kind!r}; expected one of {PROPOSAL_KINDS}")
    cfg = sp.config or SynthConfig()
    rng = rng if rng is not None else np.random.default_rng(pair_seed(sp.seed, sp.index, STREAM_PROPOSALS))
    size = sp.pair.size_a if side == "source" else sp.pair.size_b
    if kind == "sliding_window":
        return sliding_window_boxes(size, scales, count=count)
    if kind == "uniform_random":
        return uniform_random_boxes(rng, count, size, cfg.distractor_size)
    gt = sp.object_src if side == "source" else sp.object_tgt
    parts = [gt]
    if cfg.n_jitter:
        parts.append(jitter_boxes(rng, np.repeat(gt, cfg.n_jitter, axis=0), size, cfg.jitter_center, cfg.jitter_scale))
    obj = np.concatenate(parts)[:count]
    fill = _random_boxes(rng, count - len(obj), size, cfg.distractor_size)
    return np.concatenate([obj, fill])


def with_proposals(sp: SynthPair, src_props: np.ndarray, tgt_props: np.ndarray) -> SynthPair:
    """Same grids and warp with new proposal sets; ground truth recomputed.

    The distractor masks are dropped since they describe the old proposals.
    """
    gt_idx, gt_boxes = ground_truth_for(sp.transform, src_props, sp.pair.size_b)
    pair = LabeledPair(
        sp.pair.src_grid, sp.pair.tgt_grid, src_props, tgt_props, gt_idx, gt_boxes, sp.pair.keypoints, sp.pair.name
    )
    empty = np.zeros(0, dtype=bool)
    return replace(sp, pair=pair, distractor_src=empty, distractor_tgt=empty)
