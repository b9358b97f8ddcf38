"""Match sampling, hinge loss and mini-batch SGD over image pairs.

Each image pair is one mini-batch.  For every source proposal with a known
ground-truth target box, targets overlapping that box by more than
``T_pos`` are positives; the same number of hardest negatives (highest
appearance similarity among targets overlapping it by less than ``T_neg``)
are added.  The loss is a two-margin hinge on the (optionally bin-mean
normalized) score, plus ``lambda * ||W||^2``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .embedding import EmbeddingParams, ScoreMode, init_params
from .errors import InvalidInputError, NumericError
from .features import FeatureGrid, roi_pool_many
from .geometry import BinGrid, iou_matrix, validate_boxes
from .scoring import MatchSet, build_match_set, compute_similarities, score_gradient, score_sparse

logger = logging.getLogger(__name__)

__all__ = [
    "SampleConfig",
    "TrainConfig",
    "LabeledPair",
    "PreparedPair",
    "Samples",
    "prepare_pair",
    "sample_matches",
    "hinge_loss",
    "normalize_score",
    "pair_objective",
    "train",
    "TrainResult",
]


@dataclass(frozen=True)
class SampleConfig:
    t_pos: float = 0.6
    t_neg: float = 0.4

    def __post_init__(self) -> None:
        if not (0.0 <= self.t_neg <= self.t_pos <= 1.0):
            raise InvalidInputError("need 0 <= T_neg <= T_pos <= 1")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 0.0005
    epochs: int = 30
    seed: int = 0
    margin_pos: float = 0.7
    margin_neg: float = 0.3
    bin_normalize: bool = True
    mode: ScoreMode = ScoreMode.AG
    d_out: int = 64
    pool_size: int = 7
    sample: SampleConfig = field(default_factory=SampleConfig)
    bin_grid: BinGrid = field(default_factory=BinGrid)

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", ScoreMode.parse(self.mode))
        if not self.lr >= 0:
            raise InvalidInputError("learning rate must be non-negative")
        if not self.weight_decay >= 0:
            raise InvalidInputError("weight decay must be non-negative")
        if not (0.0 <= self.margin_neg < self.margin_pos <= 1.0):
            raise InvalidInputError("need 0 <= margin_neg < margin_pos <= 1")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be non-negative")


@dataclass
class LabeledPair:
    """Two feature grids, their proposals, and ground truth.

    ``gt_src`` lists source-proposal indices with a known target box
    ``gt_boxes[k]``; ``keypoints`` rows are ``(src_x, src_y, tgt_x, tgt_y)``.
    """

    src_grid: FeatureGrid
    tgt_grid: FeatureGrid
    src_props: np.ndarray
    tgt_props: np.ndarray
    gt_src: np.ndarray
    gt_boxes: np.ndarray
    keypoints: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    name: str = ""

    def __post_init__(self) -> None:
        self.src_props = validate_boxes(self.src_props)
        self.tgt_props = validate_boxes(self.tgt_props)
        self.gt_src = np.asarray(self.gt_src, dtype=np.int64).reshape(-1)
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.gt_boxes):
            validate_boxes(self.gt_boxes)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 4)
        if len(self.gt_src) != len(self.gt_boxes):
            raise InvalidInputError("gt_src and gt_boxes differ in length")
        if np.any((self.gt_src < 0) | (self.gt_src >= len(self.src_props))):
            raise InvalidInputError("ground-truth source index out of range")

    @property
    def size_a(self):
        return self.src_grid.image_size

    @property
    def size_b(self):
        return self.tgt_grid.image_size


@dataclass
class PreparedPair:
    """Everything about a pair that does not depend on the parameters."""

    pair: LabeledPair
    raw_a: np.ndarray
    raw_b: np.ndarray
    ms: MatchSet
    gt_iou: np.ndarray  # (n_gt, p_b)


def prepare_pair(pair: LabeledPair, pool_size: int = 7, bin_grid: BinGrid | None = None) -> PreparedPair:
    raw_a = roi_pool_many(pair.src_grid, pair.src_props, pool_size)
    raw_b = roi_pool_many(pair.tgt_grid, pair.tgt_props, pool_size)
    ms = build_match_set(pair.src_props, pair.tgt_props, pair.size_a, pair.size_b, bin_grid)
    gt_iou = (
        iou_matrix(pair.gt_boxes, pair.tgt_props) if len(pair.gt_boxes) else np.zeros((0, len(pair.tgt_props)))
    )
    return PreparedPair(pair, raw_a, raw_b, ms, gt_iou)


@dataclass
class Samples:
    src: np.ndarray
    tgt: np.ndarray
    label: np.ndarray  # 1 positive, 0 negative

    def __len__(self) -> int:
        return len(self.src)


def sample_matches(
    pair: LabeledPair | PreparedPair, cfg: SampleConfig, F: np.ndarray
) -> Samples:
    """Positives above ``T_pos`` and as many hard negatives below ``T_neg``.

    ``F`` is the ``p_a x p_b`` appearance-similarity matrix.  Targets in
    ``[T_neg, T_pos]`` are left unlabeled.  Equal similarities keep the
    lower target index.
    """
    if isinstance(pair, PreparedPair):
        gt_src, gt_iou = pair.pair.gt_src, pair.gt_iou
    else:
        if len(pair.gt_src) == 0:
            raise InvalidInputError("pair has no ground-truth correspondences")
        gt_src, gt_iou = pair.gt_src, iou_matrix(pair.gt_boxes, pair.tgt_props)
    if len(gt_src) == 0:
        raise InvalidInputError("pair has no ground-truth correspondences")
    src, tgt, lab = [], [], []
    for row, i in enumerate(gt_src):
        overlap = gt_iou[row]
        pos = np.flatnonzero(overlap > cfg.t_pos)
        if len(pos) == 0:
            continue
        neg_pool = np.flatnonzero(overlap < cfg.t_neg)
        order = np.argsort(-F[i, neg_pool], kind="stable")
        neg = np.sort(neg_pool[order[: len(pos)]])
        src.append(np.full(len(pos) + len(neg), i, dtype=np.int64))
        tgt.append(np.concatenate([pos, neg]))
        lab.append(np.concatenate([np.ones(len(pos), np.int8), np.zeros(len(neg), np.int8)]))
    if not src:
        return Samples(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int8))
    return Samples(np.concatenate(src), np.concatenate(tgt), np.concatenate(lab))


def hinge_loss(z_norm, y, margin_pos: float = 0.7, margin_neg: float = 0.3):
    """Two-margin hinge loss and its derivative w.r.t. ``z_norm``.

    ``l = y * max(0, mu+ - z) + (1 - y) * max(0, z - mu-)``.  Works on
    scalars or arrays; the derivative is 0 at the kinks.
    """
    z = np.asarray(z_norm, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    loss = y * np.maximum(0.0, margin_pos - z) + (1.0 - y) * np.maximum(0.0, z - margin_neg)
    grad = -y * (z < margin_pos) + (1.0 - y) * (z > margin_neg)
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad.astype(np.float64)


def normalize_score(z, bin_size, flag: bool = True):
    """Mean-vote form ``z / bin_size`` used inside the loss only."""
    if not flag:
        return z
    bin_size = np.asarray(bin_size)
    if np.any(bin_size < 1):
        raise InvalidInputError("bin size must be >= 1")
    out = np.asarray(z, dtype=np.float64) / bin_size
    return float(out) if out.ndim == 0 else out


def pair_objective(
    prep: PreparedPair, params: EmbeddingParams, cfg: TrainConfig, with_grad: bool = True
) -> tuple[float, float, list[np.ndarray] | None, int]:
    """Hinge data term and full objective for one pair.

    Returns ``(data_loss, objective, grads, n_samples)`` where ``grads``
    includes the weight-decay term.  Samples are drawn from the current
    similarities, so ``objective`` is piecewise smooth in the parameters.
    """
    mode = cfg.mode
    ms = prep.ms
    fwd, F, _ = compute_similarities(params, prep.raw_a, prep.raw_b, ms)
    z = score_sparse(ms, mode)
    samples = sample_matches(prep, cfg.sample, F)
    p_b = len(ms.tgt_boxes)
    m = samples.src * p_b + samples.tgt
    if mode.votes and cfg.bin_normalize:
        size = ms.bin_sizes[ms.bin_ids[m]].astype(np.float64)
    else:
        # mode A has no voting: every match is its own bin
        size = np.ones(len(m))
    zn = normalize_score(z[m], size, True)
    loss, dl = hinge_loss(zn, samples.label, cfg.margin_pos, cfg.margin_neg)
    data = float(np.sum(loss))
    reg = cfg.weight_decay * params.sq_norm()
    if not with_grad:
        return data, data + reg, None, len(m)
    dz = np.zeros(len(ms))
    dz[m] = dl / size
    grads = score_gradient(ms, mode, dz, fwd)
    grads = [g + 2.0 * cfg.weight_decay * W for g, W in zip(grads, params.matrices())]
    return data, data + reg, grads, len(m)


@dataclass
class TrainResult:
    params: EmbeddingParams
    initial: EmbeddingParams
    log: list[tuple[int, int, float]]  # (epoch, pair index, mean hinge loss per sample)

    def epoch_means(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for epoch, _, loss in self.log:
            by_epoch.setdefault(epoch, []).append(loss)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def train(
    pairs: Sequence[LabeledPair | PreparedPair],
    cfg: TrainConfig,
    params: EmbeddingParams | None = None,
    init_rng: np.random.Generator | None = None,
    shuffle_rng: np.random.Generator | None = None,
    callback: Callable[[int, int, float], None] | None = None,
) -> TrainResult:
    """Mini-batch SGD, one image pair per step.

    Raw pooled features and bins are computed once per pair.  Pair order is
    reshuffled every epoch.  Raises :class:`NumericError` on a non-finite
    loss.
    """
    if not pairs:
        raise InvalidInputError("need at least one labeled pair")
    preps = [p if isinstance(p, PreparedPair) else prepare_pair(p, cfg.pool_size, cfg.bin_grid) for p in pairs]
    if params is None:
        init_rng = init_rng if init_rng is not None else np.random.default_rng(cfg.seed)
        params = init_params(preps[0].raw_a.shape[1], cfg.d_out, cfg.mode, init_rng)
    elif params.mode is not cfg.mode:
        raise InvalidInputError(f"parameters are for mode {params.mode.value}, config says {cfg.mode.value}")
    shuffle_rng = shuffle_rng if shuffle_rng is not None else np.random.default_rng(cfg.seed + 1)
    initial = params.copy()
    params = params.copy()
    log: list[tuple[int, int, float]] = []
    for epoch in range(cfg.epochs):
        for k in shuffle_rng.permutation(len(preps)):
            data, _, grads, n = pair_objective(preps[k], params, cfg)
            mean = data / n if n else 0.0
            if not math.isfinite(data) or not all(np.all(np.isfinite(g)) for g in grads):
                raise NumericError(f"non-finite loss at epoch {epoch}, pair {k}")
            for W, g in zip(params.matrices(), grads):
                W -= cfg.lr * g
            log.append((epoch, int(k), mean))
            if callback is not None:
                callback(epoch, int(k), mean)
        logger.debug("epoch %d mean loss %.6f", epoch, np.mean([l for e, _, l in log if e == epoch]))
    return TrainResult(params, initial, log)
