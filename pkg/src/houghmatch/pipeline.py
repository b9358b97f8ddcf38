"""Pair-level matching and evaluation on top of the core modules."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from .embedding import EmbeddingParams, ScoreMode
from .errors import InvalidInputError
from .flow import FlowField, densify
from .learning import LabeledPair, PreparedPair, prepare_pair
from .metrics import EvalReport, PairResult, aggregate, default_taus, miou_curve, pck_curve, pcr_curve, rowwise_iou
from .scoring import BestMatches, MatchSet, best_matches, compute_similarities, score_sparse

__all__ = ["score_pair", "oracle_scores", "match_pair", "pair_flow", "evaluate_pair", "evaluate", "prepare_all"]


def prepare_all(pairs: Sequence[LabeledPair], pool_size: int = 7, bin_grid=None, threads: int = 1) -> list[PreparedPair]:
    if threads <= 1:
        return [prepare_pair(p, pool_size, bin_grid) for p in pairs]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(lambda p: prepare_pair(p, pool_size, bin_grid), pairs))


def score_pair(prep: PreparedPair, params: EmbeddingParams, mode: ScoreMode | str | None = None) -> MatchSet:
    """Similarities and scores for every candidate match of a prepared pair.

    ``mode`` defaults to the parameters' own mode.  AG and A can both be run on
    AG parameters; AG+ needs a geometry stream.
    """
    mode = params.mode if mode is None else ScoreMode.parse(mode)
    if mode is ScoreMode.AG_PLUS and params.W_g is None:
        raise InvalidInputError("AG+ scoring needs a checkpoint with a geometry embedding")
    if prep.raw_a.shape[1] != params.d_in:
        raise InvalidInputError(f"checkpoint expects d_in={params.d_in}, features give {prep.raw_a.shape[1]}")
    ms = prep.ms
    compute_similarities(params, prep.raw_a, prep.raw_b, ms)
    score_sparse(ms, mode)
    return ms


def oracle_scores(prep: PreparedPair) -> np.ndarray:
    """Per-match IoU with the true target box (0 for sources without one)."""
    ms = prep.ms
    p_a, p_b = len(ms.src_boxes), len(ms.tgt_boxes)
    Z = np.zeros((p_a, p_b))
    if len(prep.pair.gt_src):
        Z[prep.pair.gt_src] = prep.gt_iou
    return Z[ms.src_idx, ms.tgt_idx]


def match_pair(
    prep: PreparedPair, params: EmbeddingParams | None, mode: ScoreMode | str | None = None
) -> tuple[MatchSet, BestMatches]:
    if params is None:
        ms = prep.ms
        return ms, best_matches(ms, oracle_scores(prep))
    ms = score_pair(prep, params, mode)
    return ms, best_matches(ms)


def pair_flow(prep: PreparedPair, best: BestMatches) -> FlowField:
    pair = prep.pair
    return densify(
        pair.src_props[best.src], pair.tgt_props[best.tgt], best.score, pair.size_a, pair.size_b, src_ids=best.src
    )


def evaluate_pair(
    prep: PreparedPair,
    params: EmbeddingParams | None,
    mode: ScoreMode | str | None = None,
    taus: np.ndarray | None = None,
    K: int = 100,
) -> PairResult:
    """PCK, PCR and mIoU curves for one pair; ``params=None`` uses oracle scores."""
    taus = default_taus() if taus is None else taus
    pair = prep.pair
    _, best = match_pair(prep, params, mode)
    choice = np.full(len(pair.src_props), -1, dtype=np.int64)
    choice[best.src] = best.tgt
    pred = pair.tgt_props[choice[pair.gt_src]]
    pcr = pcr_curve(pred, pair.gt_boxes, taus)
    # mIoU: best matches of annotated sources, by score descending
    truth_row = np.full(len(pair.src_props), -1, dtype=np.int64)
    truth_row[pair.gt_src] = np.arange(len(pair.gt_src))
    keep = truth_row[best.src] >= 0
    ious = rowwise_iou(pair.tgt_props[best.tgt[keep]], pair.gt_boxes[truth_row[best.src[keep]]])
    miou = miou_curve(ious, K)
    if len(pair.keypoints):
        pck = pck_curve(pair_flow(prep, best), pair.keypoints, pair.size_b, taus)
    else:
        pck = np.zeros(len(taus))
    return PairResult(pair.name, pck, pcr, miou)


def evaluate(
    preps: Sequence[PreparedPair],
    params: EmbeddingParams | None,
    mode: ScoreMode | str | None = None,
    taus: np.ndarray | None = None,
    K: int = 100,
    threads: int = 1,
) -> EvalReport:
    """Per-pair curves averaged over pairs; ``threads`` workers evaluate pairs concurrently."""
    taus = default_taus() if taus is None else np.asarray(taus)
    run = lambda p: evaluate_pair(p, params, mode, taus, K)
    if threads <= 1:
        results = [run(p) for p in preps]
    else:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(run, preps))
    return aggregate(results, taus)

