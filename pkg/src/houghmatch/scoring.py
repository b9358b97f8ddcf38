"""Match scores with offset-bin voting.

For a match ``m`` with appearance similarity ``f(m)`` the voting score is
``z(m) = f(m) * S(h(m))`` where ``S(x)`` sums the votes of every candidate
match in bin ``x`` (``f`` for AG, the geometry-stream similarity ``f_g`` for
AG+).  Mode A skips voting: ``z = f``.

Two implementations are kept side by side:

* :func:`score_sparse` -- one accumulation per bin, shared by all members.
* :func:`score_dense` -- the explicit ``f * (K @ g)`` product with
  ``K[m, m'] = [h(m) == h(m')]``, evaluated row by row.  Used as an oracle.

Both accumulate in increasing match index, so they agree bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import (
    EmbeddedSet,
    EmbeddingParams,
    ScoreMode,
    embed_many,
    similarity_matrix,
    similarity_matrix_backward,
)
from .errors import InvalidInputError
from .geometry import BinGrid, ImageSize, assign_bins, pairwise_offsets

__all__ = [
    "ScoreMode",
    "MatchSet",
    "BestMatches",
    "Forward",
    "build_match_set",
    "top_k_candidates",
    "compute_similarities",
    "score_sparse",
    "score_dense",
    "score_backward",
    "score_backward_dense",
    "score_gradient",
    "best_matches",
    "write_match_dump",
]

UNLABELED = -1

# Dense oracle works on row blocks of roughly this many entries.
_DENSE_BLOCK = 1 << 22


@dataclass
class MatchSet:
    """Candidate matches between two proposal sets, with their bin index.

    ``bin_ids`` numbers the non-empty bins ``0..n_bins-1`` in increasing
    bin-key order; members of a bin keep their match order.
    """

    src_boxes: np.ndarray
    tgt_boxes: np.ndarray
    size_a: ImageSize
    size_b: ImageSize
    grid: BinGrid
    src_idx: np.ndarray
    tgt_idx: np.ndarray
    offsets: np.ndarray
    bins: np.ndarray
    bin_ids: np.ndarray
    bin_keys: np.ndarray
    f: np.ndarray | None = None
    fg: np.ndarray | None = None
    z: np.ndarray | None = None
    bin_sums: np.ndarray | None = None
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))

    def __len__(self) -> int:
        return len(self.src_idx)

    @property
    def n_bins(self) -> int:
        return len(self.bin_keys)

    @property
    def bin_sizes(self) -> np.ndarray:
        return np.bincount(self.bin_ids, minlength=self.n_bins)

    @property
    def is_dense(self) -> bool:
        p_b = len(self.tgt_boxes)
        return len(self) == len(self.src_boxes) * p_b and np.array_equal(
            self.src_idx * p_b + self.tgt_idx, np.arange(len(self))
        )

    def members(self, b: int) -> np.ndarray:
        """Match indices in bin ``b`` (ascending)."""
        return np.flatnonzero(self.bin_ids == b)

    def bin_index(self) -> dict[tuple[int, int, int, int], np.ndarray]:
        """Map each non-empty offset bin to its member matches."""
        order = np.argsort(self.bin_ids, kind="stable")
        bounds = np.searchsorted(self.bin_ids[order], np.arange(self.n_bins + 1))
        decoded = self.grid.decode(self.bin_keys)
        return {
            tuple(int(v) for v in decoded[b]): order[bounds[b] : bounds[b + 1]] for b in range(self.n_bins)
        }

    def with_bins(self, bin_ids: np.ndarray) -> "MatchSet":
        """Copy with an arbitrary bin assignment (used by tests and oracles)."""
        keys, ids = np.unique(np.asarray(bin_ids, dtype=np.int64), return_inverse=True)
        out = MatchSet(**{**self.__dict__})
        out.bin_ids = ids.astype(np.int64)
        out.bin_keys = keys
        out.bins = np.zeros((len(ids), 4), dtype=np.int64)
        return out


def build_match_set(
    src_boxes: np.ndarray,
    tgt_boxes: np.ndarray,
    size_a: ImageSize,
    size_b: ImageSize,
    grid: BinGrid | None = None,
    src_idx: np.ndarray | None = None,
    tgt_idx: np.ndarray | None = None,
) -> MatchSet:
    """Bin every candidate match; all ``p_a x p_b`` pairs unless indices are given."""
    grid = grid or BinGrid()
    src_boxes = np.asarray(src_boxes, dtype=np.float64).reshape(-1, 4)
    tgt_boxes = np.asarray(tgt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(src_boxes) == 0 or len(tgt_boxes) == 0:
        raise InvalidInputError("both proposal sets must be non-empty")
    if src_idx is None:
        src_idx, tgt_idx = np.divmod(np.arange(len(src_boxes) * len(tgt_boxes)), len(tgt_boxes))
    src_idx = np.asarray(src_idx, dtype=np.int64)
    tgt_idx = np.asarray(tgt_idx, dtype=np.int64)
    offs = pairwise_offsets(src_boxes, tgt_boxes, size_a, size_b, src_idx, tgt_idx)
    bins = assign_bins(offs, grid)
    keys, ids = np.unique(grid.encode(bins), return_inverse=True)
    return MatchSet(
        src_boxes,
        tgt_boxes,
        size_a,
        size_b,
        grid,
        src_idx,
        tgt_idx,
        offs,
        bins,
        ids.astype(np.int64).reshape(-1),
        keys,
        labels=np.full(len(src_idx), UNLABELED, dtype=np.int8),
    )


def top_k_candidates(F: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Optional prefilter: the ``k`` most similar targets of each source.

    Ties keep the lower target index.  Returned pairs are in source-major,
    target-ascending order.
    """
    p_a, p_b = F.shape
    k = min(k, p_b)
    order = np.argsort(-F, axis=1, kind="stable")[:, :k]
    order.sort(axis=1)
    return np.repeat(np.arange(p_a), k), order.reshape(-1)


@dataclass
class Forward:
    """Cached embeddings and raw dot products for one image pair."""

    params: EmbeddingParams
    ea: EmbeddedSet
    eb: EmbeddedSet
    D: np.ndarray
    ega: EmbeddedSet | None = None
    egb: EmbeddedSet | None = None
    Dg: np.ndarray | None = None


def compute_similarities(
    params: EmbeddingParams, raw_a: np.ndarray, raw_b: np.ndarray, ms: MatchSet | None = None
) -> tuple[Forward, np.ndarray, np.ndarray | None]:
    """Embed both proposal sets and return ``(forward, F, F_g)``.

    ``F`` is the ``p_a x p_b`` rectified-cosine matrix.  When ``ms`` is given
    its ``f``/``fg`` fields are filled from the matrices.
    """
    ea, eb = embed_many(raw_a, params.W_a), embed_many(raw_b, params.W_a)
    F, D = similarity_matrix(ea, eb)
    fwd = Forward(params, ea, eb, D)
    Fg = None
    if params.W_g is not None:
        fwd.ega, fwd.egb = embed_many(raw_a, params.W_g), embed_many(raw_b, params.W_g)
        Fg, fwd.Dg = similarity_matrix(fwd.ega, fwd.egb)
    if ms is not None:
        ms.f = F[ms.src_idx, ms.tgt_idx]
        ms.fg = None if Fg is None else Fg[ms.src_idx, ms.tgt_idx]
    return fwd, F, Fg


def _votes(ms: MatchSet, mode: ScoreMode) -> np.ndarray:
    if ms.f is None:
        raise InvalidInputError("similarities have not been computed for this match set")
    if mode is ScoreMode.AG_PLUS:
        if ms.fg is None:
            raise InvalidInputError("AG+ scoring requires geometry-stream similarities")
        return ms.fg
    return ms.f


def score_sparse(ms: MatchSet, mode: ScoreMode | str = ScoreMode.AG) -> np.ndarray:
    """Bin-shared scores; sets ``ms.z`` and ``ms.bin_sums``."""
    mode = ScoreMode.parse(mode)
    g = _votes(ms, mode)
    if mode is ScoreMode.A:
        ms.bin_sums = None
        ms.z = ms.f.copy()
        return ms.z
    # bincount accumulates in increasing match index within each bin
    S = np.bincount(ms.bin_ids, weights=g, minlength=ms.n_bins)
    ms.bin_sums = S
    ms.z = ms.f * S[ms.bin_ids]
    return ms.z


def _dense_kernel_rows(bin_ids: np.ndarray):
    n = len(bin_ids)
    step = max(1, _DENSE_BLOCK // max(n, 1))
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        yield lo, hi, bin_ids[lo:hi, None] == bin_ids[None, :]


def score_dense(ms: MatchSet, mode: ScoreMode | str = ScoreMode.AG) -> np.ndarray:
    """Scores from the explicit kernel matrix, ``O(n^2)`` time.

    Each row ``K[m] . g`` is summed sequentially in match order (zeros
    included), which reproduces :func:`score_sparse` exactly.
    """
    mode = ScoreMode.parse(mode)
    g = _votes(ms, mode)
    if mode is ScoreMode.A:
        return ms.f.copy()
    Kg = np.empty(len(ms))
    for lo, hi, K in _dense_kernel_rows(ms.bin_ids):
        Kg[lo:hi] = np.cumsum(np.where(K, g[None, :], 0.0), axis=1)[:, -1]
    return ms.f * Kg


def score_backward(
    ms: MatchSet, mode: ScoreMode | str, dz: np.ndarray
) -> tuple[np.ndarray, np.ndarray | None]:
    """Per-match gradients ``(dE/df, dE/df_g)`` given ``dE/dz``.

    With ``S = sum_{bin} g`` and ``T = sum_{bin} dz * f``::

        dE/df(m)   = dz(m) * S(h(m)) + [AG] T(h(m))
        dE/df_g(m) = T(h(m))                         (AG+)
    """
    mode = ScoreMode.parse(mode)
    dz = np.asarray(dz, dtype=np.float64)
    if mode is ScoreMode.A:
        return dz.copy(), None
    g = _votes(ms, mode)
    S = ms.bin_sums if ms.bin_sums is not None else np.bincount(ms.bin_ids, weights=g, minlength=ms.n_bins)
    T = np.bincount(ms.bin_ids, weights=dz * ms.f, minlength=ms.n_bins)
    df = dz * S[ms.bin_ids]
    if mode is ScoreMode.AG:
        return df + T[ms.bin_ids], None
    return df, T[ms.bin_ids]


def score_backward_dense(
    ms: MatchSet, mode: ScoreMode | str, dz: np.ndarray
) -> tuple[np.ndarray, np.ndarray | None]:
    """Oracle for :func:`score_backward` using the full kernel matrix."""
    mode = ScoreMode.parse(mode)
    dz = np.asarray(dz, dtype=np.float64)
    if mode is ScoreMode.A:
        return dz.copy(), None
    g = _votes(ms, mode)
    Kg = np.empty(len(ms))
    Kw = np.empty(len(ms))
    w = dz * ms.f
    for lo, hi, K in _dense_kernel_rows(ms.bin_ids):
        Kf = K.astype(np.float64)
        Kg[lo:hi] = Kf @ g
        Kw[lo:hi] = Kf @ w
    if mode is ScoreMode.AG:
        return dz * Kg + Kw, None
    return dz * Kg, Kw


def _to_matrix(ms: MatchSet, values: np.ndarray) -> np.ndarray:
    p_a, p_b = len(ms.src_boxes), len(ms.tgt_boxes)
    flat = ms.src_idx * p_b + ms.tgt_idx
    return np.bincount(flat, weights=values, minlength=p_a * p_b).reshape(p_a, p_b)


def score_gradient(
    ms: MatchSet, mode: ScoreMode | str, dz: np.ndarray, fwd: Forward, dense: bool = False
) -> list[np.ndarray]:
    """Gradient of ``sum(dz * z)`` w.r.t. the embedding matrices.

    Returns one array per entry of ``fwd.params.matrices()``.
    """
    mode = ScoreMode.parse(mode)
    df, dfg = (score_backward_dense if dense else score_backward)(ms, mode, dz)
    grads = [similarity_matrix_backward(fwd.ea, fwd.eb, fwd.D, _to_matrix(ms, df))]
    if fwd.params.W_g is not None:
        if dfg is None:
            grads.append(np.zeros_like(fwd.params.W_g))
        else:
            grads.append(similarity_matrix_backward(fwd.ega, fwd.egb, fwd.Dg, _to_matrix(ms, dfg)))
    return grads


@dataclass
class BestMatches:
    """One match per source proposal, sorted by score descending."""

    src: np.ndarray
    tgt: np.ndarray
    score: np.ndarray
    match: np.ndarray  # index into the MatchSet

    def __len__(self) -> int:
        return len(self.src)


def best_matches(ms: MatchSet, scores: np.ndarray | None = None) -> BestMatches:
    """Per source proposal, the target with the highest score.

    Ties go to the lowest target index; the result is ordered by score
    descending, then source index ascending.
    """
    z = ms.z if scores is None else np.asarray(scores, dtype=np.float64)
    if z is None:
        raise InvalidInputError("scores have not been computed")
    if len(ms) == 0 or len(ms.tgt_boxes) == 0:
        raise InvalidInputError("empty target set")
    order = np.lexsort((ms.tgt_idx, -z, ms.src_idx))
    first = np.ones(len(order), dtype=bool)
    first[1:] = ms.src_idx[order[1:]] != ms.src_idx[order[:-1]]
    pick = order[first]
    rank = np.lexsort((ms.src_idx[pick], -z[pick]))
    pick = pick[rank]
    return BestMatches(ms.src_idx[pick].copy(), ms.tgt_idx[pick].copy(), z[pick].copy(), pick)


def write_match_dump(path: str | Path, ms: MatchSet, rows: np.ndarray | None = None) -> None:
    """CSV ``src_idx,tgt_idx,f,fg,z,bin_itx,bin_ity,bin_isx,bin_isy,label``."""
    rows = np.arange(len(ms)) if rows is None else np.asarray(rows)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src_idx", "tgt_idx", "f", "fg", "z", "bin_itx", "bin_ity", "bin_isx", "bin_isy", "label"])
        for m in rows:
            fg = "" if ms.fg is None else repr(float(ms.fg[m]))
            label = "" if ms.labels[m] == UNLABELED else int(ms.labels[m])
            w.writerow(
                [
                    int(ms.src_idx[m]),
                    int(ms.tgt_idx[m]),
                    repr(float(ms.f[m])),
                    fg,
                    repr(float(ms.z[m])),
                    *(int(v) for v in ms.bins[m]),
                    label,
                ]
            )
