"""Small builders for randomized test instances."""

import numpy as np

from houghmatch.geometry import ImageSize
from houghmatch.scoring import build_match_set


def random_boxes(rng, n, size=100.0):
    xy = rng.uniform(0, size * 0.7, (n, 2))
    wh = rng.uniform(size * 0.05, size * 0.3, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def random_match_set(rng, n, n_bins=None, with_fg=True, order=None):
    """A MatchSet with ``n`` matches, random bins and random similarities.

    ``order`` permutes the match list; bins and similarities travel with
    their matches, so ``z`` must be permuted the same way.
    """
    p_a = int(np.ceil(np.sqrt(n)))
    p_b = int(np.ceil(n / p_a))
    size = ImageSize(100.0, 100.0)
    src_idx, tgt_idx = np.divmod(np.arange(n), p_b)
    n_bins = n_bins or max(1, int(rng.integers(1, n + 1)))
    labels = rng.integers(0, n_bins, n)
    f = rng.uniform(0, 1, n) * (rng.uniform(size=n) > 0.1)
    fg = rng.uniform(0, 1, n)
    if order is not None:
        src_idx, tgt_idx, labels, f, fg = src_idx[order], tgt_idx[order], labels[order], f[order], fg[order]
    ms = build_match_set(random_boxes(rng, p_a), random_boxes(rng, p_b), size, size, None, src_idx, tgt_idx)
    ms = ms.with_bins(labels)
    ms.f = f
    ms.fg = fg if with_fg else None
    return ms
