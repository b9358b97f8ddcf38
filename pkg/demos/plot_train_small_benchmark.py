"""
Training an embedding on synthetic pairs
========================================

Generates a small seeded benchmark of feature-grid pairs related by affine
warps, trains the appearance-only and the voting model for a few epochs,
and compares region and keypoint accuracy on held-out pairs.  Sizes are
kept small so the script runs in seconds.
"""

from dataclasses import replace

import numpy as np

from houghmatch.embedding import init_params
from houghmatch.learning import TrainConfig, prepare_pair, train
from houghmatch.pipeline import evaluate
from houghmatch.synthbench import SynthConfig, generate_pairs

cfg = replace(SynthConfig(), n_proposals=200, n_gt=30)
train_pairs = [prepare_pair(sp.pair) for sp in generate_pairs(cfg, 12, seed=1)]
test_pairs = [prepare_pair(sp.pair) for sp in generate_pairs(cfg, 5, seed=1, offset=1000)]

###############################################################################
# Ground-truth scores give an upper bound for these proposals.

print("oracle PCR AuC %.3f" % evaluate(test_pairs, None).auc)

###############################################################################
# Each mode starts from the same random projection.

d_in = train_pairs[0].raw_a.shape[1]
for mode in ("A", "AG"):
    init = init_params(d_in, 32, mode, np.random.default_rng(0))
    before = evaluate(test_pairs, init, mode)
    result = train(train_pairs, TrainConfig(mode=mode, epochs=8, d_out=32), params=init)
    after = evaluate(test_pairs, result.params, mode)
    print(
        f"{mode:2s} AuC {before.auc:.3f} -> {after.auc:.3f}   "
        f"PCK@0.1 {before.pck_at(0.1):.3f} -> {after.pck_at(0.1):.3f}   "
        f"loss {result.epoch_means()[0]:.3f} -> {result.epoch_means()[-1]:.3f}"
    )
