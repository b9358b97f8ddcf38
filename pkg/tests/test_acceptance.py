"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Thresholds here are the acceptance thresholds verbatim; a failing
criterion is reported as a failure, never relaxed.
"""

from __future__ import annotations

import csv
import time
from dataclasses import replace

import numpy as np
import pytest

import oracles
from acceptance_log import record
from factories import random_boxes, random_match_set
from gradcheck import central_diff, max_rel_err
from houghmatch.cli import main as cli_main
from houghmatch.dataset import load_split
from houghmatch.embedding import init_params, load_params, similarity_backward
from houghmatch.flow import FlowField
from houghmatch.geometry import ImageSize
from houghmatch.learning import prepare_pair
from houghmatch.metrics import auc, default_taus, miou_curve, pck_curve, pcr_curve
from houghmatch.pipeline import evaluate, evaluate_pair, match_pair, pair_flow
from houghmatch.scoring import build_match_set, compute_similarities, score_dense, score_gradient, score_sparse
from houghmatch.synthbench import (
    SynthConfig,
    generate_pair,
    generate_pairs,
    proposal_variants,
    sliding_window_boxes,
    warp_box_hull,
    with_proposals,
)

MODES = ("A", "AG", "AG+")


# ------------------------------------------------------------------ 1


def test_criterion_1_sparse_equals_dense():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240101)
    worst_exact = 0.0
    worst_reordered = 0.0
    for k in range(1000):
        n = int(rng.integers(1, 2001))
        mode = MODES[k % 3]
        seed = int(rng.integers(1 << 62))
        ms = random_match_set(np.random.default_rng(seed), n)
        z_sparse = score_sparse(ms, mode).copy()
        z_dense = score_dense(ms, mode)
        worst_exact = max(worst_exact, float(np.max(np.abs(z_sparse - z_dense))))
        perm = rng.permutation(n)
        shuffled = random_match_set(np.random.default_rng(seed), n, order=perm)
        worst_reordered = max(worst_reordered, float(np.max(np.abs(score_sparse(shuffled, mode) - z_dense[perm]))))
    elapsed = time.perf_counter() - t0
    ok = worst_exact == 0.0 and worst_reordered < 1e-12 and elapsed < 60
    record(1, "sparse == dense scoring", ok,
           f"max|diff| {worst_exact:g} (matched order), {worst_reordered:.2e} (reordered), {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 2


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    size = ImageSize(100.0, 100.0)
    worst_fd = 0.0
    worst_dense = 0.0
    done = 0
    while done < 100:
        mode = MODES[done % 3]
        p_a, p_b, d_in, d_out = int(rng.integers(2, 4)), int(rng.integers(2, 4)), 5, 3
        ms = build_match_set(random_boxes(rng, p_a), random_boxes(rng, p_b), size, size)
        ms = ms.with_bins(rng.integers(0, 3, len(ms)))
        params = init_params(d_in, d_out, mode, rng)
        raw_a, raw_b = rng.uniform(0.2, 1.5, (p_a, d_in)), rng.uniform(0.2, 1.5, (p_b, d_in))
        fwd, F, Fg = compute_similarities(params, raw_a, raw_b, ms)
        if F.min() < 1e-3 or (Fg is not None and Fg.min() < 1e-3):
            continue  # keep away from the rectifier kink
        score_sparse(ms, mode)
        dz = rng.uniform(0.5, 1.5, len(ms))
        grads = score_gradient(ms, mode, dz, fwd)
        dense = score_gradient(ms, mode, dz, fwd, dense=True)

        def energy():
            compute_similarities(params, raw_a, raw_b, ms)
            return float(dz @ score_sparse(ms, mode))

        for W, g, gd in zip(params.matrices(), grads, dense):
            worst_fd = max(worst_fd, max_rel_err(g, central_diff(energy, W)))
            worst_dense = max(worst_dense, float(np.max(np.abs(g - gd))))
        # similarity backward on its own, including input gradients
        W, a, b = rng.standard_normal((5, 3)), rng.standard_normal(5), rng.standard_normal(5)
        dW, da, db = similarity_backward(a, b, W)
        ua, ub = a @ W, b @ W
        if ua @ ub / (np.linalg.norm(ua) * np.linalg.norm(ub)) > 1e-3:
            sim = lambda: max(0.0, float((a @ W) @ (b @ W)) / (np.linalg.norm(a @ W) * np.linalg.norm(b @ W)))
            for x, g in ((W, dW), (a, da), (b, db)):
                worst_fd = max(worst_fd, max_rel_err(g, central_diff(sim, x)))
        done += 1
    elapsed = time.perf_counter() - t0
    ok = worst_fd < 1e-4 and worst_dense < 1e-12 and elapsed < 60
    record(2, "gradient correctness", ok,
           f"max rel err vs finite differences {worst_fd:.2e}, sparse vs dense {worst_dense:.2e}, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 3


def test_criterion_3_sharing_speedup(tmp_path):
    t0 = time.perf_counter()
    out = tmp_path / "bench.csv"
    code = cli_main(["bench", "--sizes", "10,1000,10000,50000", "--sparse-only", "250000", "--repeats", "3",
                     "--out", str(out)])
    rows = {int(r["n"]): r for r in csv.DictReader(out.open())}
    speedup = float(rows[50000]["speedup"])
    elapsed = time.perf_counter() - t0
    ok = code == 0 and speedup >= 5 and rows[250000]["sparse_ms"] != "" and elapsed < 300
    record(3, "bin-sharing speedup", ok,
           f"n=50000 dense {float(rows[50000]['dense_ms']):.1f}ms sparse {float(rows[50000]['sparse_ms']):.2f}ms "
           f"speedup {speedup:.0f}x, n=250000 sparse {float(rows[250000]['sparse_ms']):.2f}ms, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------ 4, 5, 6
#
# One benchmark shared by the learning criteria: default synthetic config
# (64x64x16 grids, 500 proposals per side, affine warps), 50 train and 15
# test pairs, run seed 0, everything through the CLI.  Each step is timed so
# a criterion's runtime is the sum of the steps it needs.

N_TRAIN, N_TEST, BENCH_SEED, EPOCHS = 50, 15, 0, 30


class Benchmark:
    def __init__(self, root):
        self.root = root
        self.data = root / "data"
        self.times: dict[str, float] = {}
        self.summaries: dict[str, dict[str, float]] = {}

    def run(self, step, argv):
        t0 = time.perf_counter()
        code = cli_main(argv)
        self.times[step] = time.perf_counter() - t0
        assert code == 0, f"{step}: exit {code}"

    def train_and_eval(self, name, mode, epochs):
        model = self.root / name
        self.run(f"train {name}", ["train", "--data", str(self.data), "--out", str(model), "--mode", mode,
                                   "--epochs", str(epochs), "--seed", str(BENCH_SEED)])
        out = self.root / f"eval_{name}"
        self.run(f"eval {name}", ["eval", "--data", str(self.data), "--checkpoint", str(model / "model.scnw"),
                                  "--out", str(out)])
        with (out / "summary.csv").open() as fh:
            self.summaries[name] = {r["metric"]: float(r["value"]) for r in csv.DictReader(fh)}

    def elapsed(self, *steps):
        return sum(self.times[s] for s in steps)


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    b = Benchmark(tmp_path_factory.mktemp("bench"))
    b.run("synth", ["synth", "--out", str(b.data), "--pairs", str(N_TRAIN + N_TEST),
                    "--split-ratio", f"{N_TRAIN},0,{N_TEST}", "--seed", str(BENCH_SEED)])
    return b


def _test_synth_pairs():
    cfg = SynthConfig(seed=BENCH_SEED)
    return [generate_pair(cfg, BENCH_SEED, N_TRAIN + k) for k in range(N_TEST)]


def test_criterion_4_learning_efficacy(bench):
    bench.train_and_eval("A_init", "A", 0)
    bench.train_and_eval("A", "A", EPOCHS)
    before = bench.summaries["A_init"]["pck@0.1"]
    after = bench.summaries["A"]["pck@0.1"]
    elapsed = bench.elapsed("synth", "train A", "eval A", "train A_init", "eval A_init")
    ok = after - before >= 0.15 and elapsed < 900
    record(4, "learning efficacy (A)", ok,
           f"test PCK@0.1 {before:.3f} untrained -> {after:.3f} after {EPOCHS} epochs "
           f"(+{after - before:.3f}, need +0.15), {elapsed:.1f}s")
    assert ok


def test_criterion_5_geometry_benefit(bench):
    for mode in ("A", "AG", "AG+"):
        if mode not in bench.summaries:
            bench.train_and_eval(mode, mode, EPOCHS)
    # distractors: proposals not derived from an object box (random fill, twins)
    fracs = []
    for sp, loaded in zip(_test_synth_pairs(), load_split(bench.data, "test")):
        assert np.array_equal(sp.pair.tgt_props, loaded.tgt_props)
        fracs += [float(np.mean(sp.distractor_src)), float(np.mean(sp.distractor_tgt))]
    distract = min(fracs)
    a, ag, agp = (bench.summaries[m]["pcr_auc"] for m in ("A", "AG", "AG+"))
    elapsed = bench.elapsed("synth", *(f"{s} {m}" for m in ("A", "AG", "AG+") for s in ("train", "eval")))
    ok = distract >= 0.30 and ag >= a + 0.03 and agp >= ag - 0.01 and elapsed < 1200
    record(5, "geometry benefit", ok,
           f"test PCR AuC A {a:.3f}, AG {ag:.3f} (AG-A {ag - a:+.3f}, need >= +0.03), "
           f"AG+ {agp:.3f} (AG+-AG {agp - ag:+.3f}, need >= -0.01); "
           f"distractor fraction >= {distract:.2f}, {elapsed:.1f}s")
    assert ok


def test_criterion_6_proposal_ablation(bench):
    if "AG" not in bench.summaries:
        bench.train_and_eval("AG", "AG", EPOCHS)
    params = load_params(bench.root / "AG" / "model.scnw")
    t0 = time.perf_counter()
    aucs = {}
    pairs = _test_synth_pairs()
    for kind in ("gt_jitter", "sliding_window", "uniform_random"):
        preps = [
            prepare_pair(with_proposals(sp, proposal_variants(sp, kind, 500, "source"),
                                        proposal_variants(sp, kind, 500, "target")).pair)
            for sp in pairs
        ]
        aucs[kind] = evaluate(preps, params, "AG").auc
    ablation = time.perf_counter() - t0
    elapsed = ablation + bench.elapsed("synth", "train AG")
    gj, sw, ur = aucs["gt_jitter"], aucs["sliding_window"], aucs["uniform_random"]
    ok = gj >= sw + 0.02 and sw >= ur + 0.02 and elapsed < 600
    record(6, "proposal ablation ordering", ok,
           f"PCR AuC gt_jitter {gj:.3f} > sliding_window {sw:.3f} > uniform_random {ur:.3f} "
           f"(margins {gj - sw:+.3f}, {sw - ur:+.3f}, need >= 0.02), "
           f"{elapsed:.1f}s including AG training ({ablation:.1f}s ablation)")
    assert ok


# ------------------------------------------------------------------ 7


def test_criterion_7_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7007)
    taus = default_taus()
    mismatches = 0
    non_monotone = 0
    for _ in range(100):
        W, H = int(rng.integers(5, 40)), int(rng.integers(5, 40))
        flow = FlowField(rng.normal(0, 3, (H, W)), rng.normal(0, 3, (H, W)), np.ones((H, W), bool))
        size_b = ImageSize(float(W), float(H))
        n = int(rng.integers(1, 30))
        src = rng.uniform(0, [W, H], (n, 2))
        kps = np.concatenate([src, src + rng.normal(0, 4, (n, 2))], axis=1)
        m = int(rng.integers(1, 40))
        xy = rng.uniform(0, 50, (m, 2))
        true = np.concatenate([xy, xy + rng.uniform(1, 20, (m, 2))], axis=1)
        pred = np.concatenate([xy + rng.normal(0, 3, (m, 2)), true[:, 2:] + rng.normal(0, 3, (m, 2))], axis=1)
        pred[:, 2:] = np.maximum(pred[:, 2:], pred[:, :2] + 0.5)
        pck_c = pck_curve(flow, kps, size_b, taus)
        pcr_c = pcr_curve(pred, true, taus)
        ious = [oracles.box_iou(p, t) for p, t in zip(pred, true)]
        mi = miou_curve(np.array(ious), 50)
        mismatches += sum(pck_c[k] != oracles.pck(flow.dx, flow.dy, kps, size_b.diagonal, t) for k, t in enumerate(taus))
        mismatches += sum(pcr_c[k] != oracles.pcr(pred, true, t) for k, t in enumerate(taus))
        mismatches += sum(mi[k - 1] != oracles.miou(ious, k) for k in range(1, 51))
        mismatches += auc(pcr_c, taus) != oracles.auc(pcr_c, taus)
        non_monotone += bool(np.any(np.diff(pck_c) < 0) or np.any(np.diff(pcr_c) < 0))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and non_monotone == 0 and elapsed < 60
    record(7, "metric brute-force oracles", ok,
           f"{mismatches} mismatches, {non_monotone} non-monotone curves over 100 instances, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 8


def _true_flow(A, width, height):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    qx = A[0, 0] * xs + A[0, 1] * ys + A[0, 2]
    qy = A[1, 0] * xs + A[1, 1] * ys + A[1, 2]
    return qx - xs, qy - ys


def test_criterion_8_densify_exactness():
    t0 = time.perf_counter()
    details = []
    ok = True
    for warp in ("identity", "translation"):
        cfg = replace(SynthConfig(), warp=warp, n_gt=16, n_proposals=16, n_jitter=0, n_keypoints=20)
        for sp in generate_pairs(cfg, 3, seed=8):
            size = sp.pair.size_a
            tiles = sliding_window_boxes(size, (0.25,), grids=(4,))
            pair = with_proposals(sp, tiles, warp_box_hull(sp.transform, tiles))
            prep = prepare_pair(pair.pair)
            _, best = match_pair(prep, None)  # oracle scores
            flow = pair_flow(prep, best)
            gx, gy = _true_flow(sp.transform, flow.width, flow.height)
            exact = np.array_equal(flow.dx, gx) and np.array_equal(flow.dy, gy)
            res = evaluate_pair(prep, None)
            p05 = float(res.pck[np.flatnonzero(np.isclose(default_taus(), 0.05))[0]])
            ok &= exact and p05 == 1.0
            details.append((warp, exact, p05))
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 60
    summary = ", ".join(
        f"{w}: {sum(e for ww, e, _ in details if ww == w)}/3 exact, PCK@0.05 min "
        f"{min(p for ww, _, p in details if ww == w):g}"
        for w in ("identity", "translation")
    )
    record(8, "densification exactness", ok, f"{summary}, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 9


def _run_pipeline(cwd, threads, monkeypatch):
    monkeypatch.chdir(cwd)
    t = ["--threads", str(threads)]
    codes = [
        cli_main(["synth", "--out", "data", "--pairs", "20", "--seed", "11", *t]),
        cli_main(["train", "--data", "data", "--out", "model", "--mode", "AG+", "--epochs", "3", "--seed", "11", *t]),
        cli_main(["eval", "--data", "data", "--checkpoint", "model/model.scnw", "--out", "eval", *t]),
        cli_main(["eval", "--data", "data", "--checkpoint", "model/model.scnw", "--mode", "AG", "--out", "eval_ag", *t]),
    ]
    return codes, {str(p.relative_to(cwd)): p.read_bytes() for p in sorted(cwd.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path, monkeypatch):
    t0 = time.perf_counter()
    runs = []
    for name, threads in (("a", 1), ("b", 1), ("c", 4)):
        d = tmp_path / name
        d.mkdir()
        runs.append(_run_pipeline(d, threads, monkeypatch))
    elapsed = time.perf_counter() - t0
    codes_ok = all(c == 0 for codes, _ in runs for c in codes)
    files = runs[0][1]
    same_rerun = runs[1][1] == files
    same_threads = runs[2][1] == files
    ok = codes_ok and same_rerun and same_threads and len(files) > 100 and elapsed < 1200
    record(9, "end-to-end determinism", ok,
           f"{len(files)} files; rerun identical: {same_rerun}; --threads 4 identical: {same_threads}, {elapsed:.1f}s")
    assert ok
