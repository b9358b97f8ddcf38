"""Command-line front end: ``houghmatch {synth,train,match,flow,eval,bench}``.

Every subcommand accepts ``--config FILE`` with ``key=value`` lines (``#``
starts a comment; keys are option names with ``-`` or ``_``).  Precedence is
built-in default < config file < explicit flag.  Runs that write a directory
also write ``config.txt`` there, which can be fed back through ``--config``.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .dataset import list_pairs, load_pair, read_meta, save_pair, write_loss_log
from .embedding import ScoreMode, init_params, load_params, save_params
from .errors import FormatError, InvalidInputError, NumericError
from .flow import save_flow
from .geometry import BinGrid, ImageSize
from .learning import SampleConfig, TrainConfig, train
from .metrics import auc, default_taus
from .pipeline import evaluate, match_pair, oracle_scores, pair_flow, prepare_all
from .scoring import UNLABELED, build_match_set, score_dense, score_sparse, write_match_dump
from .synthbench import STREAM_INIT, STREAM_SHUFFLE, SynthConfig, generate_pair, pair_seed

logger = logging.getLogger("houghmatch")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SPLITS = ("train", "val", "test")
# keys never written to (or read from) a config dump
_NOT_CONFIG = {"command", "config", "func", "verbose"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- parsing


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 0:
        raise argparse.ArgumentTypeError("expected non-negative integers")
    return vals


def _float_pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}") from None
    return a, b


def _mode(text: str) -> str:
    try:
        return ScoreMode.parse(text).value
    except InvalidInputError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value file with option defaults")
    p.add_argument("--seed", type=int, default=0, help="run seed; sub-streams derive from it")
    p.add_argument("--threads", type=int, default=1, help="worker threads for per-pair work")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_args(p: argparse.ArgumentParser, split: str) -> None:
    p.add_argument("--data", type=Path, required=True, help="dataset root written by `synth`")
    p.add_argument("--split", default=split, help="split subdirectory to read")


def _model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", type=Path, help="embedding checkpoint (.scnw)")
    p.add_argument("--mode", type=_mode, help="score mode; defaults to the checkpoint's")
    p.add_argument("--oracle", action="store_true", help="score matches by IoU with ground truth instead")
    p.add_argument("--pool-size", type=int, default=7)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="houghmatch", description="Region matching with offset-bin voting.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    d = SynthConfig()
    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--split-ratio", type=_int_list, default=[70, 15, 15], help="train,val,test weights")
    p.add_argument("--warp", choices=["affine", "identity", "translation"], default=d.warp)
    p.add_argument("--height", type=int, default=d.height)
    p.add_argument("--width", type=int, default=d.width)
    p.add_argument("--channels", type=int, default=d.channels)
    p.add_argument("--cell-size", type=int, default=d.cell_size)
    p.add_argument("--nuisance-channels", type=int, default=d.nuisance_channels)
    p.add_argument("--nuisance-scale", type=float, default=d.nuisance_scale)
    p.add_argument("--target-noise", type=float, default=d.target_noise)
    p.add_argument("--smooth-radius", type=int, default=d.smooth_radius)
    p.add_argument("--repeat-period", type=int, default=d.repeat_period)
    p.add_argument("--repeat-mix", type=float, default=d.repeat_mix)
    p.add_argument("--twin-proposals", type=_bool, default=d.twin_proposals)
    p.add_argument("--max-rotation-deg", type=float, default=d.max_rotation_deg)
    p.add_argument("--min-scale", type=float, default=d.min_scale)
    p.add_argument("--max-scale", type=float, default=d.max_scale)
    p.add_argument("--max-translation", type=float, default=d.max_translation)
    p.add_argument("--translation-px", type=_float_pair, default=d.translation_px)
    p.add_argument("--n-gt", type=int, default=d.n_gt)
    p.add_argument("--n-jitter", type=int, default=d.n_jitter)
    p.add_argument("--n-proposals", type=int, default=d.n_proposals)
    p.add_argument("--n-keypoints", type=int, default=d.n_keypoints)
    p.set_defaults(func=cmd_synth)

    t = TrainConfig()
    p = sub.add_parser("train", help="train an embedding")
    _common(p)
    _data_args(p, "train")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--mode", type=_mode, default=t.mode.value)
    p.add_argument("--epochs", type=int, default=t.epochs)
    p.add_argument("--lr", type=float, default=t.lr)
    p.add_argument("--weight-decay", type=float, default=t.weight_decay)
    p.add_argument("--margin-pos", type=float, default=t.margin_pos)
    p.add_argument("--margin-neg", type=float, default=t.margin_neg)
    p.add_argument("--bin-normalize", type=_bool, default=t.bin_normalize)
    p.add_argument("--t-pos", type=float, default=t.sample.t_pos)
    p.add_argument("--t-neg", type=float, default=t.sample.t_neg)
    p.add_argument("--d-out", type=int, default=t.d_out)
    p.add_argument("--pool-size", type=int, default=t.pool_size)
    p.set_defaults(func=cmd_train)

    for name, helptext, func in (
        ("match", "dump best matches per pair", cmd_match),
        ("flow", "write dense flow per pair", cmd_flow),
        ("eval", "evaluate PCK, PCR and mIoU", cmd_eval),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _data_args(p, "test")
        _model_args(p)
        p.add_argument("--out", type=Path, required=True, help="output directory")
        if name == "eval":
            p.add_argument("--taus", type=int, default=101, help="number of thresholds on [0, 1]")
            p.add_argument("--k", type=int, default=100, help="largest k for mIoU@k")
        p.set_defaults(func=func)

    p = sub.add_parser("bench", help="time sparse against dense scoring")
    _common(p)
    p.add_argument("--sizes", type=_int_list, default=[10, 100, 1000, 10000, 50000])
    p.add_argument("--sparse-only", type=_int_list, default=[250000], help="sizes timed without the dense oracle")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--dense-cap", type=int, default=60000, help="largest n the dense oracle is run on")
    p.add_argument("--out", type=Path, required=True, help="CSV path")
    p.set_defaults(func=cmd_bench)
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise AssertionError("no subcommands")


def _apply_config(sub: argparse.ArgumentParser, path: Path) -> None:
    """Install ``key=value`` entries from ``path`` as parser defaults."""
    try:
        entries = read_meta(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    actions = {a.dest: a for a in sub._actions if a.dest not in _NOT_CONFIG and a.dest != "help"}
    defaults = {}
    for key, raw in entries.items():
        dest = key.replace("-", "_")
        if dest not in actions:
            raise UsageError(f"{path}: unknown key {key!r}")
        action = actions[dest]
        convert = _bool if isinstance(action, argparse._StoreTrueAction) else action.type
        try:
            value = raw if convert is None else convert(raw)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{path}: bad value for {key}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{path}: {key} must be one of {sorted(action.choices)}")
        defaults[dest] = value
        action.required = False
    sub.set_defaults(**defaults)


def _format_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def write_config(path: Path, args: argparse.Namespace) -> None:
    """Effective configuration as ``key=value`` lines, sorted by key.

    ``threads`` is left out so the dump stays identical across thread
    counts; it never changes results.
    """
    items = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG | {"threads"} and v is not None}
    lines = [f"# houghmatch {args.command}"] + [f"{k}={_format_value(v)}" for k, v in sorted(items.items())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _find_config(argv: list[str]) -> tuple[str | None, Path | None]:
    """Subcommand and ``--config`` value, located before full parsing."""
    command = next((a for a in argv if not a.startswith("-")), None)
    for k, a in enumerate(argv):
        if a == "--config" and k + 1 < len(argv):
            return command, Path(argv[k + 1])
        if a.startswith("--config="):
            return command, Path(a.split("=", 1)[1])
    return command, None


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    command, config = _find_config(argv)
    if config is not None and command is not None:
        try:
            sub = _subparser(parser, command)
        except KeyError:
            sub = None  # unknown command: let argparse report it
        if sub is not None:
            _apply_config(sub, config)
    args = parser.parse_args(argv)
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return args


# ---------------------------------------------------------------- helpers


def _split_counts(n: int, ratio: Sequence[int]) -> list[int]:
    """Largest-remainder split of ``n`` by integer weights (ties: earlier split)."""
    if len(ratio) != 3 or sum(ratio) == 0:
        raise UsageError("--split-ratio needs three weights with a positive sum")
    total = sum(ratio)
    exact = [n * r / total for r in ratio]
    counts = [int(e) for e in exact]
    order = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _load_preps(args: argparse.Namespace):
    dirs = list_pairs(args.data, args.split)
    if not dirs:
        raise FormatError(f"{args.data / args.split}: no pair directories")
    pairs = [load_pair(d) for d in dirs]
    return prepare_all(pairs, args.pool_size, None, args.threads)


def _load_model(args: argparse.Namespace):
    if args.oracle:
        if args.checkpoint is not None:
            raise UsageError("--oracle and --checkpoint are mutually exclusive")
        return None, None
    if args.checkpoint is None:
        raise UsageError("need --checkpoint (or --oracle)")
    params = load_params(args.checkpoint)
    mode = ScoreMode.parse(args.mode) if args.mode else params.mode
    return params, mode


# ---------------------------------------------------------------- commands


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = SynthConfig(
        height=args.height,
        width=args.width,
        channels=args.channels,
        cell_size=args.cell_size,
        nuisance_channels=args.nuisance_channels,
        nuisance_scale=args.nuisance_scale,
        target_noise=args.target_noise,
        smooth_radius=args.smooth_radius,
        repeat_period=args.repeat_period,
        repeat_mix=args.repeat_mix,
        twin_proposals=args.twin_proposals,
        warp=args.warp,
        max_rotation_deg=args.max_rotation_deg,
        min_scale=args.min_scale,
        max_scale=args.max_scale,
        max_translation=args.max_translation,
        translation_px=tuple(args.translation_px),
        n_gt=args.n_gt,
        n_jitter=args.n_jitter,
        n_proposals=args.n_proposals,
        n_keypoints=args.n_keypoints,
        seed=args.seed,
    )
    counts = _split_counts(args.pairs, args.split_ratio)
    args.out.mkdir(parents=True, exist_ok=True)
    index = 0
    for split, count in zip(SPLITS, counts):
        for _ in range(count):
            sp = generate_pair(cfg, args.seed, index)
            save_pair(args.out / split / sp.pair.name, sp)
            index += 1
    write_config(args.out / "config.txt", args)
    print(f"wrote {index} pairs to {args.out} (train {counts[0]}, val {counts[1]}, test {counts[2]})")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = TrainConfig(
        lr=args.lr,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        seed=args.seed,
        margin_pos=args.margin_pos,
        margin_neg=args.margin_neg,
        bin_normalize=args.bin_normalize,
        mode=args.mode,
        d_out=args.d_out,
        pool_size=args.pool_size,
        sample=SampleConfig(args.t_pos, args.t_neg),
    )
    preps = _load_preps(args)
    init_rng = np.random.default_rng(pair_seed(args.seed, 0, STREAM_INIT))
    shuffle_rng = np.random.default_rng(pair_seed(args.seed, 0, STREAM_SHUFFLE))
    params = init_params(preps[0].raw_a.shape[1], cfg.d_out, cfg.mode, init_rng)
    result = train(preps, cfg, params=params, shuffle_rng=shuffle_rng)
    args.out.mkdir(parents=True, exist_ok=True)
    save_params(args.out / "model.scnw", result.params)
    write_loss_log(args.out / "loss.csv", result.log)
    write_config(args.out / "config.txt", args)
    means = result.epoch_means()
    final = means[-1] if means else float("nan")
    print(f"trained {cfg.mode.value} on {len(preps)} pairs for {cfg.epochs} epochs; final train loss {final:.6f}")
    return EXIT_OK


def _label_rows(prep, ms, rows: np.ndarray, cfg: SampleConfig) -> None:
    ms.labels[:] = UNLABELED
    if not len(prep.pair.gt_src):
        return
    truth_row = np.full(len(ms.src_boxes), -1, dtype=np.int64)
    truth_row[prep.pair.gt_src] = np.arange(len(prep.pair.gt_src))
    r = truth_row[ms.src_idx[rows]]
    has = r >= 0
    ious = prep.gt_iou[r[has], ms.tgt_idx[rows][has]]
    lab = np.full(len(ious), UNLABELED, dtype=np.int8)
    lab[ious > cfg.t_pos] = 1
    lab[ious < cfg.t_neg] = 0
    ms.labels[rows[has]] = lab


def cmd_match(args: argparse.Namespace) -> int:
    params, mode = _load_model(args)
    preps = _load_preps(args)
    args.out.mkdir(parents=True, exist_ok=True)
    for prep in preps:
        ms, best = match_pair(prep, params, mode)
        if params is None:
            # oracle scoring: report IoU-based scores in both f and z
            ms.f = oracle_scores(prep)
            ms.fg = None
            ms.z = ms.f
        _label_rows(prep, ms, best.match, SampleConfig())
        write_match_dump(args.out / f"{prep.pair.name}_matches.csv", ms, best.match)
    write_config(args.out / "config.txt", args)
    print(f"wrote best matches for {len(preps)} pairs to {args.out}")
    return EXIT_OK


def cmd_flow(args: argparse.Namespace) -> int:
    params, mode = _load_model(args)
    preps = _load_preps(args)
    args.out.mkdir(parents=True, exist_ok=True)
    for prep in preps:
        _, best = match_pair(prep, params, mode)
        save_flow(args.out / f"{prep.pair.name}.flow", pair_flow(prep, best))
    write_config(args.out / "config.txt", args)
    print(f"wrote flow fields for {len(preps)} pairs to {args.out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    params, mode = _load_model(args)
    if args.taus < 2 or args.k < 1:
        raise UsageError("--taus must be >= 2 and --k >= 1")
    preps = _load_preps(args)
    report = evaluate(preps, params, mode, default_taus(args.taus), args.k, threads=args.threads)
    report.write(args.out)
    with (args.out / "per_pair.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair", "pcr_auc", "miou@1"])
        for r in report.per_pair:
            w.writerow([r.name, repr(auc(r.pcr, report.taus)), repr(float(r.miou[0]))])
    write_config(args.out / "config.txt", args)
    label = "oracle" if params is None else mode.value
    s = report.summary()
    for key in ("pck@0.05", "pck@0.1", "pck@0.15"):
        if key in s:
            print(f"{label} {key} {s[key]:.4f}")
    print(f"{label} pcr_auc {s['pcr_auc']:.4f}")
    return EXIT_OK


def _bench_instance(n: int, rng: np.random.Generator):
    """Random proposals with ``~n`` dense matches and random similarities."""
    p_a = max(1, int(round(np.sqrt(n))))
    p_b = max(1, -(-n // p_a))
    size = ImageSize(256.0, 256.0)

    def boxes(k):
        xy = rng.uniform(0, 200, (k, 2))
        return np.concatenate([xy, xy + rng.uniform(10, 56, (k, 2))], axis=1)

    src, tgt = boxes(p_a), boxes(p_b)
    idx = np.arange(n)
    ms = build_match_set(src, tgt, size, size, BinGrid(), idx // p_b, idx % p_b)
    ms.f = rng.uniform(size=n)
    return ms


def _time_ms(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def cmd_bench(args: argparse.Namespace) -> int:
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    rng = np.random.default_rng(pair_seed(args.seed, 0, 0))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for n in list(args.sizes) + list(args.sparse_only):
        if n < 1:
            raise UsageError("sizes must be >= 1")
        ms = _bench_instance(n, rng)
        sparse = _time_ms(lambda: score_sparse(ms, ScoreMode.AG), args.repeats)
        if n in args.sizes and n <= args.dense_cap:
            dense = _time_ms(lambda: score_dense(ms, ScoreMode.AG), max(1, min(args.repeats, 2)))
            rows.append([n, f"{dense:.3f}", f"{sparse:.3f}", f"{dense / sparse:.2f}"])
        else:
            rows.append([n, "", f"{sparse:.3f}", ""])
        print(",".join(str(v) for v in rows[-1]))
    with args.out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "dense_ms", "sparse_ms", "speedup"])
        w.writerows(rows)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"houghmatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        # BLAS stays single-threaded so results cannot depend on --threads,
        # which instead sizes the per-pair worker pool
        with threadpool_limits(limits=1, user_api="blas"):
            return args.func(args)
    except UsageError as exc:
        print(f"houghmatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidInputError as exc:
        print(f"houghmatch: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"houghmatch: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"houghmatch: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
