"""On-disk dataset layout.

::

    <root>/<split>/pair_NNNN/
        src.fgrd  tgt.fgrd          feature grids (FGRD)
        src_props.csv tgt_props.csv x_min,y_min,x_max,y_max
        gt.csv                      src_box_id,tgt_x_min,tgt_y_min,tgt_x_max,tgt_y_max
        kps.csv                     src_x,src_y,tgt_x,tgt_y
        meta.txt                    key=value lines (transform, seed, ...)

Pairs without ``meta.txt`` or with an empty ``kps.csv`` load fine; that is
how externally computed features are ingested.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import FormatError
from .features import load_feature_grid, save_feature_grid
from .geometry import read_proposals, write_proposals
from .learning import LabeledPair
from .synthbench import SynthPair

__all__ = ["save_pair", "load_pair", "list_pairs", "load_split", "read_meta", "write_meta", "write_loss_log"]

GT_HEADER = ["src_box_id", "tgt_x_min", "tgt_y_min", "tgt_x_max", "tgt_y_max"]
KPS_HEADER = ["src_x", "src_y", "tgt_x", "tgt_y"]


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_rows(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def _read_table(path: Path, header: list[str]) -> list[list[str]]:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got != header:
            raise FormatError(f"{path}: expected header {','.join(header)}, got {got!r}")
        rows = [row for row in reader if row]
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} columns")
    return rows


def write_meta(path: Path, meta: dict[str, object]) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")


def read_meta(path: Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def save_pair(directory: str | Path, sp: SynthPair) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    pair = sp.pair
    save_feature_grid(d / "src.fgrd", pair.src_grid)
    save_feature_grid(d / "tgt.fgrd", pair.tgt_grid)
    write_proposals(d / "src_props.csv", pair.src_props)
    write_proposals(d / "tgt_props.csv", pair.tgt_props)
    _write_rows(d / "gt.csv", GT_HEADER, ([int(i), *map(_fmt, b)] for i, b in zip(pair.gt_src, pair.gt_boxes)))
    _write_rows(d / "kps.csv", KPS_HEADER, ([_fmt(v) for v in kp] for kp in pair.keypoints))
    A = sp.transform
    meta: dict[str, object] = {
        "a11": _fmt(A[0, 0]),
        "a12": _fmt(A[0, 1]),
        "tx": _fmt(A[0, 2]),
        "a21": _fmt(A[1, 0]),
        "a22": _fmt(A[1, 1]),
        "ty": _fmt(A[1, 2]),
        "seed": sp.seed,
        "index": sp.index,
    }
    if sp.config is not None:
        meta["warp"] = sp.config.warp
    write_meta(d / "meta.txt", meta)
    return d


def load_pair(directory: str | Path) -> LabeledPair:
    d = Path(directory)
    try:
        src_grid = load_feature_grid(d / "src.fgrd")
        tgt_grid = load_feature_grid(d / "tgt.fgrd")
    except FormatError as exc:
        raise FormatError(f"{d}: {exc}") from None
    src_props = read_proposals(d / "src_props.csv")
    tgt_props = read_proposals(d / "tgt_props.csv")
    gt_rows = _read_table(d / "gt.csv", GT_HEADER) if (d / "gt.csv").exists() else []
    try:
        gt_src = np.array([int(r[0]) for r in gt_rows], dtype=np.int64)
        gt_boxes = np.array([[float(v) for v in r[1:]] for r in gt_rows], dtype=np.float64).reshape(-1, 4)
    except ValueError as exc:
        raise FormatError(f"{d / 'gt.csv'}: {exc}") from None
    kp_rows = _read_table(d / "kps.csv", KPS_HEADER) if (d / "kps.csv").exists() else []
    try:
        kps = np.array([[float(v) for v in r] for r in kp_rows], dtype=np.float64).reshape(-1, 4)
    except ValueError as exc:
        raise FormatError(f"{d / 'kps.csv'}: {exc}") from None
    try:
        return LabeledPair(src_grid, tgt_grid, src_props, tgt_props, gt_src, gt_boxes, kps, name=d.name)
    except ValueError as exc:
        raise FormatError(f"{d}: {exc}") from None


def load_transform(directory: str | Path) -> np.ndarray | None:
    path = Path(directory) / "meta.txt"
    if not path.exists():
        return None
    m = read_meta(path)
    try:
        return np.array(
            [[float(m["a11"]), float(m["a12"]), float(m["tx"])], [float(m["a21"]), float(m["a22"]), float(m["ty"])]]
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad transform entry ({exc})") from None


def list_pairs(root: str | Path, split: str | None = None) -> list[Path]:
    """Pair directories under ``root`` (or ``root/split``), sorted by name."""
    base = Path(root) / split if split else Path(root)
    if not base.is_dir():
        raise FormatError(f"{base}: not a dataset directory")
    return sorted(p for p in base.iterdir() if p.is_dir() and p.name.startswith("pair_"))


def load_split(root: str | Path, split: str | None = None) -> list[LabeledPair]:
    return [load_pair(p) for p in list_pairs(root, split)]


def write_loss_log(path: str | Path, log) -> None:
    _write_rows(Path(path), ["epoch", "pair", "loss"], ([e, p, _fmt(l)] for e, p, l in log))
