"""Linear region embedding, rectified-cosine similarity and their gradients.

A raw pooled vector ``x`` (length ``d_in``) is embedded as
``c = W^T x / ||W^T x||``. The similarity of a match is
``f = max(0, c_r . c_s)``.

Checkpoint (``SCNW``) layout, little-endian::

    b"SCNW" | u8 version=1 | u8 mode (0=A, 1=AG, 2=AG+) | u32 d_in | u32 d_out
    | W_a float64 row-major (d_in x d_out) | [W_g, AG+ only]
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError

__all__ = [
    "ScoreMode",
    "EmbeddingParams",
    "Descriptor",
    "EmbeddedSet",
    "init_params",
    "embed",
    "embed_many",
    "similarity",
    "similarity_backward",
    "similarity_matrix",
    "similarity_matrix_backward",
    "save_params",
    "load_params",
]

ZERO_NORM = 1e-12


class ScoreMode(str, enum.Enum):
    A = "A"
    AG = "AG"
    AG_PLUS = "AG+"

    @classmethod
    def parse(cls, value: "str | ScoreMode") -> "ScoreMode":
        if isinstance(value, ScoreMode):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise InvalidInputError(f"unknown score mode {value!r}; expected A, AG or AG+") from None

    @property
    def votes(self) -> bool:
        return self is not ScoreMode.A


_MODE_CODE = {ScoreMode.A: 0, ScoreMode.AG: 1, ScoreMode.AG_PLUS: 2}
_CODE_MODE = {v: k for k, v in _MODE_CODE.items()}


@dataclass
class EmbeddingParams:
    mode: ScoreMode
    W_a: np.ndarray
    W_g: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.mode = ScoreMode.parse(self.mode)
        self.W_a = np.asarray(self.W_a, dtype=np.float64)
        if self.W_a.ndim != 2:
            raise InvalidInputError("W_a must be a matrix")
        if (self.W_g is not None) != (self.mode is ScoreMode.AG_PLUS):
            raise InvalidInputError("W_g must be present exactly when mode is AG+")
        if self.W_g is not None:
            self.W_g = np.asarray(self.W_g, dtype=np.float64)
            if self.W_g.shape != self.W_a.shape:
                raise InvalidInputError("W_g must have the same shape as W_a")
        for W in self.matrices():
            if not np.all(np.isfinite(W)):
                raise InvalidInputError("embedding parameters must be finite")

    @property
    def d_in(self) -> int:
        return self.W_a.shape[0]

    @property
    def d_out(self) -> int:
        return self.W_a.shape[1]

    def matrices(self) -> list[np.ndarray]:
        return [self.W_a] if self.W_g is None else [self.W_a, self.W_g]

    def copy(self) -> "EmbeddingParams":
        return EmbeddingParams(self.mode, self.W_a.copy(), None if self.W_g is None else self.W_g.copy())

    def sq_norm(self) -> float:
        return float(sum(np.sum(W * W) for W in self.matrices()))


@dataclass(frozen=True)
class Descriptor:
    vector: np.ndarray
    is_zero: bool = False


@dataclass
class EmbeddedSet:
    """Forward cache for a batch of raw vectors embedded with one matrix."""

    raw: np.ndarray  # (n, d_in)
    projected: np.ndarray  # (n, d_out), before normalization
    norms: np.ndarray  # (n,)
    unit: np.ndarray  # (n, d_out); zero rows where is_zero
    is_zero: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def init_params(d_in: int, d_out: int, mode: ScoreMode | str, rng: np.random.Generator) -> EmbeddingParams:
    """Uniform ``[-1/sqrt(d_in), 1/sqrt(d_in)]`` initialization."""
    mode = ScoreMode.parse(mode)
    bound = 1.0 / np.sqrt(d_in)
    W_a = rng.uniform(-bound, bound, size=(d_in, d_out))
    W_g = rng.uniform(-bound, bound, size=(d_in, d_out)) if mode is ScoreMode.AG_PLUS else None
    return EmbeddingParams(mode, W_a, W_g)


def embed(raw: np.ndarray, W: np.ndarray) -> Descriptor:
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    if raw.shape[0] != W.shape[0]:
        raise InvalidInputError(f"raw vector has length {raw.shape[0]}, W expects {W.shape[0]}")
    v = raw @ W
    n = float(np.sqrt(v @ v))
    if n < ZERO_NORM:
        return Descriptor(np.zeros(W.shape[1]), True)
    return Descriptor(v / n, False)


def embed_many(raw: np.ndarray, W: np.ndarray) -> EmbeddedSet:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != W.shape[0]:
        raise InvalidInputError(f"raw matrix shape {raw.shape} incompatible with W {W.shape}")
    proj = raw @ W
    norms = np.sqrt(np.einsum("ij,ij->i", proj, proj))
    is_zero = norms < ZERO_NORM
    safe = np.where(is_zero, 1.0, norms)
    unit = proj / safe[:, None]
    unit[is_zero] = 0.0
    return EmbeddedSet(raw, proj, norms, unit, is_zero)


def similarity(a: Descriptor, b: Descriptor) -> float:
    if a.is_zero or b.is_zero:
        return 0.0
    return max(0.0, float(a.vector @ b.vector))


def similarity_matrix(ea: EmbeddedSet, eb: EmbeddedSet) -> tuple[np.ndarray, np.ndarray]:
    """Rectified cosine for every (source, target) pair.

    Returns ``(F, D)`` where ``D`` is the raw dot-product matrix, kept for the
    backward pass.
    """
    D = ea.unit @ eb.unit.T
    return np.maximum(D, 0.0), D


def _normalize_backward(es: EmbeddedSet, d_unit: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the projected vectors given the gradient w.r.t. unit vectors."""
    radial = np.einsum("ij,ij->i", es.unit, d_unit)
    safe = np.where(es.is_zero, 1.0, es.norms)
    d_proj = (d_unit - es.unit * radial[:, None]) / safe[:, None]
    d_proj[es.is_zero] = 0.0
    return d_proj


def similarity_matrix_backward(
    ea: EmbeddedSet, eb: EmbeddedSet, D: np.ndarray, grad_F: np.ndarray
) -> np.ndarray:
    """Gradient of ``sum(grad_F * F)`` w.r.t. the shared projection matrix."""
    grad_D = np.where(D > 0.0, grad_F, 0.0)
    d_unit_a = grad_D @ eb.unit
    d_unit_b = grad_D.T @ ea.unit
    return ea.raw.T @ _normalize_backward(ea, d_unit_a) + eb.raw.T @ _normalize_backward(eb, d_unit_b)


def similarity_backward(
    a_raw: np.ndarray, b_raw: np.ndarray, W: np.ndarray, upstream: float = 1.0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``upstream * f`` for a single match.

    Returns ``(dW, d_a_raw, d_b_raw)``.  All three are exactly zero when the
    rectifier is inactive (dot product <= 0) or either projection vanishes.
    """
    a_raw = np.asarray(a_raw, dtype=np.float64).reshape(1, -1)
    b_raw = np.asarray(b_raw, dtype=np.float64).reshape(1, -1)
    ea, eb = embed_many(a_raw, W), embed_many(b_raw, W)
    _, D = similarity_matrix(ea, eb)
    grad_D = np.where(D > 0.0, float(upstream), 0.0)
    pa = _normalize_backward(ea, grad_D @ eb.unit)
    pb = _normalize_backward(eb, grad_D.T @ ea.unit)
    dW = a_raw.T @ pa + b_raw.T @ pb
    return dW, (pa @ W.T)[0], (pb @ W.T)[0]


_CKPT_HEADER = struct.Struct("<4sBBII")


def save_params(path: str | Path, params: EmbeddingParams) -> None:
    header = _CKPT_HEADER.pack(b"SCNW", 1, _MODE_CODE[params.mode], params.d_in, params.d_out)
    body = b"".join(np.ascontiguousarray(W, dtype="<f8").tobytes() for W in params.matrices())
    Path(path).write_bytes(header + body)


def load_params(path: str | Path) -> EmbeddingParams:
    raw = Path(path).read_bytes()
    if raw[:4] != b"SCNW":
        raise FormatError("bad magic, expected b'SCNW'", offset=0)
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError("truncated header", offset=len(raw))
    _, version, code, d_in, d_out = _CKPT_HEADER.unpack_from(raw)
    if version != 1:
        raise FormatError(f"unsupported version {version}", offset=4)
    if code not in _CODE_MODE:
        raise FormatError(f"unknown mode tag {code}", offset=5)
    mode = _CODE_MODE[code]
    n_mats = 2 if mode is ScoreMode.AG_PLUS else 1
    count = d_in * d_out
    expected = _CKPT_HEADER.size + 8 * count * n_mats
    if len(raw) != expected:
        raise FormatError(f"checkpoint size {len(raw)} != expected {expected}", offset=min(len(raw), expected))
    mats = [
        np.frombuffer(raw, dtype="<f8", count=count, offset=_CKPT_HEADER.size + 8 * count * k)
        .reshape(d_in, d_out)
        .astype(np.float64)
        for k in range(n_mats)
    ]
    for k, W in enumerate(mats):
        if not np.all(np.isfinite(W)):
            bad = int(np.flatnonzero(~np.isfinite(W.ravel()))[0])
            raise FormatError("non-finite parameter", offset=_CKPT_HEADER.size + 8 * (count * k + bad))
    return EmbeddingParams(mode, mats[0], mats[1] if n_mats == 2 else None)
