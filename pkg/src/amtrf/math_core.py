"""Dense numerical primitives shared by every other module.

Sequences are stored frame-major: a ``T x D`` array holds one D-dimensional
frame per row. All routines are pure functions of their inputs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import EmptyInputError, MatrixIOError, ParameterError, ShapeError

MASK_NEG = -1e30
DEFAULT_LN_EPS = 1e-5

_DTYPES = {32: np.float32, 64: np.float64}


def dtype_for(precision: int) -> type:
    try:
        return _DTYPES[int(precision)]
    except (KeyError, ValueError):
        raise ParameterError(f"precision must be 32 or 64, got {precision!r}") from None


@dataclass(frozen=True)
class FeatureMatrix:
    """A ``T x D`` frame sequence tagged with its frame period."""

    data: np.ndarray
    period_ms: float = 10.0

    @property
    def num_frames(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])


class SeededRng:
    """Reproducible random stream (PCG64) keyed by a 64-bit seed."""

    algorithm = "PCG64"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low, high, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def random(self, shape) -> np.ndarray:
        return self._gen.random(size=shape)

    def integers(self, low, high=None, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def spawn(self, salt: int) -> "SeededRng":
        """Independent child stream; same (seed, salt) always yields the same child."""
        return SeededRng((self.seed * 0x9E3779B97F4A7C15 + int(salt) + 1) & 0xFFFFFFFFFFFFFFFF)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed left-to-right accumulation over the inner index.

    Every output element is ``(((a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...)``, the
    same rounding sequence as a naive triple loop, so results do not depend on
    the number of rows in either operand.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    dtype = np.result_type(a, b)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    if a.shape[1] == 0:
        return out
    out += a[:, 0:1] * b[0:1, :]
    for k in range(1, a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = DEFAULT_LN_EPS) -> np.ndarray:
    """Normalize each row of ``x`` to zero mean / unit variance, then apply gain and bias."""
    x = np.asarray(x)
    gain = np.asarray(gain)
    bias = np.asarray(bias)
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeError(f"layer_norm length mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + bias


def mean_pool(x: np.ndarray) -> np.ndarray:
    """Arithmetic mean over frames (rows); returns a D-vector."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInputError(f"mean_pool needs at least one frame, got shape {x.shape}")
    return x.sum(axis=0) / x.shape[0]


def dropout_mask(shape, rate: float, rng: SeededRng | None, training: bool, dtype=np.float64) -> np.ndarray:
    """Inverted-dropout keep mask; the identity whenever not training or rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return np.ones(shape, dtype=dtype)
    if rng is None:
        raise ParameterError("training-mode dropout needs an rng")
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|a - b| / max(1, |a|, |b|), element-wise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


# -- matrix text format -------------------------------------------------------

def format_matrix(m: np.ndarray) -> str:
    m = np.atleast_2d(np.asarray(m))
    if m.ndim != 2:
        raise ShapeError(f"cannot serialise array of shape {m.shape}")
    fmt = "%.9g" if m.dtype == np.float32 else "%.17g"
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    for row in m:
        lines.append(" ".join(fmt % v for v in row))
    return "\n".join(lines) + "\n"


def parse_matrix_lines(lines: Iterable[str], dtype=np.float64, source: str = "<matrix>") -> np.ndarray:
    it = iter(lines)
    try:
        header = next(it).split()
        rows, cols = int(header[0]), int(header[1])
    except (StopIteration, ValueError, IndexError):
        raise MatrixIOError(f"{source}: bad matrix header") from None
    data = np.empty((rows, cols), dtype=dtype)
    for r in range(rows):
        try:
            vals = next(it).split()
        except StopIteration:
            raise MatrixIOError(f"{source}: expected {rows} rows, got {r}") from None
        if len(vals) != cols:
            raise MatrixIOError(f"{source}: row {r + 1} has {len(vals)} values, expected {cols}")
        try:
            data[r] = [float(v) for v in vals]
        except ValueError as exc:
            raise MatrixIOError(f"{source}: row {r + 1}: {exc}") from None
    if not np.all(np.isfinite(data)):
        raise MatrixIOError(f"{source}: non-finite values")
    return data


def parse_matrix(text: str, dtype=np.float64, source: str = "<matrix>") -> np.ndarray:
    return parse_matrix_lines([ln for ln in text.splitlines() if ln.strip()], dtype=dtype, source=source)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise MatrixIOError(f"{path}: {exc}") from exc


def read_matrix(path: str | os.PathLike, dtype=np.float64) -> np.ndarray:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise MatrixIOError(f"{path}: {exc}") from exc
    return parse_matrix(text, dtype=dtype, source=os.fspath(path))


def write_matrix(path: str | os.PathLike, m: np.ndarray) -> None:
    atomic_write_text(path, format_matrix(m))


class Dropout:
    """Source of dropout masks for one forward pass.

    Masks drawn in training mode are kept in ``masks`` so the same pass can be
    replayed bit-for-bit (``replay()``), e.g. by finite-difference checks.
    """

    def __init__(self, rate: float = 0.0, rng: SeededRng | None = None, training: bool = False):
        if not 0.0 <= rate < 1.0:
            raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self.training = training
        self.masks: list[np.ndarray] = []
        self._replay: list[np.ndarray] | None = None
        self._cursor = 0

    @property
    def active(self) -> bool:
        return self.training and self.rate > 0.0

    def mask(self, shape, dtype=np.float64) -> np.ndarray | None:
        """Next keep-mask, or None when dropout is the identity."""
        if not self.active:
            return None
        if self._replay is not None:
            if self._cursor >= len(self._replay):
                raise ParameterError("dropout replay exhausted: forward pass differs from the recorded one")
            m = self._replay[self._cursor]
            self._cursor += 1
            if m.shape != tuple(shape):
                raise ShapeError(f"replayed dropout mask {m.shape} does not match {tuple(shape)}")
            return m.astype(dtype)
        m = dropout_mask(shape, self.rate, self.rng, True, dtype=dtype)
        self.masks.append(m)
        return m

    def replay(self) -> "Dropout":
        d = Dropout(self.rate, None, self.training)
        d._replay = list(self._replay if self._replay is not None else self.masks)
        return d


EVAL = Dropout()
