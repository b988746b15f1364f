"""Scaled dot-product attention, the multi-head wrapper and banded masks.

Inputs are frame-major (one row per position). A projection ``W`` maps a row
``x`` to ``x @ W``; head ``h`` owns the contiguous column block
``[h*head_dim, (h+1)*head_dim)`` of each projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import MaskingError, ParameterError, ShapeError
from .math_core import EVAL, Dropout


@dataclass
class AttentionParams:
    w_q: Tensor | np.ndarray
    w_k: Tensor | np.ndarray
    w_v: Tensor | np.ndarray
    w_out: Tensor | np.ndarray
    num_heads: int = 1

    def __post_init__(self):
        d = np.shape(self.w_q)[0]
        for name in ("w_q", "w_k", "w_v", "w_out"):
            if np.shape(getattr(self, name)) != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}, got {np.shape(getattr(self, name))}")
        if self.num_heads < 1 or d % self.num_heads:
            raise ParameterError(f"d_model={d} not divisible by num_heads={self.num_heads}")

    @property
    def d_model(self) -> int:
        return int(np.shape(self.w_q)[0])

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads


@dataclass
class AttentionOutput:
    z: Tensor
    weights: list[np.ndarray] = field(default_factory=list)


def scaled_dot_attention(
    q,
    k,
    v,
    scale: float,
    mask: np.ndarray | None = None,
    dropout: Dropout = EVAL,
    keep_weights: bool = False,
) -> AttentionOutput:
    """softmax(scale * q k^T) v with optional boolean mask (True = may attend)."""
    q, k, v = ag.as_tensor(q), ag.as_tensor(k), ag.as_tensor(v)
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError("attention operands must be 2-D")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"{k.shape[0]} keys but {v.shape[0]} values")
    if k.shape[0] == 0:
        raise MaskingError("attention over an empty key set")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (q.shape[0], k.shape[0]):
            raise ShapeError(f"mask shape {mask.shape} != {(q.shape[0], k.shape[0])}")
        empty = np.flatnonzero(~mask.any(axis=1))
        if empty.size:
            raise MaskingError(f"query rows {empty.tolist()} have no permitted key")
    logits = ag.scale(ag.matmul(q, ag.transpose(k)), scale)
    alpha = ag.softmax_rows(logits, mask)
    weights = [alpha.data] if keep_weights else []
    drop = dropout.mask(alpha.shape, alpha.data.dtype)
    if drop is not None:
        alpha = ag.mul(alpha, drop)
    return AttentionOutput(ag.matmul(alpha, v), weights)


def multi_head_attention(
    x_q,
    x_kv,
    params: AttentionParams,
    dropout: Dropout = EVAL,
    mask: np.ndarray | None = None,
    keep_weights: bool = False,
) -> AttentionOutput:
    """Queries from ``x_q`` attend over keys/values projected from ``x_kv``."""
    x_q, x_kv = ag.as_tensor(x_q), ag.as_tensor(x_kv)
    d = params.d_model
    if x_q.shape[1] != d or x_kv.shape[1] != d:
        raise ShapeError(f"inputs {x_q.shape}, {x_kv.shape} do not match d_model={d}")
    q = ag.matmul(x_q, params.w_q)
    k = ag.matmul(x_kv, params.w_k)
    v = ag.matmul(x_kv, params.w_v)
    hd = params.head_dim
    beta = 1.0 / math.sqrt(hd)
    heads, weights = [], []
    for h in range(params.num_heads):
        lo, hi = h * hd, (h + 1) * hd
        out = scaled_dot_attention(
            ag.cols(q, lo, hi), ag.cols(k, lo, hi), ag.cols(v, lo, hi), beta, mask, dropout, keep_weights
        )
        heads.append(out.z)
        weights.extend(out.weights)
    z = heads[0] if len(heads) == 1 else ag.concat_cols(heads)
    return AttentionOutput(ag.matmul(z, params.w_out), weights)


def multi_head_self_attention(
    x, params: AttentionParams, dropout: Dropout = EVAL, mask: np.ndarray | None = None, keep_weights: bool = False
) -> AttentionOutput:
    return multi_head_attention(x, x, params, dropout, mask, keep_weights)


def time_restricted_mask(t_len: int, left: int | None, right: int | None) -> np.ndarray:
    """Band mask: query t may attend key tau iff t-left <= tau <= t+right (None = unbounded)."""
    if (left is not None and left < 0) or (right is not None and right < 0):
        raise ParameterError(f"window sizes must be >= 0, got left={left}, right={right}")
    t = np.arange(t_len)[:, None]
    tau = np.arange(t_len)[None, :]
    ok = np.ones((t_len, t_len), dtype=bool)
    if left is not None:
        ok &= tau >= t - left
    if right is not None:
        ok &= tau <= t + right
    return ok
