"""Segmentation with context, the memory bank, and the memory-augmented attention step.

Also hosts the transformer-XL step used as a baseline: one cached segment from
the layer below, treated as a constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .attention import AttentionOutput, AttentionParams, multi_head_attention
from .autograd import Tensor
from .errors import EmptyInputError, ParameterError, ShapeError
from .math_core import EVAL, Dropout, FeatureMatrix

POOLING_METHODS = ("average", "max", "linear")


@dataclass(frozen=True)
class SegmentBounds:
    """Frame indices of one segment: left context [left, start), center [start, end), right [end, right)."""

    index: int
    left: int
    start: int
    end: int
    right: int

    @property
    def window(self) -> tuple[int, int]:
        return self.left, self.right

    @property
    def n_left(self) -> int:
        return self.start - self.left

    @property
    def n_center(self) -> int:
        return self.end - self.start

    @property
    def n_right(self) -> int:
        return self.right - self.end


def segment_bounds(t_len: int, B: int, L: int, R: int) -> list[SegmentBounds]:
    if B < 1 or L < 0 or R < 0:
        raise ParameterError(f"need B >= 1, L >= 0, R >= 0 (got B={B}, L={L}, R={R})")
    if t_len < 1:
        raise EmptyInputError("cannot segment an empty utterance")
    out = []
    for n in range(math.ceil(t_len / B)):
        start, end = n * B, min((n + 1) * B, t_len)
        out.append(SegmentBounds(n, max(0, start - L), start, end, min(t_len, end + R)))
    return out


@dataclass
class ContextualSegment:
    center: Tensor | np.ndarray
    left: Tensor | np.ndarray
    right: Tensor | np.ndarray
    segment_index: int
    source_range: tuple[int, int]

    @property
    def n_left(self) -> int:
        return int(np.shape(self.left)[0])

    @property
    def n_center(self) -> int:
        return int(np.shape(self.center)[0])

    @property
    def n_right(self) -> int:
        return int(np.shape(self.right)[0])

    def window(self) -> Tensor:
        parts = [p for p in (self.left, self.center, self.right) if np.shape(p)[0] > 0]
        return ag.concat_rows(parts) if len(parts) > 1 else ag.as_tensor(parts[0])

    @classmethod
    def from_window(cls, window, n_left: int, n_center: int, index: int = 0, start: int = 0) -> "ContextualSegment":
        """Split a padded window (left + center + right rows) back into its parts."""
        w = ag.as_tensor(window)
        n = w.shape[0]
        return cls(
            center=ag.rows(w, n_left, n_left + n_center),
            left=ag.rows(w, 0, n_left),
            right=ag.rows(w, n_left + n_center, n),
            segment_index=index,
            source_range=(start, start + n_center),
        )


def segment_utterance(x: FeatureMatrix | np.ndarray, B: int, L: int, R: int) -> list[ContextualSegment]:
    data = x.data if isinstance(x, FeatureMatrix) else np.asarray(x)
    if data.ndim != 2 or data.shape[0] == 0:
        raise EmptyInputError(f"cannot segment input of shape {data.shape}")
    return [
        ContextualSegment(
            center=data[b.start : b.end],
            left=data[b.left : b.start],
            right=data[b.end : b.right],
            segment_index=b.index,
            source_range=(b.start, b.end),
        )
        for b in segment_bounds(data.shape[0], B, L, R)
    ]


def summarization_query(segment: ContextualSegment, method: str = "average") -> Tensor:
    """Pool the center block (contexts excluded) into one query vector."""
    if method not in POOLING_METHODS:
        raise ParameterError(f"unknown pooling method {method!r}; expected one of {POOLING_METHODS}")
    if method != "average":
        raise NotImplementedError(f"{method} pooling is unimplemented; only average pooling is supported")
    if segment.n_center == 0:
        raise EmptyInputError("summarization query needs a non-empty center")
    return ag.mean_rows(segment.center)


@dataclass(frozen=True)
class MemoryBank:
    """Ordered memory slots, oldest first. Immutable: ``append`` returns a new bank."""

    slots: tuple = ()
    capacity: int | None = None
    total_written: int = 0

    def __post_init__(self):
        if self.capacity is not None and self.capacity < 0:
            raise ParameterError(f"memory capacity must be >= 0, got {self.capacity}")

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def dim(self) -> int | None:
        return int(np.shape(self.slots[0])[-1]) if self.slots else None

    def matrix(self) -> Tensor | None:
        return ag.stack_rows(self.slots) if self.slots else None

    def append(self, slot) -> "MemoryBank":
        return memory_append(self, slot)


def memory_append(memory: MemoryBank, slot) -> MemoryBank:
    shape = np.shape(slot)
    if len(shape) != 1:
        raise ShapeError(f"memory slot must be a vector, got shape {shape}")
    if memory.dim is not None and shape[0] != memory.dim:
        raise ShapeError(f"slot dim {shape[0]} != bank dim {memory.dim}")
    slots = memory.slots + (slot,)
    if memory.capacity is not None:
        slots = slots[-memory.capacity :] if memory.capacity else ()
    return MemoryBank(slots, memory.capacity, memory.total_written + 1)


@dataclass
class AugMemStepOutput:
    z: Tensor
    new_slot: Tensor
    weights: list[np.ndarray] = field(default_factory=list)


def augmem_attention_step(
    segment: ContextualSegment,
    memory: MemoryBank,
    params: AttentionParams,
    dropout: Dropout = EVAL,
    keep_weights: bool = False,
) -> AugMemStepOutput:
    """One memory-augmented attention step over a padded segment.

    Queries are the window rows plus the summarization query; keys and values
    are the memory slots followed by the window rows. The bank is not touched;
    the caller appends ``new_slot``.
    """
    window = segment.window()
    d = params.d_model
    if window.shape[1] != d:
        raise ShapeError(f"segment dim {window.shape[1]} != d_model {d}")
    if memory.dim is not None and memory.dim != d:
        raise ShapeError(f"memory dim {memory.dim} != d_model {d}")
    s = ag.reshape(summarization_query(segment), (1, d))
    queries = ag.concat_rows([window, s])
    mem = memory.matrix()
    keys = window if mem is None else ag.concat_rows([mem, window])
    out = multi_head_attention(queries, keys, params, dropout, keep_weights=keep_weights)
    n = window.shape[0]
    return AugMemStepOutput(
        z=ag.rows(out.z, 0, n),
        new_slot=ag.reshape(ag.rows(out.z, n, n + 1), (d,)),
        weights=out.weights,
    )


def txl_attention_step(
    current,
    previous_lower,
    params: AttentionParams,
    dropout: Dropout = EVAL,
    keep_weights: bool = False,
    stop_gradient: bool = True,
) -> AttentionOutput:
    """Queries from ``current``; keys/values from the cached previous segment plus ``current``.

    With ``stop_gradient`` the cache is detached, so no gradient reaches
    whatever produced it. Callers that detach earlier (before a norm, say)
    pass ``stop_gradient=False``.
    """
    current = ag.as_tensor(current)
    if previous_lower is None or np.shape(previous_lower)[0] == 0:
        keys = current
    else:
        if np.shape(previous_lower)[1] != current.shape[1]:
            raise ShapeError(f"cache dim {np.shape(previous_lower)[1]} != segment dim {current.shape[1]}")
        prev = ag.detach(previous_lower) if stop_gradient else previous_lower
        keys = ag.concat_rows([prev, current])
    return multi_head_attention(current, keys, params, dropout, keep_weights=keep_weights)


def concat_centers(outputs: Sequence) -> np.ndarray:
    return np.concatenate([np.asarray(o) for o in outputs], axis=0)
