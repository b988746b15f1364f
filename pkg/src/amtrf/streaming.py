"""Incremental frame-in / logits-out engine, look-ahead accounting and causality probes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import model as M
from .errors import LifecycleError, ParameterError, ShapeError
from .math_core import FeatureMatrix, SeededRng


@dataclass
class StreamState:
    """Per-utterance streaming state. Single owner; mutated in place by push/finish.

    Raw frames wait in ``raw_buffer`` until a full frontend window is present;
    model-rate frames wait in ``frames`` (starting at absolute index
    ``frames_offset``) until a whole segment plus its right context has arrived.
    """

    config: M.ModelConfig
    layer_states: list
    raw_buffer: np.ndarray
    raw_offset: int = 0
    frames: np.ndarray | None = None
    frames_offset: int = 0
    frames_received: int = 0
    next_segment: int = 0
    emitted_count: int = 0
    finished: bool = False

    @property
    def pending(self) -> int:
        return self.frames_received - self.emitted_count

    def resident_frames(self) -> int:
        """Frames currently held in buffers (raw + model rate)."""
        return int(self.raw_buffer.shape[0]) + (0 if self.frames is None else int(self.frames.shape[0]))


def stream_init(config: M.ModelConfig) -> StreamState:
    if config.variant not in M.SEGMENTED:
        raise ParameterError(f"variant {config.variant!r} is not streamable segment-by-segment")
    return StreamState(
        config=config,
        layer_states=M.init_layer_states(config),
        raw_buffer=np.zeros((0, config.input_dim), dtype=config.dtype),
        frames=np.zeros((0, config.layer.d_model), dtype=config.dtype),
    )


def _run_frontend(state: StreamState, tensors: dict) -> None:
    cfg = state.config
    w, s = cfg.frontend_window, cfg.frontend_stride
    n_raw = state.raw_offset + state.raw_buffer.shape[0]
    n_new = M.frontend_length(n_raw, cfg) - state.frames_received
    if n_new <= 0:
        return
    lo = state.frames_received * s - state.raw_offset
    hi = lo + (n_new - 1) * s + w
    h = M.frontend_tensor(state.raw_buffer[lo:hi], cfg, tensors).data
    state.frames = np.concatenate([state.frames, h], axis=0)
    state.frames_received += n_new
    keep_from = state.frames_received * s
    state.raw_buffer = state.raw_buffer[keep_from - state.raw_offset :]
    state.raw_offset = keep_from


def _emit_segment(state: StreamState, tensors: dict, lps: list, total: int | None) -> np.ndarray:
    cfg = state.config
    B, L, R = M.segment_geometry(cfg)
    n = state.next_segment
    limit = state.frames_received if total is None else total
    start, end = n * B, min((n + 1) * B, limit)
    left, right = max(0, start - L), min(limit, end + R)
    off = state.frames_offset
    window = state.frames[left - off : right - off]
    center, state.layer_states = M.run_segment(
        window, start - left, end - start, state.layer_states, cfg, lps, segment_index=n
    )
    logits = M.output_head(center, tensors).data
    state.next_segment += 1
    state.emitted_count = end
    drop = max(0, state.next_segment * B - L) - off
    if drop > 0:
        state.frames = state.frames[drop:]
        state.frames_offset += drop
    return logits


def _empty_logits(cfg: M.ModelConfig) -> np.ndarray:
    return np.zeros((0, cfg.output_classes), dtype=cfg.dtype)


def stream_push(state: StreamState, frames, params: M.Params) -> tuple[StreamState, np.ndarray]:
    """Feed raw frames; returns the state and the logits of every segment completed by them."""
    if state.finished:
        raise LifecycleError("stream_push after stream_finish")
    cfg = state.config
    data = np.asarray(frames.data if isinstance(frames, FeatureMatrix) else frames)
    if data.ndim != 2 or data.shape[1] != cfg.input_dim:
        raise ShapeError(f"pushed frames {data.shape} do not match input_dim={cfg.input_dim}")
    state.raw_buffer = np.concatenate([state.raw_buffer, data.astype(cfg.dtype, copy=False)], axis=0)
    tensors = M.as_tensors(params)
    _run_frontend(state, tensors)
    B, _, R = M.segment_geometry(cfg)
    out = []
    lps = None
    while (state.next_segment + 1) * B + R <= state.frames_received:
        lps = lps or M.layer_params(cfg, tensors)
        out.append(_emit_segment(state, tensors, lps, None))
    return state, (np.concatenate(out, axis=0) if out else _empty_logits(cfg))


def stream_finish(state: StreamState, params: M.Params) -> np.ndarray:
    """Flush the remaining frames as final (possibly partial) segments."""
    if state.finished:
        raise LifecycleError("stream_finish called twice")
    state.finished = True
    tensors = M.as_tensors(params)
    lps = M.layer_params(state.config, tensors)
    out = []
    total = state.frames_received
    while state.emitted_count < total:
        out.append(_emit_segment(state, tensors, lps, total))
    state.raw_buffer = state.raw_buffer[:0]
    return np.concatenate(out, axis=0) if out else _empty_logits(state.config)


def stream_utterance(x, config: M.ModelConfig, params: M.Params, chunk: int | None = None) -> np.ndarray:
    """Stream a whole utterance through the engine in chunks of ``chunk`` raw frames."""
    data = np.asarray(x.data if isinstance(x, FeatureMatrix) else x)
    chunk = data.shape[0] if not chunk else chunk
    state = stream_init(config)
    out = []
    for i in range(0, data.shape[0], chunk):
        state, y = stream_push(state, data[i : i + chunk], params)
        out.append(y)
    out.append(stream_finish(state, params))
    return np.concatenate(out, axis=0)


# -- latency -------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyReport:
    """Algorithmic latency of a configuration. ``None`` frame counts mean unbounded."""

    variant: str
    lookahead_frames: int | None
    frame_period_ms: float
    buffering_delay_frames: int | None
    per_layer_growth: bool
    segment_B: int = 0
    memory_capacity: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def lookahead_ms(self) -> float | None:
        return None if self.lookahead_frames is None else self.lookahead_frames * self.frame_period_ms

    def memory_slots_for(self, duration_ms: float) -> int:
        """Memory slots written over an utterance of ``duration_ms`` (capped by capacity)."""
        if self.variant != "aug_mem":
            return 0
        slots = math.ceil(duration_ms / (self.segment_B * self.frame_period_ms))
        return slots if self.memory_capacity is None else min(slots, self.memory_capacity)

    def lines(self) -> list[str]:
        def fmt(v):
            return "inf" if v is None else f"{v:g}" if isinstance(v, float) else str(v)

        ms = self.lookahead_ms
        return [
            f"variant={self.variant}",
            f"lookahead_frames={fmt(self.lookahead_frames)}",
            f"lookahead_ms={fmt(ms)}",
            f"lookahead_s={fmt(None if ms is None else ms / 1000.0)}",
            f"buffering_delay_frames={fmt(self.buffering_delay_frames)}",
            f"per_layer_growth={str(self.per_layer_growth).lower()}",
            f"frame_period_ms={fmt(float(self.frame_period_ms))}",
            f"memory_slots_for_35s={self.memory_slots_for(35000.0)}",
        ]


def lookahead(config: M.ModelConfig) -> LatencyReport:
    v = config.variant
    common = dict(
        variant=v,
        frame_period_ms=config.frame_period_ms,
        segment_B=config.segment_B,
        memory_capacity=config.memory_capacity,
    )
    if v in M.SEGMENTED:
        return LatencyReport(
            lookahead_frames=config.context_R,
            buffering_delay_frames=config.segment_B - 1,
            per_layer_growth=False,
            **common,
        )
    if v == "time_restricted":
        la = None if config.trt_right is None else config.trt_right * config.layers
        return LatencyReport(lookahead_frames=la, buffering_delay_frames=0, per_layer_growth=True, **common)
    return LatencyReport(lookahead_frames=None, buffering_delay_frames=None, per_layer_growth=False, **common)


def lookahead_for_frame(config: M.ModelConfig, t: int, t_len: int) -> int | None:
    """How many frames past ``t`` can influence the output at ``t`` (None = unbounded)."""
    v = config.variant
    if v in M.SEGMENTED:
        B, _, R = M.segment_geometry(config)
        n = t // B
        return min(t_len, (n + 1) * B + R) - 1 - t
    if v == "time_restricted":
        if config.trt_right is None:
            return None
        return config.trt_right * config.layers
    return None


def probe_change(
    config: M.ModelConfig,
    params: M.Params,
    t_probe: int,
    delta: int,
    rng: SeededRng,
    t_len: int | None = None,
    bump: float = 1.0,
) -> float:
    """Max |change| in model-rate logits at frames <= t_probe after bumping frame t_probe+delta."""
    t_len = t_probe + delta + 1 + config.segment_B if t_len is None else t_len
    target = t_probe + delta
    if t_probe < 0 or delta < 0 or target >= t_len:
        raise ParameterError(f"probe frame {target} outside utterance of {t_len} frames")
    h = rng.normal((t_len, config.layer.d_model)).astype(config.dtype)
    base = M.encode_model_rate(h, config, params)
    h2 = h.copy()
    h2[target] += (bump * rng.normal((config.layer.d_model,))).astype(config.dtype)
    moved = M.encode_model_rate(h2, config, params)
    return float(np.max(np.abs(moved[: t_probe + 1] - base[: t_probe + 1])))


def causality_probe(
    config: M.ModelConfig,
    params: M.Params,
    t_probe: int,
    delta: int,
    rng: SeededRng,
    t_len: int | None = None,
) -> bool:
    """True when perturbing frame ``t_probe + delta`` moves any logit at frames <= ``t_probe`` by > 1e-9."""
    return probe_change(config, params, t_probe, delta, rng, t_len) > 1e-9


def probe_gradient(
    config: M.ModelConfig,
    params: M.Params,
    t_probe: int,
    delta: int,
    rng: SeededRng,
    t_len: int | None = None,
) -> float:
    """Max |d logits[t_probe] / d h[t_probe + delta]| under a random output direction.

    Unlike :func:`probe_change` this survives deep stacks where the influence of a
    far frame is real but smaller than one ulp of the logits.
    """
    t_len = t_probe + delta + 1 + config.segment_B if t_len is None else t_len
    target = t_probe + delta
    if t_probe < 0 or delta < 0 or target >= t_len:
        raise ParameterError(f"probe frame {target} outside utterance of {t_len} frames")
    tensors = M.as_tensors(params)
    h = ag.Tensor(rng.normal((t_len, config.layer.d_model)).astype(config.dtype), requires_grad=True)
    out = M.output_head(M.encode_body(h, config, tensors), tensors)
    g = np.zeros_like(out.data)
    g[t_probe] = rng.normal((config.output_classes,))
    ag.backward(out, g)
    return float(np.max(np.abs(h.grad[target])))
