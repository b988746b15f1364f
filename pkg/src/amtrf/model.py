"""Transformer layers, the four encoder variants, parameters and checkpoints.

Layer wiring is pre-norm::

    y   = x + Dropout(Attention(LN1(x)))
    out = y + Dropout(FFN(LN2(y)))       FFN = Linear -> ReLU -> Linear

A frame-stacking frontend maps raw frames to model rate; a final layer norm
and a linear classifier turn encoder outputs into per-frame logits
(``T_out x classes``, frame-major).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields, replace
from typing import Any

import numpy as np

from . import autograd as ag
from .attention import AttentionParams, multi_head_self_attention, time_restricted_mask
from .augmem import (
    ContextualSegment,
    MemoryBank,
    augmem_attention_step,
    segment_bounds,
    txl_attention_step,
)
from .autograd import Tensor
from .errors import ConfigError, EmptyInputError, MatrixIOError, ParameterError, ShapeError
from .math_core import EVAL, Dropout, FeatureMatrix, SeededRng, atomic_write_text, dtype_for, format_matrix, parse_matrix_lines

VARIANTS = ("aug_mem", "txl", "time_restricted", "full_context")
SEGMENTED = ("aug_mem", "txl")

Params = dict  # name -> np.ndarray


@dataclass(frozen=True)
class LayerConfig:
    d_model: int = 512
    num_heads: int = 8
    ffn_dim: int = 2048
    dropout_rate: float = 0.1
    variant: str = "aug_mem"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.d_model < 1 or self.num_heads < 1 or self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} must be a positive multiple of num_heads={self.num_heads}")
        if self.ffn_dim < 1:
            raise ConfigError(f"ffn_dim must be >= 1, got {self.ffn_dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass(frozen=True)
class ModelConfig:
    """Model geometry. ``segment_B``/``context_*``/``trt_*`` count model-rate
    frames; ``frame_period_ms`` is the model-rate frame period. ``None`` means
    unbounded for ``memory_capacity`` and the ``trt_*`` windows."""

    layers: int = 12
    layer: LayerConfig = field(default_factory=LayerConfig)
    segment_B: int = 128
    context_L: int = 64
    context_R: int = 32
    memory_capacity: int | None = None
    trt_left: int | None = None
    trt_right: int | None = 3
    frontend_stride: int = 2
    frontend_window: int = 2
    input_dim: int = 80
    output_classes: int = 32
    frame_period_ms: float = 10.0
    precision: int = 64
    truncate_memory_grad: bool = False

    def __post_init__(self):
        checks = [
            (self.layers >= 1, "layers must be >= 1"),
            (self.segment_B >= 1, "segment_B must be >= 1"),
            (self.context_L >= 0, "context_L must be >= 0"),
            (self.context_R >= 0, "context_R must be >= 0"),
            (self.memory_capacity is None or self.memory_capacity >= 0, "memory_capacity must be >= 0"),
            (self.trt_left is None or self.trt_left >= 0, "trt_left must be >= 0"),
            (self.trt_right is None or self.trt_right >= 0, "trt_right must be >= 0"),
            (self.frontend_stride >= 1, "frontend_stride must be >= 1"),
            (self.frontend_window >= self.frontend_stride, "frontend_window must be >= frontend_stride"),
            (self.input_dim >= 1, "input_dim must be >= 1"),
            (self.output_classes >= 1, "output_classes must be >= 1"),
            (self.frame_period_ms > 0, "frame_period_ms must be > 0"),
            (self.precision in (32, 64), "precision must be 32 or 64"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def variant(self) -> str:
        return self.layer.variant

    @property
    def dtype(self):
        return dtype_for(self.precision)

    def with_(self, **kw) -> "ModelConfig":
        """Copy with overrides; layer-level keys (d_model, variant, ...) are routed to ``layer``."""
        layer_keys = {f.name for f in fields(LayerConfig)}
        lk = {k: kw.pop(k) for k in list(kw) if k in layer_keys}
        layer = replace(self.layer, **lk) if lk else self.layer
        return replace(self, layer=layer, **kw)

    # -- flat key=value form (config files, checkpoint headers) --------------

    def to_flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            if f.name == "layer":
                for lf in fields(LayerConfig):
                    out[lf.name] = getattr(self.layer, lf.name)
            else:
                out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_flat(cls, values: dict[str, Any]) -> "ModelConfig":
        unknown = set(values) - set(FLAT_KEYS)
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls().with_(**values)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> int | None:
    t = text.strip().lower()
    if t in ("inf", "none", "unbounded", "infinity"):
        return None
    return int(t)


FLAT_KEYS: dict[str, Any] = {
    "layers": int,
    "d_model": int,
    "num_heads": int,
    "ffn_dim": int,
    "dropout_rate": float,
    "variant": str,
    "segment_B": int,
    "context_L": int,
    "context_R": int,
    "memory_capacity": _opt_int,
    "trt_left": _opt_int,
    "trt_right": _opt_int,
    "frontend_stride": int,
    "frontend_window": int,
    "input_dim": int,
    "output_classes": int,
    "frame_period_ms": float,
    "precision": int,
    "truncate_memory_grad": _bool,
}


def format_flat_value(v) -> str:
    if v is None:
        return "inf"
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- parameters -----------------------------------------------------------------

LAYER_PARAM_NAMES = (
    "ln1.gain", "ln1.bias",
    "attn.w_q", "attn.w_k", "attn.w_v", "attn.w_out",
    "ln2.gain", "ln2.bias",
    "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
)  # fmt: skip


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.layer.d_model, config.layer.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "frontend.w": (config.frontend_window * config.input_dim, d),
        "frontend.b": (d,),
    }
    per_layer = {
        "ln1.gain": (d,), "ln1.bias": (d,),
        "attn.w_q": (d, d), "attn.w_k": (d, d), "attn.w_v": (d, d), "attn.w_out": (d, d),
        "ln2.gain": (d,), "ln2.bias": (d,),
        "ffn.w1": (d, f), "ffn.b1": (f,), "ffn.w2": (f, d), "ffn.b2": (d,),
    }  # fmt: skip
    for i in range(config.layers):
        for name in LAYER_PARAM_NAMES:
            shapes[f"layers.{i}.{name}"] = per_layer[name]
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    shapes["classifier.w"] = (d, config.output_classes)
    shapes["classifier.b"] = (config.output_classes,)
    return shapes


def init_params(config: ModelConfig, rng: SeededRng) -> Params:
    """Glorot-uniform weights, zero biases, unit layer-norm gains; order is fixed so seeds are stable."""
    dtype = config.dtype
    params: Params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if len(shape) == 2:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-a, a, shape).astype(dtype)
        elif leaf == "gain":
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def check_params(config: ModelConfig, params: Params) -> None:
    shapes = param_shapes(config)
    missing = set(shapes) - set(params)
    extra = set(params) - set(shapes)
    if missing or extra:
        raise ShapeError(f"params do not match config (missing {sorted(missing)}, extra {sorted(extra)})")
    for name, shape in shapes.items():
        if np.shape(params[name]) != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {np.shape(params[name])}")


def as_tensors(params: Params, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


@dataclass
class LayerParams:
    ln1_gain: Any
    ln1_bias: Any
    attn: AttentionParams
    ln2_gain: Any
    ln2_bias: Any
    w1: Any
    b1: Any
    w2: Any
    b2: Any

    @classmethod
    def from_dict(cls, tensors: dict, layer: int, num_heads: int) -> "LayerParams":
        p = f"layers.{layer}."
        return cls(
            ln1_gain=tensors[p + "ln1.gain"],
            ln1_bias=tensors[p + "ln1.bias"],
            attn=AttentionParams(
                tensors[p + "attn.w_q"], tensors[p + "attn.w_k"], tensors[p + "attn.w_v"], tensors[p + "attn.w_out"],
                num_heads,
            ),
            ln2_gain=tensors[p + "ln2.gain"],
            ln2_bias=tensors[p + "ln2.bias"],
            w1=tensors[p + "ffn.w1"],
            b1=tensors[p + "ffn.b1"],
            w2=tensors[p + "ffn.w2"],
            b2=tensors[p + "ffn.b2"],
        )


# -- layer ------------------------------------------------------------------------


def _dropout(x: Tensor, dropout: Dropout) -> Tensor:
    m = dropout.mask(x.shape, x.data.dtype)
    return x if m is None else ag.mul(x, m)


def feed_forward(x, lp: LayerParams) -> Tensor:
    h = ag.relu(ag.add(ag.matmul(x, lp.w1), lp.b1))
    return ag.add(ag.matmul(h, lp.w2), lp.b2)


def transformer_layer_step(
    x,
    state,
    config: LayerConfig,
    lp: LayerParams,
    dropout: Dropout = EVAL,
    *,
    n_left: int = 0,
    n_center: int | None = None,
    mask: np.ndarray | None = None,
    cache_override=None,
):
    """Run one layer over a block of frames; returns ``(output, new_state)``.

    ``state`` is a :class:`MemoryBank` for ``aug_mem``, the cached previous
    center block (or None) for ``txl``, and ignored otherwise. For the
    segmented variants ``x`` is a padded window whose center starts at row
    ``n_left`` and spans ``n_center`` rows. ``cache_override`` replaces the txl
    cache values (used to hold the cache fixed under finite differences).
    """
    x = ag.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != config.d_model:
        raise ShapeError(f"layer input {x.shape} does not match d_model={config.d_model}")
    n_center = x.shape[0] - n_left if n_center is None else n_center
    a = ag.layer_norm(x, lp.ln1_gain, lp.ln1_bias)
    new_state = state
    if config.variant == "aug_mem":
        seg = ContextualSegment.from_window(a, n_left, n_center)
        step = augmem_attention_step(seg, state, lp.attn, dropout)
        z = step.z
        new_state = state.append(step.new_slot)
    elif config.variant == "txl":
        cache = state if cache_override is None else cache_override
        prev = None
        if cache is not None:
            prev = ag.layer_norm(ag.detach(cache), lp.ln1_gain, lp.ln1_bias)
        z = txl_attention_step(a, prev, lp.attn, dropout, stop_gradient=False).z
        new_state = ag.rows(x, n_left, n_left + n_center)
    else:
        z = multi_head_self_attention(a, lp.attn, dropout, mask).z
    y = ag.add(x, _dropout(z, dropout))
    f = feed_forward(ag.layer_norm(y, lp.ln2_gain, lp.ln2_bias), lp)
    return ag.add(y, _dropout(f, dropout)), new_state


# -- frontend and full encoder -------------------------------------------------------


def stack_frames(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    if stride < 1 or window < stride:
        raise ParameterError(f"need window >= stride >= 1 (got window={window}, stride={stride})")
    x = np.asarray(x)
    t = x.shape[0]
    if t < window:
        raise EmptyInputError(f"{t} frames is fewer than the frontend window {window}")
    t_out = (t - window) // stride + 1
    idx = np.arange(t_out)[:, None] * stride + np.arange(window)[None, :]
    return x[idx].reshape(t_out, window * x.shape[1])


def frontend_subsample(x: FeatureMatrix, window: int, stride: int, proj, bias=None) -> FeatureMatrix:
    """Stack ``window`` consecutive frames every ``stride`` frames and project."""
    stacked = stack_frames(x.data, window, stride)
    out = ag.matmul(stacked, proj)
    if bias is not None:
        out = ag.add(out, bias)
    return FeatureMatrix(out.data, x.period_ms * stride)


def frontend_length(t_raw: int, config: ModelConfig) -> int:
    if t_raw < config.frontend_window:
        return 0
    return (t_raw - config.frontend_window) // config.frontend_stride + 1


def init_layer_states(config: ModelConfig) -> list:
    if config.variant == "aug_mem":
        return [MemoryBank(capacity=config.memory_capacity) for _ in range(config.layers)]
    return [None] * config.layers


def layer_params(config: ModelConfig, tensors: dict) -> list[LayerParams]:
    return [LayerParams.from_dict(tensors, i, config.layer.num_heads) for i in range(config.layers)]


def run_segment(
    window,
    n_left: int,
    n_center: int,
    states: list,
    config: ModelConfig,
    lps: list[LayerParams],
    dropout: Dropout = EVAL,
    *,
    segment_index: int = 0,
    txl_log: dict | None = None,
    txl_replay: dict | None = None,
):
    """Push one padded window through every layer; returns (center rows, new states)."""
    h = ag.as_tensor(window)
    new_states = []
    for i, lp in enumerate(lps):
        override = None
        if config.variant == "txl":
            key = (i, segment_index)
            if txl_replay is not None:
                override = txl_replay.get(key)
            if txl_log is not None and states[i] is not None:
                txl_log[key] = np.array(np.asarray(states[i]))
        h, st = transformer_layer_step(
            h, states[i], config.layer, lp, dropout, n_left=n_left, n_center=n_center, cache_override=override
        )
        new_states.append(st)
    return ag.rows(h, n_left, n_left + n_center), new_states


def segment_geometry(config: ModelConfig) -> tuple[int, int, int]:
    """(B, L, R) actually used; the txl variant has no left context (its cache plays that role)."""
    L = 0 if config.variant == "txl" else config.context_L
    return config.segment_B, L, config.context_R


def encode_body(
    h,
    config: ModelConfig,
    tensors: dict,
    dropout: Dropout = EVAL,
    *,
    txl_log: dict | None = None,
    txl_replay: dict | None = None,
) -> Tensor:
    """Model-rate frames -> final-layer encoder outputs, one row per input frame."""
    h = ag.as_tensor(h)
    t = h.shape[0]
    if t == 0:
        raise EmptyInputError("no frames at model rate")
    lps = layer_params(config, tensors)
    if config.variant not in SEGMENTED:
        mask = None
        if config.variant == "time_restricted" and (config.trt_left is not None or config.trt_right is not None):
            mask = time_restricted_mask(t, config.trt_left, config.trt_right)
        for lp in lps:
            h, _ = transformer_layer_step(h, None, config.layer, lp, dropout, mask=mask)
        return h
    B, L, R = segment_geometry(config)
    states = init_layer_states(config)
    outs = []
    for b in segment_bounds(t, B, L, R):
        center, states = run_segment(
            ag.rows(h, b.left, b.right), b.n_left, b.n_center, states, config, lps, dropout,
            segment_index=b.index, txl_log=txl_log, txl_replay=txl_replay,
        )  # fmt: skip
        outs.append(center)
    return outs[0] if len(outs) == 1 else ag.concat_rows(outs)


def output_head(h, tensors: dict) -> Tensor:
    h = ag.layer_norm(h, tensors["final_ln.gain"], tensors["final_ln.bias"])
    return ag.add(ag.matmul(h, tensors["classifier.w"]), tensors["classifier.b"])


def frontend_tensor(x: np.ndarray, config: ModelConfig, tensors: dict) -> Tensor:
    stacked = stack_frames(x, config.frontend_window, config.frontend_stride)
    return ag.add(ag.matmul(stacked, tensors["frontend.w"]), tensors["frontend.b"])


def _input_array(x, config: ModelConfig) -> np.ndarray:
    data = x.data if isinstance(x, FeatureMatrix) else np.asarray(x)
    if data.ndim != 2 or data.shape[1] != config.input_dim:
        raise ShapeError(f"input shape {data.shape} does not match input_dim={config.input_dim}")
    return data.astype(config.dtype, copy=False)


def forward(
    x,
    config: ModelConfig,
    tensors: dict,
    dropout: Dropout = EVAL,
    *,
    txl_log: dict | None = None,
    txl_replay: dict | None = None,
) -> Tensor:
    """Raw frames -> logits (``T_out x classes``) as a graph node."""
    h = frontend_tensor(_input_array(x, config), config, tensors)
    h = encode_body(h, config, tensors, dropout, txl_log=txl_log, txl_replay=txl_replay)
    return output_head(h, tensors)


def encode_utterance(x, config: ModelConfig, params: Params, dropout: Dropout = EVAL) -> np.ndarray:
    """Whole-utterance logits for raw input frames (``T x input_dim``)."""
    check_params(config, params)
    return forward(x, config, as_tensors(params), dropout).data


def encode_model_rate(h: np.ndarray, config: ModelConfig, params: Params) -> np.ndarray:
    """Logits for frames that are already at model rate (frontend skipped)."""
    h = np.asarray(h, dtype=config.dtype)
    if h.ndim != 2 or h.shape[1] != config.layer.d_model:
        raise ShapeError(f"model-rate input {h.shape} does not match d_model={config.layer.d_model}")
    tensors = as_tensors(params)
    return output_head(encode_body(h, config, tensors), tensors).data


# -- checkpoint format ------------------------------------------------------------

_SECTION = re.compile(r"^\[(?P<name>[A-Za-z0-9_.]+)(?: layer=(?P<layer>\d+))?\]$")
CHECKPOINT_MAGIC = "# amtrf checkpoint v1"


def _section_name(name: str) -> str:
    m = re.match(r"^layers\.(\d+)\.(.+)$", name)
    return f"[{m.group(2)} layer={m.group(1)}]" if m else f"[{name}]"


def format_checkpoint(config: ModelConfig, params: Params) -> str:
    check_params(config, params)
    parts = [CHECKPOINT_MAGIC, "[config]"]
    parts += [f"{k}={format_flat_value(v)}" for k, v in config.to_flat().items()]
    for name in param_shapes(config):
        parts.append(_section_name(name))
        parts.append(format_matrix(np.atleast_2d(params[name])).rstrip("\n"))
    return "\n".join(parts) + "\n"


def parse_checkpoint(text: str, source: str = "<checkpoint>") -> tuple[ModelConfig, Params]:
    lines = [ln.rstrip("\n") for ln in text.splitlines()]
    if not lines or lines[0].strip() != CHECKPOINT_MAGIC:
        raise MatrixIOError(f"{source}: not an amtrf checkpoint")
    i = 1
    if i >= len(lines) or lines[i].strip() != "[config]":
        raise MatrixIOError(f"{source}: missing [config] section")
    i += 1
    flat: dict[str, Any] = {}
    while i < len(lines) and not lines[i].startswith("["):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        key, _, val = line.partition("=")
        if key not in FLAT_KEYS:
            raise MatrixIOError(f"{source}:{i}: unknown config key {key!r}")
        flat[key] = FLAT_KEYS[key](val)
    config = ModelConfig.from_flat(flat)
    shapes = param_shapes(config)
    params: Params = {}
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        m = _SECTION.match(line)
        if not m:
            raise MatrixIOError(f"{source}:{i}: expected a section header, got {line!r}")
        name = m.group("name") if m.group("layer") is None else f"layers.{m.group('layer')}.{m.group('name')}"
        if name not in shapes:
            raise MatrixIOError(f"{source}:{i}: unknown parameter section {line}")
        rows = int(lines[i].split()[0])
        mat = parse_matrix_lines(lines[i : i + rows + 1], dtype=config.dtype, source=f"{source}:{name}")
        i += rows + 1
        params[name] = mat.reshape(shapes[name])
    check_params(config, params)
    return config, params


def save_checkpoint(path, config: ModelConfig, params: Params) -> None:
    atomic_write_text(path, format_checkpoint(config, params))


def load_checkpoint(path) -> tuple[ModelConfig, Params]:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise MatrixIOError(f"{path}: {exc}") from exc
    return parse_checkpoint(text, source=str(path))
