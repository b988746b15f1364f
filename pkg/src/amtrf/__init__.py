"""Augmented-memory streaming transformer: attention variants, streaming engine, latency and training tools."""

from .attention import AttentionParams, multi_head_self_attention, scaled_dot_attention, time_restricted_mask
from .augmem import MemoryBank, augmem_attention_step, memory_append, segment_utterance, txl_attention_step
from .math_core import Dropout, FeatureMatrix, SeededRng
from .model import LayerConfig, ModelConfig, encode_utterance, init_params
from .streaming import causality_probe, lookahead, stream_finish, stream_init, stream_push, stream_utterance

__version__ = "0.1.0"

__all__ = [
    "AttentionParams",
    "Dropout",
    "FeatureMatrix",
    "LayerConfig",
    "MemoryBank",
    "ModelConfig",
    "SeededRng",
    "augmem_attention_step",
    "causality_probe",
    "encode_utterance",
    "init_params",
    "lookahead",
    "memory_append",
    "multi_head_self_attention",
    "scaled_dot_attention",
    "segment_utterance",
    "stream_finish",
    "stream_init",
    "stream_push",
    "stream_utterance",
    "time_restricted_mask",
    "txl_attention_step",
]
