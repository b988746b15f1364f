"""Framewise cross-entropy, gradients, finite-difference checks, synthetic tasks and SGD training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import model as M
from .errors import LabelError, LifecycleError, ParameterError, ShapeError
from .math_core import Dropout, SeededRng, relative_error

TASK_KINDS = ("local_pattern", "long_range_recall")


def framewise_ce_loss(logits, labels) -> tuple[float, np.ndarray]:
    """Mean over frames of -log softmax(logits)[label]; also returns d loss / d logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"{labels.shape} labels for logits of shape {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise LabelError(f"labels must lie in [0, {logits.shape[1]}), got range [{labels.min()}, {labels.max()}]")
    t = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = float(-logp[np.arange(t), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(t), labels] -= 1.0
    return loss, grad / t


# -- forward record / backward ---------------------------------------------------------


@dataclass
class ForwardRecord:
    """Everything a backward pass (or an exact replay of the forward) needs."""

    config: M.ModelConfig
    x: np.ndarray
    tensors: dict
    logits: ag.Tensor
    dropout: Dropout
    txl_caches: dict = field(default_factory=dict)
    consumed: bool = False


def record_forward(x, config: M.ModelConfig, params: M.Params, dropout: Dropout | None = None) -> ForwardRecord:
    if config.truncate_memory_grad:
        raise NotImplementedError("truncate_memory_grad is unimplemented; gradients flow through memory slots")
    dropout = Dropout() if dropout is None else dropout
    M.check_params(config, params)
    tensors = M.as_tensors(params, requires_grad=True)
    log: dict = {}
    logits = M.forward(x, config, tensors, dropout, txl_log=log)
    return ForwardRecord(config, np.asarray(x), tensors, logits, dropout, log)


def replay_logits(record: ForwardRecord, params: M.Params) -> np.ndarray:
    """Re-run the recorded forward at new parameter values with the same dropout masks
    and the same (frozen) transformer-XL caches."""
    tensors = M.as_tensors(params)
    return M.forward(
        record.x, record.config, tensors, record.dropout.replay(), txl_replay=record.txl_caches
    ).data


def backward(params: M.Params, record: ForwardRecord | None, grad_logits=None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of ``sum(logits * grad_logits)`` for every parameter."""
    if record is None or not isinstance(record, ForwardRecord):
        raise LifecycleError("backward needs a ForwardRecord from record_forward")
    if record.consumed:
        raise LifecycleError("this forward record was already used by backward")
    if set(params) != set(record.tensors):
        raise ShapeError("params do not match the recorded forward")
    g = np.ones_like(record.logits.data) if grad_logits is None else np.asarray(grad_logits)
    ag.backward(record.logits, g)
    record.consumed = True
    out = {}
    for name, t in record.tensors.items():
        out[name] = np.zeros_like(t.data) if t.grad is None else t.grad.astype(t.data.dtype, copy=False)
    return out


def loss_and_grads(
    x, labels, config: M.ModelConfig, params: M.Params, dropout: Dropout | None = None
) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    record = record_forward(x, config, params, dropout)
    loss, g = framewise_ce_loss(record.logits.data, labels)
    return loss, record.logits.data, backward(params, record, g)


def sgd_step(params: M.Params, grads: dict[str, np.ndarray], lr: float) -> M.Params:
    out = {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ShapeError(f"{name}: grad shape {np.shape(g)} != param shape {np.shape(p)}")
        out[name] = (p - lr * g).astype(p.dtype)
    return out


# -- finite-difference verification -----------------------------------------------------


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_parameter: str
    num_checked: int
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance

    def lines(self) -> list[str]:
        return [
            f"max_relative_error={self.max_relative_error:.3e}",
            f"worst_parameter={self.worst_parameter}",
            f"num_checked={self.num_checked}",
            f"tolerance={self.tolerance:g}",
            f"result={'pass' if self.passed else 'fail'}",
        ]


def gradcheck(
    config: M.ModelConfig,
    params: M.Params,
    x,
    labels,
    dropout: Dropout | None = None,
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic CE-loss gradients with central differences on every parameter entry.

    The numeric side replays the recorded dropout masks and transformer-XL
    caches, so it differentiates the same function the backward pass does.
    """
    if config.precision != 64:
        raise ParameterError("gradient checks need 64-bit precision")
    record = record_forward(x, config, params, dropout)
    _, g = framewise_ce_loss(record.logits.data, labels)
    analytic = backward(params, record, g)

    def loss_at(p):
        return framewise_ce_loss(replay_logits(record, p), labels)[0]

    worst, worst_name, n = 0.0, "", 0
    for name in params:
        base = params[name]
        flat = base.reshape(-1)
        for i in range(flat.size):
            probe = dict(params)
            up = flat.copy()
            up[i] += step
            probe[name] = up.reshape(base.shape)
            lp = loss_at(probe)
            down = flat.copy()
            down[i] -= step
            probe[name] = down.reshape(base.shape)
            lm = loss_at(probe)
            numeric = (lp - lm) / (2 * step)
            err = float(relative_error(analytic[name].reshape(-1)[i], numeric))
            n += 1
            if err > worst or not worst_name:
                worst, worst_name = err, f"{name}[{i}]"
    return GradCheckReport(worst, worst_name, n, tolerance)


# -- synthetic tasks ------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTask:
    """Frame-classification task.

    ``long_range_recall``: class ``c`` in 1..num_classes-1 is announced by a cue
    in the first segment; frames of the last segment carry a class-free marker
    and are labelled ``c``; every other frame is labelled 0 (neutral).
    ``local_pattern``: each frame's label is decodable from that frame alone.
    ``segment_frames`` is the segment length in raw frames.
    """

    kind: str = "local_pattern"
    T: int = 32
    D: int = 8
    num_classes: int = 4
    seed: int = 0
    segment_frames: int = 8
    noise: float = 1.0
    cue_amplitude: float = 3.0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ParameterError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.num_classes < 2 or self.T < 1 or self.D < 1 or self.segment_frames < 1:
            raise ParameterError("task needs num_classes >= 2 and positive T, D, segment_frames")
        if self.kind == "long_range_recall":
            if self.num_classes < 3:
                raise ParameterError("long_range_recall needs >= 2 cue classes plus the neutral class")
            if self.D < self.num_classes:
                raise ParameterError(f"long_range_recall needs D >= num_classes ({self.num_classes}), got {self.D}")
            if self.T < 3 * self.segment_frames:
                raise ParameterError(
                    f"T={self.T} cannot fit a cue segment, a >= 1 segment gap and a final segment "
                    f"of {self.segment_frames} frames (need T >= {3 * self.segment_frames})"
                )

    @property
    def chance(self) -> float:
        """Chance accuracy on the task-relevant frames."""
        k = self.num_classes - 1 if self.kind == "long_range_recall" else self.num_classes
        return 1.0 / k

    def final_segment_start(self) -> int:
        s = self.segment_frames
        return ((self.T - 1) // s) * s

    def with_seed(self, seed: int) -> "SyntheticTask":
        from dataclasses import replace

        return replace(self, seed=seed)


def _prototypes(task: SyntheticTask) -> np.ndarray:
    # Class prototypes depend only on the task shape, never on the utterance seed.
    rng = SeededRng(0xC1A55 + 7919 * task.D + task.num_classes)
    p = rng.normal((task.num_classes, task.D))
    return 3.0 * p / np.linalg.norm(p, axis=1, keepdims=True)


def generate_task(task: SyntheticTask) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (features ``T x D``, labels ``T``) for one utterance."""
    rng = SeededRng(task.seed)
    if task.kind == "local_pattern":
        labels = rng.integers(0, task.num_classes, shape=task.T)
        x = _prototypes(task)[labels] + 0.5 * task.noise * rng.normal((task.T, task.D))
        return x, labels.astype(np.int64)
    k = task.num_classes - 1
    c = int(rng.integers(1, k + 1))
    x = task.noise * rng.normal((task.T, task.D))
    x[:, :k] *= 0.2
    x[:, k] = 0.0
    labels = np.zeros(task.T, dtype=np.int64)
    s = min(task.segment_frames, task.T)
    x[:s, c - 1] += task.cue_amplitude
    final = task.final_segment_start()
    x[final:, k] = task.cue_amplitude
    labels[final:] = c
    return x, labels


# -- training loop -------------------------------------------------------------------


def model_rate_labels(labels: np.ndarray, config: M.ModelConfig) -> np.ndarray:
    """Label of each model-rate frame = label of the first raw frame in its window."""
    t_out = M.frontend_length(len(labels), config)
    return np.asarray(labels)[: t_out * config.frontend_stride : config.frontend_stride][:t_out]


def _final_mask(task: SyntheticTask, config: M.ModelConfig, t_out: int) -> np.ndarray:
    idx = np.arange(t_out) * config.frontend_stride
    if task.kind == "long_range_recall":
        return idx >= task.final_segment_start()
    return np.ones(t_out, dtype=bool)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    acc: float
    target_acc: float

    def line(self) -> str:
        return f"epoch={self.epoch} loss={self.loss:.6f} acc={self.acc:.4f} target_acc={self.target_acc:.4f}"


def evaluate(config: M.ModelConfig, params: M.Params, task: SyntheticTask, seeds) -> dict[str, float]:
    """Eval-mode loss and accuracies over the utterances generated from ``seeds``."""
    losses, hits, total, t_hits, t_total = [], 0, 0, 0, 0
    for s in seeds:
        x, labels = generate_task(task.with_seed(int(s)))
        y = model_rate_labels(labels, config)
        logits = M.encode_utterance(x, config, params)
        losses.append(framewise_ce_loss(logits, y)[0])
        pred = logits.argmax(axis=1)
        fm = _final_mask(task, config, len(y))
        hits += int((pred == y).sum())
        total += len(y)
        t_hits += int((pred[fm] == y[fm]).sum())
        t_total += int(fm.sum())
    return {"loss": float(np.mean(losses)), "acc": hits / total, "target_acc": t_hits / max(1, t_total)}


def _utterance_seed(seed: int, epoch: int, i: int) -> int:
    return (seed * 1_000_003 + epoch * 10_007 + i) & 0x7FFFFFFF


def train(
    config: M.ModelConfig,
    task: SyntheticTask,
    epochs: int,
    lr: float,
    seed: int,
    utterances_per_epoch: int = 32,
    params: M.Params | None = None,
    log=None,
) -> tuple[M.Params, list[EpochMetrics]]:
    """Per-utterance SGD over freshly generated utterances; deterministic per seed.

    Metrics are accumulated from the training-mode forward of each utterance
    before its update. ``target_acc`` is final-segment accuracy for
    ``long_range_recall`` and frame accuracy otherwise.
    """
    rng = SeededRng(seed)
    params = M.init_params(config, rng.spawn(1)) if params is None else params
    drop_rng = rng.spawn(2)
    history = []
    for epoch in range(epochs):
        losses, hits, total, t_hits, t_total = [], 0, 0, 0, 0
        for i in range(utterances_per_epoch):
            x, labels = generate_task(task.with_seed(_utterance_seed(seed, epoch, i)))
            y = model_rate_labels(labels, config)
            dropout = Dropout(config.layer.dropout_rate, drop_rng, training=True)
            loss, logits, grads = loss_and_grads(x, y, config, params, dropout)
            params = sgd_step(params, grads, lr)
            pred = logits.argmax(axis=1)
            fm = _final_mask(task, config, len(y))
            losses.append(loss)
            hits += int((pred == y).sum())
            total += len(y)
            t_hits += int((pred[fm] == y[fm]).sum())
            t_total += int(fm.sum())
        m = EpochMetrics(epoch, float(np.mean(losses)), hits / total, t_hits / max(1, t_total))
        history.append(m)
        if log is not None:
            log(m.line())
    return params, history
