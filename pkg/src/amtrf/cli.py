"""Command-line entry point: ``amtrf {train,encode,stream,latency,gradcheck,gen-data}``.

Configuration comes from a flat ``key=value`` file (optional ``[model]``,
``[task]``, ``[run]`` headers are accepted and ignored for lookup) with
command-line flags taking precedence. Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np

from . import model as M
from . import streaming as S
from . import training as T
from .errors import AmtrfError, ConfigError, NumericError
from .math_core import Dropout, SeededRng, atomic_write_text, format_matrix, read_matrix

COMMANDS = ("train", "encode", "stream", "latency", "gradcheck", "gen-data")

EXIT_CODES = {"config": 2, "io": 3, "shape": 4, "lifecycle": 5, "numeric": 6, "error": 1}


TASK_KEYS: dict[str, Callable[[str], Any]] = {
    "task_kind": str,
    "task_T": int,
    "task_D": int,
    "task_num_classes": int,
    "task_segment_frames": int,
    "task_noise": float,
    "task_cue_amplitude": float,
}

RUN_KEYS: dict[str, Callable[[str], Any]] = {
    "seed": int,
    "input": str,
    "out": str,
    "checkpoint": str,
    "labels_out": str,
    "epochs": int,
    "lr": float,
    "utterances_per_epoch": int,
    "chunk": int,
    "gradcheck_frames": int,
    "gradcheck_step": float,
}

ALL_KEYS: dict[str, Callable[[str], Any]] = {**M.FLAT_KEYS, **TASK_KEYS, **RUN_KEYS}

REQUIRED_PATHS = {
    "encode": ("input",),
    "stream": ("input",),
    "gen-data": ("out",),
}


@dataclass
class RunConfig:
    command: str
    model: M.ModelConfig
    task: T.SyntheticTask
    seed: int = 0
    paths: dict[str, str | None] = field(default_factory=dict)
    epochs: int = 10
    lr: float = 0.05
    utterances_per_epoch: int = 32
    chunk: int = 1
    gradcheck_frames: int | None = None
    gradcheck_step: float = 1e-5


def parse_config_text(text: str, source: str = "<config>") -> dict[str, tuple[Any, int]]:
    """Parse ``key=value`` lines; returns key -> (value, line number)."""
    out: dict[str, tuple[Any, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        if key not in ALL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = (ALL_KEYS[key](val), lineno)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: key {key!r}: cannot parse {val!r}") from None
    return out


def parse_config(
    text: str, overrides: dict[str, Any] | None = None, command: str = "latency", source: str = "<config>"
) -> RunConfig:
    """Merge file values with flag overrides (flags win) and validate."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    values = {k: v for k, (v, _) in parse_config_text(text, source).items()}
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in ALL_KEYS:
            raise ConfigError(f"flag: unknown key {k!r}")
        values[k] = v
    model_vals = {k: v for k, v in values.items() if k in M.FLAT_KEYS}
    model = M.ModelConfig.from_flat(model_vals)
    tdefaults = T.SyntheticTask()
    task_vals = {k[len("task_"):]: v for k, v in values.items() if k in TASK_KEYS}
    if "T" not in task_vals and "kind" in task_vals and task_vals["kind"] == "long_range_recall":
        task_vals["T"] = 5 * task_vals.get("segment_frames", tdefaults.segment_frames)
    task = replace(tdefaults, **task_vals)
    rc = RunConfig(command=command, model=model, task=task)
    for k in ("seed", "epochs", "lr", "utterances_per_epoch", "chunk", "gradcheck_frames", "gradcheck_step"):
        if k in values:
            setattr(rc, k, values[k])
    rc.paths = {k: values.get(k) for k in ("input", "out", "checkpoint", "labels_out")}
    for k in REQUIRED_PATHS.get(command, ()):
        if not rc.paths.get(k):
            raise ConfigError(f"missing required key {k!r} for command {command}")
    if rc.chunk < 1:
        raise ConfigError("chunk must be >= 1")
    if rc.epochs < 0 or rc.utterances_per_epoch < 1:
        raise ConfigError("epochs must be >= 0 and utterances_per_epoch >= 1")
    return rc


# -- commands -------------------------------------------------------------------------


def _emit(text: str, path: str | None) -> None:
    if path:
        atomic_write_text(path, text)
    else:
        sys.stdout.write(text)


def _model_and_params(rc: RunConfig) -> tuple[M.ModelConfig, M.Params]:
    if rc.paths.get("checkpoint"):
        cfg, params = M.load_checkpoint(rc.paths["checkpoint"])
        if cfg.precision != rc.model.precision:
            cfg = replace(cfg, precision=rc.model.precision)
            params = {k: v.astype(cfg.dtype) for k, v in params.items()}
        return cfg, params
    return rc.model, M.init_params(rc.model, SeededRng(rc.seed))


def _cmd_latency(rc: RunConfig) -> int:
    _emit("\n".join(S.lookahead(rc.model).lines()) + "\n", rc.paths.get("out"))
    return 0


def _cmd_encode(rc: RunConfig) -> int:
    cfg, params = _model_and_params(rc)
    x = read_matrix(rc.paths["input"], dtype=cfg.dtype)
    _emit(format_matrix(M.encode_utterance(x, cfg, params)), rc.paths.get("out"))
    return 0


def _cmd_stream(rc: RunConfig) -> int:
    cfg, params = _model_and_params(rc)
    x = read_matrix(rc.paths["input"], dtype=cfg.dtype)
    logits = S.stream_utterance(x, cfg, params, rc.chunk)
    report = "\n".join(S.lookahead(cfg).lines()) + "\n"
    if rc.paths.get("out"):
        atomic_write_text(rc.paths["out"], format_matrix(logits))
        sys.stdout.write(report)
    else:
        sys.stdout.write(format_matrix(logits))
        sys.stderr.write(report)
    return 0


def _cmd_gen_data(rc: RunConfig) -> int:
    x, labels = T.generate_task(replace(rc.task, seed=rc.seed))
    atomic_write_text(rc.paths["out"], format_matrix(x))
    labels_path = rc.paths.get("labels_out") or rc.paths["out"] + ".labels"
    atomic_write_text(labels_path, format_matrix(labels.reshape(-1, 1).astype(np.float64)))
    return 0


def _cmd_train(rc: RunConfig) -> int:
    cfg = rc.model
    task = rc.task
    if task.D != cfg.input_dim:
        raise ConfigError(f"task_D={task.D} must equal input_dim={cfg.input_dim}")
    if task.num_classes > cfg.output_classes:
        raise ConfigError(f"task_num_classes={task.num_classes} exceeds output_classes={cfg.output_classes}")
    params, _ = T.train(cfg, task, rc.epochs, rc.lr, rc.seed, rc.utterances_per_epoch, log=print)
    if not all(np.all(np.isfinite(p)) for p in params.values()):
        raise NumericError("training diverged (non-finite parameters)")
    if rc.paths.get("out"):
        M.save_checkpoint(rc.paths["out"], cfg, params)
    return 0


def _cmd_gradcheck(rc: RunConfig) -> int:
    cfg = replace(rc.model, precision=64)
    rng = SeededRng(rc.seed)
    params = M.init_params(cfg, rng.spawn(1))
    frames = rc.gradcheck_frames
    if frames is None:
        frames = (2 * cfg.segment_B + 1) * cfg.frontend_stride + cfg.frontend_window
    x = rng.spawn(2).normal((frames, cfg.input_dim))
    t_out = M.frontend_length(frames, cfg)
    labels = rng.spawn(3).integers(0, cfg.output_classes, shape=t_out)
    dropout = Dropout(cfg.layer.dropout_rate, rng.spawn(4), training=True)
    report = T.gradcheck(cfg, params, x, labels, dropout, step=rc.gradcheck_step)
    _emit("\n".join(report.lines()) + "\n", rc.paths.get("out"))
    if not report.passed:
        raise NumericError(f"gradient check failed: {report.max_relative_error:.3e} >= {report.tolerance:g}")
    return 0


_DISPATCH = {
    "latency": _cmd_latency,
    "encode": _cmd_encode,
    "stream": _cmd_stream,
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "gradcheck": _cmd_gradcheck,
}


def run(rc: RunConfig) -> int:
    return _DISPATCH[rc.command](rc)


def _flag_name(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amtrf", description="Augmented-memory streaming transformer toolkit")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--precision", type=int, choices=(32, 64))
    for key, conv in ALL_KEYS.items():
        if key == "precision":
            continue
        flag = _flag_name(key)
        p.add_argument(flag, dest=key, type=conv, default=None, help=argparse.SUPPRESS)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        text = ""
        if args.config:
            try:
                with open(args.config, encoding="utf-8") as fh:
                    text = fh.read()
            except OSError as exc:
                raise ConfigError(f"{args.config}: {exc}") from exc
        overrides = {k: v for k, v in vars(args).items() if k in ALL_KEYS and v is not None}
        rc = parse_config(text, overrides, args.command, source=args.config or "<config>")
        return run(rc)
    except AmtrfError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error category={exc.category} message={msg}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except NotImplementedError as exc:
        print(f"error category=config message={exc}", file=sys.stderr)
        return EXIT_CODES["config"]


if __name__ == "__main__":
    sys.exit(main())
