"""Flat key = value experiment configuration files.

One assignment per line, ``#`` comments, no sections.  Unknown keys are
rejected so typos fail loudly.  The full schema with defaults is SCHEMA;
see the README for the documented meaning of every key.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

__all__ = ["ConfigError", "SCHEMA", "parse_config", "load_config",
           "format_config"]


class ConfigError(ValueError):
    """Bad experiment configuration (unknown key, bad value, bad type)."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.replace(",", " ").split())


@dataclass(frozen=True)
class _Key:
    type: type | Any
    default: Any
    help: str


SCHEMA: dict[str, _Key] = {
    # experiment selection
    "experiment": _Key(str, "mnist", "mnist | segmentation"),
    "scale": _Key(str, "desk", "desk | full"),
    "data_dir": _Key(str, "data/mnist", "directory with the MNIST IDX files"),
    # training regime
    "regime": _Key(str, "joint", "sequential | end_to_end | joint"),
    "C": _Key(float, 0.5, "joint-loss interpolation weight in [0, 1]"),
    "C_list": _Key(_float_list, (0.01, 0.1, 0.5, 0.9, 0.99, 0.999),
                   "C values for the sweep subcommand"),
    "optimizer": _Key(str, "adam", "adam | sgd"),
    "learning_rate": _Key(float, 1e-3, "initial learning rate"),
    "final_learning_rate": _Key(float, 1e-5, "cosine-decay target"),
    "batch_size": _Key(int, 32, "training batch size"),
    "steps": _Key(int, 10_000, "main-stage optimizer steps"),
    "log_every": _Key(int, 50, "metric logging interval"),
    "seed": _Key(int, 0, "master seed"),
    # pretraining
    "pretrain_enabled": _Key(_bool, True,
                             "master switch for warm-start stages"),
    "pretrain_recon_steps": _Key(int, 0, "reconstruction warm-start steps"),
    "pretrain_recon_batch_size": _Key(int, 64, ""),
    "pretrain_task_steps": _Key(int, 0, "task warm-start steps (clean inputs)"),
    "pretrain_task_batch_size": _Key(int, 64, ""),
    "pretrain_task_target_accuracy": _Key(float, 0.0,
                                          "early-stop accuracy; 0 disables"),
    # geometry and measurement model
    "num_angles": _Key(int, 0, "0 = experiment default"),
    "num_lines": _Key(int, 0, "0 = experiment default"),
    "photons_per_line": _Key(float, 60.0, "Poisson intensity"),
    "noise_level": _Key(float, 0.001, "Gaussian noise fraction"),
    # reconstruction operator
    "recon_scheme": _Key(str, "", "lgd | lpd | fbp; empty = experiment default"),
    "unroll_iterations": _Key(int, 10, "unrolled iteration count"),
    "unroll_channels": _Key(int, 32, "hidden conv width per update"),
    "memory_channels": _Key(int, 5, "primal/dual memory channels"),
    "recon_init": _Key(str, "", "zero | fbp; empty = experiment default"),
    # segmentation data
    "num_phantoms": _Key(int, 100, "training phantoms"),
    "phantom_contrast": _Key(float, 0.06, "grey-matter contrast"),
    "augment": _Key(_bool, True, "rigid augmentation for segmentation"),
    # evaluation
    "eval_items": _Key(int, 0, "cap on evaluated items; 0 = whole split"),
}


def parse_config(text: str, overrides: dict | None = None) -> dict:
    """Parse config text into a fully-defaulted dict (schema-checked)."""
    values: dict[str, Any] = {k: spec.default for k, spec in SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', "
                              f"got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = SCHEMA[key].type(val)
        except ValueError as e:
            raise ConfigError(
                f"line {lineno}: bad value for {key!r}: {e}") from e
    if overrides:
        for key, val in overrides.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown override key {key!r}")
            if val is not None:
                values[key] = val
    _validate(values)
    return values


def _validate(values: dict) -> None:
    if values["experiment"] not in ("mnist", "segmentation"):
        raise ConfigError(f"experiment must be mnist or segmentation, "
                          f"got {values['experiment']!r}")
    if values["scale"] not in ("desk", "full"):
        raise ConfigError(f"scale must be desk or full, got {values['scale']!r}")
    if not 0.0 <= values["C"] <= 1.0:
        raise ConfigError(f"C must be in [0, 1], got {values['C']}")
    for c in values["C_list"]:
        if not 0.0 <= c <= 1.0:
            raise ConfigError(f"C_list entry {c} outside [0, 1]")
    if values["recon_scheme"] not in ("", "lgd", "lpd", "fbp"):
        raise ConfigError(f"bad recon_scheme {values['recon_scheme']!r}")
    if values["recon_init"] not in ("", "zero", "fbp"):
        raise ConfigError(f"bad recon_init {values['recon_init']!r}")


def load_config(path, overrides: dict | None = None) -> dict:
    path = Path(path)
    if path.exists():
        return parse_config(path.read_text(), overrides)
    raise ConfigError(f"config file not found: {path}")


def format_config(values: dict) -> str:
    lines = [f"{key} = {', '.join(str(v) for v in val) if isinstance(val, tuple) else val}"
             for key, val in sorted(values.items())]
    return "\n".join(lines) + "\n"
