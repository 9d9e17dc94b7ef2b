"""Experiment configuration: flat dotted-key text files with canonical hashing.

Config files are ``key = value`` lines (``#`` comments allowed). The
canonical form sorts keys and normalizes numerics; its SHA-256 digest
stamps every output file of a run. Any key can be overridden through the
environment: ``dataset.ir`` becomes ``LTBD_DATASET__IR``.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

ENV_PREFIX = "LTBD_"

# key -> (type, default)
SCHEMA: dict[str, tuple[type, Any]] = {
    "seed": (int, 0),
    "out": (str, "runs/run"),
    "dataset.source": (str, "synthetic"),
    "dataset.num_classes": (int, 10),
    "dataset.n_max": (int, 500),
    "dataset.ir": (float, 50.0),
    "dataset.profile": (str, "exp"),
    "dataset.image_size": (int, 16),
    "dataset.channels": (int, 3),
    "dataset.test_per_class": (int, 100),
    "attack.rho": (float, 0.1),
    "attack.alpha": (float, 0.1),
    "attack.target_label": (int, 0),
    "attack.lambda_div": (float, 0.01),
    "attack.trigger": (str, "generated"),
    "attack.patch_size": (int, 3),
    "attack.patch_position": (str, "bottom-right"),
    "attack.patch_pattern": (str, "checkerboard"),
    "selector.q": (int, 1),
    "selector.temperature": (float, 1.0),
    "selector.gamma": (float, 0.6),
    "selector.s_max": (int, 10),
    "selector.operators": (str, ""),  # empty = full default operator table
    "selector.dt_per_class": (int, 10),
    "selector.steps": (int, 20),
    "selector.lr": (float, 0.01),
    "training.epochs": (int, 20),
    "training.batch_size": (int, 64),
    "training.lr": (float, 0.01),
    "training.momentum": (float, 0.9),
    "training.weight_decay": (float, 5e-4),
    "training.generator_lr": (float, 0.01),
    "training.generator_widths": (str, "16,32,64"),
    "training.backbone": (str, "smallres"),
    "training.aug_probability": (float, 0.5),
    "training.logit_adjust_tau": (float, 0.0),
    "training.eval_every": (int, 1),
    "training.deterministic": (bool, True),
}

# run-location keys do not define the experiment and stay out of the hash
_UNHASHED = {"out"}

# sweepable short names accepted by the ablation command
SWEEP_PARAMS = {
    "q": "selector.q",
    "T": "selector.temperature",
    "alpha": "attack.alpha",
    "lambda_div": "attack.lambda_div",
    "rho": "attack.rho",
    "gamma": "selector.gamma",
    "target_label": "attack.target_label",
    "ir": "dataset.ir",
}


def _coerce(key: str, raw: str) -> Any:
    typ, _ = SCHEMA[key]
    raw = raw.strip()
    try:
        if typ is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"field {key!r}: cannot parse {raw!r} as {typ.__name__}")


def _format(key: str, value: Any) -> str:
    typ, _ = SCHEMA[key]
    if typ is bool:
        return "true" if value else "false"
    if typ is float:
        return repr(float(value))
    if typ is str and "," in str(value):
        return ",".join(tok.strip() for tok in str(value).split(","))
    return str(value)


class ExperimentConfig:
    """Validated key-value store with a stable content hash."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        self._values = {k: default for k, (_, default) in SCHEMA.items()}
        if values:
            for k, v in values.items():
                if k not in SCHEMA:
                    raise ConfigError(f"unknown config key {k!r}")
                self._values[k] = v
        _validate(self._values)

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def updated(self, **overrides: Any) -> "ExperimentConfig":
        values = dict(self._values)
        for k, v in overrides.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = v if not isinstance(v, str) else _coerce(key, v)
        return ExperimentConfig(values)

    def canonical_text(self) -> str:
        lines = [f"{k} = {_format(k, self._values[k])}"
                 for k in sorted(self._values) if k not in _UNHASHED]
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def operator_names(self) -> tuple[str, ...]:
        from .augment import DEFAULT_OPERATORS
        raw = self._values["selector.operators"]
        if not raw:
            return DEFAULT_OPERATORS
        return tuple(tok.strip() for tok in raw.split(",") if tok.strip())

    def generator_widths(self) -> tuple[int, ...]:
        raw = self._values["training.generator_widths"]
        try:
            return tuple(int(tok) for tok in str(raw).split(",") if tok.strip())
        except ValueError:
            raise ConfigError(
                f"field 'training.generator_widths': bad width list {raw!r}")

    def to_dict(self) -> dict[str, Any]:
        return dict(self._values)

    def write(self, path: str | Path) -> None:
        text = "".join(f"{k} = {_format(k, self._values[k])}\n"
                       for k in sorted(self._values))
        Path(path).write_text(text)


def _validate(v: Mapping[str, Any]) -> None:
    def bad(key: str, why: str):
        raise ConfigError(f"field {key!r}: {why} (got {v[key]!r})")

    if v["dataset.ir"] < 1:
        bad("dataset.ir", "imbalance ratio must be >= 1")
    if v["dataset.num_classes"] < 1:
        bad("dataset.num_classes", "must be >= 1")
    if not 0 <= v["attack.rho"] < 1:
        bad("attack.rho", "poison rate must be in [0, 1)")
    if not 0 <= v["attack.alpha"] <= 1:
        bad("attack.alpha", "blend weight must be in [0, 1]")
    if v["attack.lambda_div"] < 0:
        bad("attack.lambda_div", "diversity weight must be >= 0")
    if v["attack.trigger"] not in ("generated", "patch"):
        bad("attack.trigger", "must be 'generated' or 'patch'")
    if not 0 <= v["attack.target_label"] < v["dataset.num_classes"]:
        bad("attack.target_label", "outside the class range")
    if v["selector.s_max"] < 1:
        bad("selector.s_max", "must be >= 1")
    if not 0 <= v["selector.q"] <= v["selector.s_max"]:
        bad("selector.q", "must be in [0, s_max]")
    if v["selector.temperature"] <= 0:
        bad("selector.temperature", "must be > 0")
    if not 0 <= v["selector.gamma"] <= 1:
        bad("selector.gamma", "must be in [0, 1]")
    if v["selector.dt_per_class"] < 1:
        bad("selector.dt_per_class", "must be >= 1")
    if v["selector.steps"] < 0:
        bad("selector.steps", "must be >= 0")
    if v["training.epochs"] < 0:
        bad("training.epochs", "must be >= 0")
    if v["training.batch_size"] < 1:
        bad("training.batch_size", "must be >= 1")
    for key in ("training.lr", "training.generator_lr", "selector.lr"):
        if v[key] <= 0:
            bad(key, "learning rate must be > 0")
    if not 0 <= v["training.momentum"] < 1:
        bad("training.momentum", "must be in [0, 1)")
    if v["training.weight_decay"] < 0:
        bad("training.weight_decay", "must be >= 0")
    if not 0 <= v["training.aug_probability"] <= 1:
        bad("training.aug_probability", "must be in [0, 1]")
    if v["training.logit_adjust_tau"] < 0:
        bad("training.logit_adjust_tau", "must be >= 0")


def parse_config_text(text: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    found: dict[str, Any] = {}
    for key in SCHEMA:
        env_key = ENV_PREFIX + key.upper().replace(".", "__")
        if env_key in environ:
            found[key] = _coerce(key, environ[env_key])
    return found


def load_config(path: str | Path | None = None,
                environ: Mapping[str, str] | None = None,
                **overrides: Any) -> ExperimentConfig:
    """Defaults, then file, then environment, then explicit overrides."""
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text()))
    values.update(env_overrides(environ))
    for k, v in overrides.items():
        key = k.replace("__", ".")
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, str(v)) if isinstance(v, str) else v
    return ExperimentConfig(values)
