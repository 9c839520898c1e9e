"""Run configuration and its ``key = value`` text form.

Precedence, lowest first: built-in defaults, the config file, command-line
flags. Blank lines and lines starting with ``#`` are ignored in config
files. ``lambdas`` is written as four comma-separated numbers.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from panforge.datakit.synth import TASKS
from panforge.errors import ConfigError
from panforge.losses import DEFAULT_LAMBDAS, DEFAULT_MARGIN, VARIANTS, LossConfig
from panforge.networks import parse_multiplier


@dataclass
class RunConfig:
    task: str = "streak"
    size: int = 64
    width_mult: str = "1/4"
    loss: str = "pan"
    lambdas: tuple = DEFAULT_LAMBDAS
    margin: float = DEFAULT_MARGIN
    pixel_weight: float = 1.0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 4
    iters: int = 2000
    t_steps: int = 3
    seed: int = 0
    checkpoint_every: int = 500
    n_train: int = 64
    n_test: int = 16
    density: float = 0.004
    hole_fraction: float = 0.25
    n_shapes: int = 3
    data: str = ""
    out_dir: str = ""

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}", field="task")
        if self.loss not in VARIANTS:
            raise ConfigError(f"loss must be one of {VARIANTS}, got {self.loss!r}", field="loss")
        if self.size <= 0 or self.size % 64:
            raise ConfigError(f"size must be a positive multiple of 64, got {self.size}", field="size")
        parse_multiplier(self.width_mult)
        for name in ("batch", "iters", "t_steps", "n_train", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}", field=name)
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0", field="checkpoint_every")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0", field="lr")
        self.loss_config()
        return self

    def loss_config(self):
        return LossConfig(self.lambdas, self.margin, self.loss, self.pixel_weight)

    @property
    def multiplier(self):
        return parse_multiplier(self.width_mult)

    def task_params(self):
        if self.task == "streak":
            return {"density": self.density}
        if self.task == "inpaint":
            return {"hole_fraction": self.hole_fraction}
        return {"n_shapes": self.n_shapes}

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "lambdas":
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def coerce(name, raw):
    """Convert the text ``raw`` to the type of field ``name``."""
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}", field=name)
    default = _FIELDS[name].default
    try:
        if name == "lambdas":
            vals = tuple(float(v) for v in str(raw).split(","))
            if len(vals) != 4:
                raise ValueError
            return vals
        if name == "width_mult":
            return str(parse_multiplier(raw))
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad value {raw!r} for {name}", field=name) from exc


def parse_text(text, base=None) -> RunConfig:
    cfg = base or RunConfig()
    changes = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}", field=line.split()[0])
        key, val = (part.strip() for part in line.split("=", 1))
        changes[key] = coerce(key, val)
    return cfg.replace(**changes)


def load_config(path, base=None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}", field="config") from exc
    return parse_text(text, base)


def apply_lambda_overrides(lambdas, overrides):
    """``overrides`` like ["2=0", "3=0.5"]; indices are 1-based tap numbers."""
    vals = list(lambdas)
    for item in overrides or ():
        try:
            idx, val = item.split("=", 1)
            i = int(idx)
            if not 1 <= i <= 4:
                raise ValueError
            vals[i - 1] = float(val)
        except ValueError as exc:
            raise ConfigError(f"--lambda expects i=v with i in 1..4, got {item!r}", field="lambda") from exc
    return tuple(vals)
