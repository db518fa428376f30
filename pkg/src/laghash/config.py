"""Run configuration: JSON schema, validation and dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
import math
import types
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from laghash.errors import ConfigError
from laghash.flatland import FlatlandOptions
from laghash.hashfield import FieldConfig
from laghash.image_task import TrainOptions, steps_for_epochs
from laghash.losses import LossWeights

TASKS = ("image", "flatland")
FD_KINDS = ("task", "guidance")
BUILTIN_SCENES = ("builtin:single_disk", "builtin:empty")


@dataclass
class OptimConfig:
    lr: float = 1e-2
    lr_gaussian: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    steps: int = 2000
    epochs: int | None = None  # overrides steps for the image task when set
    batch: int = 2**14
    log_every: int = 100
    val_pixels: int = 4096
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if not (self.lr > 0 and self.lr_gaussian >= 0 and self.eps > 0):
            raise ConfigError("optim.lr and optim.eps must be positive, optim.lr_gaussian non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("optim.beta1 and optim.beta2 must lie in [0, 1)")
        if self.steps < 0 or self.batch < 1 or self.log_every < 0 or self.val_pixels < 1:
            raise ConfigError("optim.steps >= 0, optim.batch >= 1, optim.log_every >= 0, optim.val_pixels >= 1")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigError("optim.epochs must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("optim.dtype must be float32 or float64")


@dataclass
class IOConfig:
    image: str | None = None  # PNG path or synthetic:<spec>
    scene: str | None = None  # scene file or builtin:<name>
    out_dir: str = "runs/default"
    checkpoint: str | None = None  # input checkpoint for eval / export-points


@dataclass
class FDConfig:
    """Finite-difference fixture: which loss to check and at what tolerance."""

    kind: str = "task"  # "task": the full loss of RunConfig.task; "guidance": guidance only
    epsilon: float = 1e-6
    tolerance: float = 1e-5
    tolerance_single: float = 1e-3
    step: int = 0  # training step at which sigma and the warmup are evaluated
    rays: int = 2
    samples: int = 8
    points: int = 64
    max_per_slice: int | None = None
    # std of noise added to features and decoder weights: a fresh init keeps
    # ReLU pre-activations within epsilon of the hinge
    param_noise: float = 0.1

    def __post_init__(self) -> None:
        if self.param_noise < 0:
            raise ConfigError("fd.param_noise must be >= 0")
        if self.kind not in FD_KINDS:
            raise ConfigError(f"fd.kind must be one of {FD_KINDS}, got {self.kind!r}")
        if not (self.epsilon > 0 and self.tolerance > 0 and self.tolerance_single > 0):
            raise ConfigError("fd.epsilon and tolerances must be positive")
        if self.rays < 1 or self.samples < 1 or self.points < 1 or self.step < 0:
            raise ConfigError("fd.rays, fd.samples, fd.points must be >= 1 and fd.step >= 0")


@dataclass
class RunConfig:
    task: str = "image"
    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)
    losses: LossWeights = dataclasses.field(default_factory=LossWeights)
    optim: OptimConfig = dataclasses.field(default_factory=OptimConfig)
    seed: int = 0
    io: IOConfig = dataclasses.field(default_factory=IOConfig)
    flatland: FlatlandOptions = dataclasses.field(default_factory=FlatlandOptions)
    fd: FDConfig = dataclasses.field(default_factory=FDConfig)

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        fl = self.flatland
        if fl.n_cameras < 1 or fl.holdout_cameras < 1 or fl.n_pixels < 1 or fl.samples < 1 or fl.gt_samples < 1:
            raise ConfigError("flatland camera, pixel and sample counts must be >= 1")
        if fl.rays_per_batch < 1:
            raise ConfigError("flatland.rays_per_batch must be >= 1")
        if not 0 < fl.fov < math.pi:
            raise ConfigError("flatland.fov must lie in (0, pi)")
        if fl.ring_radius <= 0.5:
            raise ConfigError("flatland.ring_radius must exceed 0.5 so cameras sit outside the scene bounds")

    def train_options(self, n_pixels: int | None = None) -> TrainOptions:
        o = self.optim
        steps = o.steps
        if o.epochs is not None and n_pixels is not None:
            steps = steps_for_epochs(o.epochs, n_pixels, o.batch)
        return TrainOptions(
            steps=steps,
            batch=o.batch,
            lr=o.lr,
            lr_gaussian=o.lr_gaussian,
            beta1=o.beta1,
            beta2=o.beta2,
            eps=o.eps,
            log_every=o.log_every,
            val_pixels=o.val_pixels,
            seed=self.seed,
            dtype=o.dtype,
        )

    def check_paths(self, base: Path | None = None) -> None:
        """Every input path the task needs must exist."""
        if self.task == "image":
            src = self.io.image
            if src is None:
                raise ConfigError("io.image is required for the image task")
            if not src.startswith("synthetic:") and not resolve(src, base).exists():
                raise ConfigError(f"io.image not found: {src}")
        else:
            src = self.io.scene
            if src is not None and src not in BUILTIN_SCENES and not resolve(src, base).exists():
                raise ConfigError(f"io.scene not found: {src}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def resolve(path: str, base: Path | None) -> Path:
    p = Path(path)
    return p if p.is_absolute() or base is None else base / p


# ---------------------------------------------------------------------------
# Generic dataclass <-> dict
# ---------------------------------------------------------------------------


def _coerce(value: Any, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{key} must be an object")
        return _build(hint, value, key + ".")
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if hint is int:
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return int(value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.init and not f.name.startswith("_")]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown key {prefix}{unknown[0]}; valid keys: {', '.join(prefix + n for n in names)}")
    kwargs = {n: _coerce(data[n], hints[n], prefix + n) for n in names if n in data}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


def valid_keys(cls=RunConfig, prefix: str = "") -> list[str]:
    """Every dotted leaf key accepted by ``--set``."""
    hints = typing.get_type_hints(cls)
    out = []
    for f in dataclasses.fields(cls):
        if f.name.startswith("_"):
            continue
        h = hints[f.name]
        if dataclasses.is_dataclass(h):
            out.extend(valid_keys(h, prefix + f.name + "."))
        else:
            out.append(prefix + f.name)
    return out


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    data = json.loads(json.dumps(data))
    # Gaussian widths decay over the first half of training unless told otherwise.
    optim = data.get("optim") if isinstance(data.get("optim"), dict) else {}
    fld = data.setdefault("field", {})
    steps = optim.get("steps", OptimConfig.steps)
    if isinstance(fld, dict) and "sigma_decay_steps" not in fld and isinstance(steps, int):
        fld["sigma_decay_steps"] = steps // 2
    return _build(RunConfig, data)


def from_json(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    return from_dict(data)


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
    return from_dict(apply_overrides(data, overrides or []))


def parse_value(text: str) -> Any:
    """JSON literal when it parses (numbers, true/false/null, lists), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` pairs with dotted keys to a config dictionary."""
    data = json.loads(json.dumps(data))
    keys = set(valid_keys())
    for item in overrides:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        if key not in keys:
            raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(sorted(keys))}")
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{p} must be an object")
        node[leaf] = parse_value(raw)
    return data
