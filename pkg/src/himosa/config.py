"""Model/training configuration and the ``key = value`` config file format.

One file may carry both model keys and training keys; each dataclass
takes the keys it owns and anything else is rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .errors import ConfigError

SELECTION_STRATEGIES = ("content_aware", "random", "sequential")
OPTIMIZERS = ("sgd_momentum", "adam_like")


def _as_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _as_fraction(s) -> Fraction:
    try:
        return Fraction(str(s).strip())
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"not a rational number: {s!r}") from None


def _fmt_fraction(f: Fraction) -> str:
    if f.denominator == 1:
        return str(f.numerator)
    as_float = float(f)
    if Fraction(repr(as_float)) == f:
        return repr(as_float)
    return f"{f.numerator}/{f.denominator}"


def _split_list(s: str) -> list[str]:
    return [p.strip() for p in s.split(",") if p.strip()]


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 4
    n_layers: int = 6
    channels: int = 60
    base_window: int = 8
    ratios: tuple[Fraction, ...] = tuple(Fraction(x) for x in ("1/2", "1", "2", "4", "6", "8"))
    sparsity: tuple[int, ...] = (1, 1, 2, 4, 8, 12)
    n_experts: int = 8
    expert_dim: int | None = None
    scale: int = 4
    use_norm: bool = True
    use_gate: bool = True
    glu_expand: Fraction = Fraction(2)
    cab_reduction: int = 4
    cab_compress: int = 3
    selection_strategy: str = "content_aware"

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(_as_fraction(r) for r in self.ratios))
        object.__setattr__(self, "sparsity", tuple(int(s) for s in self.sparsity))
        object.__setattr__(self, "glu_expand", _as_fraction(self.glu_expand))
        self.validate()

    @property
    def d_expert(self) -> int:
        return self.channels if self.expert_dim is None else self.expert_dim

    @property
    def glu_hidden(self) -> int:
        return int(round(self.glu_expand * self.channels))

    @property
    def cab_hidden(self) -> int:
        return max(1, self.channels // self.cab_compress)

    @property
    def se_hidden(self) -> int:
        return self.channels // self.cab_reduction

    def window_sizes(self) -> list[int]:
        return [int(r * self.base_window) for r in self.ratios]

    @property
    def pad_unit(self) -> int:
        return max(self.window_sizes())

    def validate(self) -> None:
        for name in ("n_blocks", "n_layers", "channels", "base_window", "n_experts", "cab_reduction", "cab_compress"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.expert_dim is not None and self.expert_dim < 1:
            raise ConfigError(f"expert_dim must be >= 1, got {self.expert_dim}")
        if len(self.ratios) != self.n_layers or len(self.sparsity) != self.n_layers:
            raise ConfigError(
                f"ratios ({len(self.ratios)}) and sparsity ({len(self.sparsity)}) must both have n_layers={self.n_layers} entries")
        for r in self.ratios:
            ws = r * self.base_window
            if ws.denominator != 1 or ws <= 0:
                raise ConfigError(f"ratio {_fmt_fraction(r)} x base_window {self.base_window} is not a positive integer")
        for a, b in zip(self.sparsity, self.sparsity[1:]):
            if b < a:
                raise ConfigError(f"sparsity must be non-decreasing, got {self.sparsity}")
        if min(self.sparsity) < 1:
            raise ConfigError(f"sparsity entries must be >= 1, got {self.sparsity}")
        if self.scale not in (2, 4):
            raise ConfigError(f"scale must be 2 or 4, got {self.scale}")
        if self.channels % self.cab_reduction:
            raise ConfigError(f"channels {self.channels} not divisible by cab_reduction {self.cab_reduction}")
        if self.glu_hidden < 1:
            raise ConfigError("glu_expand gives an empty hidden layer")
        if self.selection_strategy not in SELECTION_STRATEGIES:
            raise ConfigError(f"selection_strategy must be one of {SELECTION_STRATEGIES}")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 250_000
    warmup_iters: int = 10_000
    base_lr: float = 5e-4
    decay_points: tuple[int, ...] = (150_000, 200_000, 225_000, 240_000)
    decay_factor: float = 0.5
    batch_size: int = 16
    patch: int = 64
    seed: int = 0
    optimizer: str = "adam_like"
    checkpoint_every: int = 10_000
    clip_norm: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "decay_points", tuple(int(p) for p in self.decay_points))
        if self.total_iters < 1:
            raise ConfigError("total_iters must be >= 1")
        if not 0 <= self.warmup_iters < self.total_iters:
            raise ConfigError(f"warmup_iters ({self.warmup_iters}) must be < total_iters ({self.total_iters})")
        if list(self.decay_points) != sorted(set(self.decay_points)):
            raise ConfigError(f"decay_points must be strictly ascending, got {self.decay_points}")
        if self.decay_points and self.decay_points[-1] >= self.total_iters:
            raise ConfigError("decay_points must all be < total_iters")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.batch_size < 1 or self.patch < 1 or self.checkpoint_every < 1:
            raise ConfigError("batch_size, patch and checkpoint_every must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_MODEL_PARSERS = {
    "n_blocks": int, "n_layers": int, "channels": int, "base_window": int,
    "ratios": lambda s: tuple(_as_fraction(x) for x in _split_list(s)),
    "sparsity": lambda s: tuple(int(x) for x in _split_list(s)),
    "n_experts": int,
    "expert_dim": lambda s: None if s.strip().lower() in ("", "none", "d") else int(s),
    "scale": int, "use_norm": _as_bool, "use_gate": _as_bool,
    "glu_expand": _as_fraction, "cab_reduction": int, "cab_compress": int,
    "selection_strategy": str.strip,
}

_TRAIN_PARSERS = {
    "total_iters": int, "warmup_iters": int, "base_lr": float,
    "decay_points": lambda s: tuple(int(x) for x in _split_list(s)),
    "decay_factor": float, "batch_size": int, "patch": int, "seed": int,
    "optimizer": str.strip, "checkpoint_every": int, "clip_norm": float,
}


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _MODEL_PARSERS and key not in _TRAIN_PARSERS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def _build(cls, parsers, pairs, source):
    kwargs = {}
    for key, value in pairs.items():
        if key in parsers:
            try:
                kwargs[key] = parsers[key](value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{source}: bad value for {key}: {value!r} ({exc})") from None
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_config(text: str, source: str = "<config>") -> tuple[ModelConfig, TrainConfig]:
    pairs = parse_pairs(text, source)
    return _build(ModelConfig, _MODEL_PARSERS, pairs, source), _build(TrainConfig, _TRAIN_PARSERS, pairs, source)


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, Fraction):
        return _fmt_fraction(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt_value(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(model: ModelConfig, train: TrainConfig | None = None) -> str:
    lines = ["# model"]
    for f in dataclasses.fields(model):
        lines.append(f"{f.name} = {_fmt_value(getattr(model, f.name))}")
    if train is not None:
        lines.append("# training")
        for f in dataclasses.fields(train):
            lines.append(f"{f.name} = {_fmt_value(getattr(train, f.name))}")
    return "\n".join(lines) + "\n"


FULL = ModelConfig()
LIGHT = FULL.replace(n_experts=4)
TINY = ModelConfig(
    n_blocks=1, n_layers=3, channels=16, base_window=4,
    ratios=(1, 2, 4), sparsity=(1, 2, 4), n_experts=2, scale=2,
)
