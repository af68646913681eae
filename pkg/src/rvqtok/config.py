"""Line-oriented ``key = value`` run configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .codecnet import TrainConfig
from .distill import LossWeights
from .tasks import METRICS


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # training
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    epochs: int = 10
    steps: int = 0
    seed: int = 0
    levels: int = 8
    bits: int = 10
    codebook_decay: float = 0.99
    commitment_beta: float = 0.25
    kmeans_iters: int = 10
    dead_code_steps: int = 200
    semantic_dim: int = 32
    acoustic_dim: int = 16
    align_heads: int = 8
    align_width: int = 32
    align_slots: int = 1
    semantic_axis: str = "time"
    lambda_semantic: float = 0.5
    lambda_acoustic: float = 0.5
    lambda_time: float = 1.0
    lambda_freq: float = 1.0
    lambda_vq: float = 1.0
    lambda_feature: float = 0.0
    lambda_adversarial: float = 0.0
    # paths and run options
    corpus_dir: str = "corpus"
    teacher_dir: str = ""
    model_dir: str = "model"
    levels_used: int = 0  # 0 -> every trained level
    metrics: tuple[str, ...] = field(default=METRICS)

    def __post_init__(self):
        if not 0 <= self.levels_used <= self.levels:
            raise ConfigError(f"levels_used must be in [0, {self.levels}], got {self.levels_used}")
        bad = set(self.metrics) - set(METRICS)
        if bad:
            raise ConfigError(f"unknown metrics: {', '.join(sorted(bad))}")
        if self.semantic_axis not in ("time", "frame"):
            raise ConfigError(f"semantic_axis must be 'time' or 'frame', got {self.semantic_axis!r}")

    @property
    def teachers(self) -> str:
        return self.teacher_dir or self.corpus_dir

    def train_config(self) -> TrainConfig:
        weights = LossWeights(**{f.name: getattr(self, f.name) for f in fields(LossWeights)})
        names = {f.name for f in fields(TrainConfig)} - {"weights"}
        return TrainConfig(weights=weights, **{n: getattr(self, n) for n in names})

    def updated(self, **changes) -> "RunConfig":
        """Copy with ``changes`` applied; ``None`` values are ignored."""
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(name: str, raw: str):
    default = getattr(RunConfig(), name)
    try:
        if isinstance(default, tuple):
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        return type(default)(raw)
    except ValueError as e:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from e


def parse_config(text: str) -> RunConfig:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return RunConfig(**values)


def render_config(cfg: RunConfig) -> str:
    lines = []
    for name in _FIELDS:
        value = getattr(cfg, name)
        if isinstance(value, tuple):
            value = ",".join(value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
