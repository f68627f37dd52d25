"""Run configuration with the published defaults pre-filled."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    n_views_in: int = 3
    n_depth: int = 128
    n_c1: int = 8
    n_c2: int = 8
    window: int = 64
    image_size: tuple[int, int] = (320, 200)
    lambda_tra: float = 1.0
    lambda_dep: float = 0.1
    epochs: int = 20
    steps_per_epoch: int = 100
    steps: int | None = None  # overrides epochs * steps_per_epoch when set
    seed: int = 0
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    theta_lr: float | None = None  # learning rate of the depth alignment; defaults to lr
    # ablation switches
    use_tgt: bool = True
    use_dep: bool = True
    use_tra: bool = True
    dep_warmup_steps: int = 0
    theta_refresh: str = "step"  # "step" or "scene"
    targets: str = "supervision"  # "supervision" or "all" (supervision + input views)
    jitter: bool = True
    luminance_threshold: float = 10.0 / 255.0
    # network sizes
    feature_hidden: int = 8
    unet_mid: int = 32
    mlp_width: int = 64
    mlp_layers: int = 4
    pe_freqs: int = 4
    precision: str = "float64"  # dtype of attention and 3D convolutions
    # rendering / evaluation
    n_render_views: int = 20
    render_chunk: int = 4096
    # paths
    datasets: list[str] = field(default_factory=list)
    out_dir: str = "runs/default"
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(x) for x in self.image_size)
        self.betas = tuple(float(x) for x in self.betas)
        self.datasets = [str(p) for p in self.datasets]
        self.validate()

    def validate(self) -> None:
        for name in ("n_views_in", "n_depth", "n_c1", "n_c2", "window", "steps_per_epoch", "feature_hidden",
                     "unet_mid", "mlp_width", "mlp_layers", "n_render_views"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0 or (self.steps is not None and self.steps < 0):
            raise ConfigError("epochs/steps must be non-negative")
        if self.n_views_in < 2:
            raise ConfigError("need at least 2 input views")
        if self.n_depth < 2:
            raise ConfigError("need at least 2 depth hypotheses")
        if self.lambda_tra < 0 or self.lambda_dep < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.theta_refresh not in ("scene", "step"):
            raise ConfigError(f"theta_refresh must be 'scene' or 'step', got {self.theta_refresh!r}")
        if self.targets not in ("supervision", "all"):
            raise ConfigError(f"targets must be 'supervision' or 'all', got {self.targets!r}")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be 'float64' or 'float32', got {self.precision!r}")
        if len(self.image_size) != 2 or min(self.image_size) <= 0:
            raise ConfigError(f"invalid image size {self.image_size}")

    @property
    def total_steps(self) -> int:
        return self.steps if self.steps is not None else self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_overrides(self, overrides: dict) -> "RunConfig":
        d = self.to_dict()
        for key, value in overrides.items():
            if key not in d:
                raise ConfigError(f"unknown config key {key!r}")
            d[key] = value
        return RunConfig.from_dict(d)


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with the value parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
