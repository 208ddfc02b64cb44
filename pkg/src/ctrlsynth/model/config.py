from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field


LR_SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class ModelConfig:
    d_token: int = 9
    d_model: int = 128
    n_blocks: int = 2
    mlp_hidden: int = 1024
    n_heads: int = 4
    max_context: int = 500
    head_hidden: int = 64
    distribution_head: bool = True
    sigma_floor: float = 1e-4

    def __post_init__(self):
        for name in ("d_token", "d_model", "n_blocks", "mlp_hidden", "n_heads", "head_hidden"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_token < 4:
            raise ValueError("d_token must hold one interarrival, >=1 event types and 2 stop flags")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.max_context < 2:
            raise ValueError("max_context must be at least 2")
        if self.sigma_floor < 0:
            raise ValueError("sigma_floor must be non-negative")

    @property
    def vocab_size(self) -> int:
        return self.d_token - 3

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def arrival_dim(self) -> int:
        return 2 if self.distribution_head else 1


@dataclass(frozen=True)
class LossWeights:
    w_event: float = 1.0
    w_arrival: float = 1.0
    w_stop: float = 1.0

    def __post_init__(self):
        ws = (self.w_event, self.w_arrival, self.w_stop)
        if min(ws) < 0:
            raise ValueError("loss weights must be non-negative")
        if max(ws) == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    ckpt_every: int = 5
    seed: int = 0
    # "constant", or "cosine": decay from lr to lr * lr_min_fraction over the run
    lr_schedule: str = "constant"
    lr_min_fraction: float = 0.05
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.ckpt_every < 1:
            raise ValueError("ckpt_every must be at least 1")
        if self.epochs and self.epochs < self.ckpt_every:
            raise ValueError("epochs must be at least ckpt_every")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size and lr must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if not 0.0 <= self.lr_min_fraction <= 1.0:
            raise ValueError("lr_min_fraction must lie in [0, 1]")

    def lr_at(self, step: int, total_steps: int) -> float:
        """Learning rate for optimiser step ``step`` (0-based) of ``total_steps``."""
        if self.lr_schedule == "constant" or total_steps <= 1:
            return self.lr
        frac = min(step / (total_steps - 1), 1.0)
        lo = self.lr_min_fraction
        return self.lr * (lo + (1.0 - lo) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def model_config_from_dict(d: dict) -> ModelConfig:
    names = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**d)


def train_config_from_dict(d: dict) -> TrainConfig:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown train config keys: {sorted(unknown)}")
    d = dict(d)
    if "weights" in d and isinstance(d["weights"], dict):
        d["weights"] = LossWeights(**d["weights"])
    return TrainConfig(**d)
