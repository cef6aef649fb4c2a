"""SGD with classical momentum, L2 weight decay and step learning-rate schedules."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, InvalidArgumentError, ShapeError


@dataclass(frozen=True)
class OptimConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 100
    decay_epochs: tuple[int, ...] = (60, 80)
    decay_factor: float = 10.0
    batch_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.decay_factor <= 0:
            raise ConfigError(f"decay_factor must be > 0, got {self.decay_factor}")
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])) or any(e < 0 or e >= self.epochs for e in d):
            raise ConfigError(f"decay_epochs {list(d)} must be strictly increasing and < epochs={self.epochs}")

    def with_(self, **kw) -> "OptimConfig":
        return replace(self, **kw)


# Full-scale recipes.
PRETRAIN = OptimConfig(lr0=0.1, momentum=0.9, weight_decay=1e-4, epochs=120,
                       decay_epochs=(80, 100), decay_factor=10.0, batch_size=256)
FINETUNE = OptimConfig(lr0=0.1, momentum=0.9, weight_decay=1e-4, epochs=100,
                       decay_epochs=(60, 80), decay_factor=10.0, batch_size=256)
GATE = OptimConfig(lr0=0.1, momentum=0.9, weight_decay=1e-4, epochs=10,
                   decay_epochs=(5,), decay_factor=10.0, batch_size=256)

# Per-domain weight decay used when finetuning on the decathlon domains.
DECATHLON_WEIGHT_DECAY = {
    "dtd": 0.002,
    "aircraft": 0.0005, "cifar100": 0.0005, "daimlerpedcls": 0.0005, "omniglot": 0.0005, "ucf101": 0.0005,
    "gtsrb": 0.0003, "svhn": 0.0003, "vgg-flowers": 0.0003,
}

# Desk-scale recipes: same shape of schedule, shrunk to run on a laptop CPU.
DESK_PRETRAIN = OptimConfig(lr0=0.1, momentum=0.9, weight_decay=1e-4, epochs=20,
                            decay_epochs=(13, 17), decay_factor=10.0, batch_size=64)
DESK_FINETUNE = OptimConfig(lr0=0.1, momentum=0.9, weight_decay=5e-4, epochs=20,
                            decay_epochs=(12, 16), decay_factor=10.0, batch_size=64)
DESK_GATE = OptimConfig(lr0=0.1, momentum=0.9, weight_decay=5e-4, epochs=10,
                        decay_epochs=(5,), decay_factor=10.0, batch_size=64)

PRESETS = {
    "pretrain": PRETRAIN, "finetune": FINETUNE, "gate": GATE,
    "desk_pretrain": DESK_PRETRAIN, "desk_finetune": DESK_FINETUNE, "desk_gate": DESK_GATE,
}


def lr_at(config: OptimConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise InvalidArgumentError(f"epoch {epoch} outside [0, {config.epochs})")
    drops = sum(1 for e in config.decay_epochs if e <= epoch)
    return config.lr0 / config.decay_factor ** drops


@dataclass
class MomentumState:
    """Velocity buffers keyed by parameter id; created lazily as zeros."""
    velocity: dict = field(default_factory=dict)

    def get(self, key, like: np.ndarray) -> np.ndarray:
        v = self.velocity.get(key)
        if v is None:
            v = self.velocity[key] = np.zeros_like(like)
        return v


def sgd_step(params, grads, state: MomentumState, lr: float, momentum: float, wd: float, keys=None) -> None:
    """In-place update of every array in ``params``:

        v <- momentum * v + grad + wd * param
        param <- param - lr * v
    """
    keys = range(len(params)) if keys is None else keys
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for key, p, g in zip(keys, params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param {key}: shape {p.shape} vs grad {g.shape}")
        v = state.get(key, p)
        v *= momentum
        v += g
        if wd:
            v += wd * p
        p -= lr * v
