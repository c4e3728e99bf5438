"""Momentum SGD with annealed Gaussian gradient noise and step learning-rate decay."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Tuple

import numpy as np


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    lr_decay_every: int = 1000
    lr_decay_factor: float = 0.5
    momentum: float = 0.9
    gradient_noise_eta: float = 0.0
    gradient_noise_gamma: float = 0.55
    batch_size: int = 32
    max_steps: int = 1000
    rng_seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even and >= 2")
        if self.lr_decay_every < 1 or self.max_steps < 0 or self.gradient_noise_eta < 0:
            raise ValueError("invalid schedule settings")

    def as_dict(self):
        return asdict(self)


def learning_rate_at(config: TrainConfig, step: int) -> float:
    return config.learning_rate * config.lr_decay_factor ** (step // config.lr_decay_every)


def noise_variance(config: TrainConfig, step: int) -> float:
    return config.gradient_noise_eta / (1.0 + step) ** config.gradient_noise_gamma


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             velocity: Dict[str, np.ndarray], config: TrainConfig, step: int,
             rng: np.random.Generator) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """One update; returns new ``(params, velocity)`` dicts and leaves inputs untouched.

    Noise is drawn per tensor in ``params`` order, so the update is a pure
    function of the inputs and the rng state.
    """
    if params.keys() != grads.keys() or params.keys() != velocity.keys():
        raise KeyError("params, grads and velocity must share names")
    lr = learning_rate_at(config, step)
    sd = np.sqrt(noise_variance(config, step))
    new_p, new_v = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or velocity[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {p.shape}, {g.shape}")
        if sd > 0:
            g = g + rng.normal(0.0, sd, size=g.shape)
        v = config.momentum * velocity[name] - lr * g
        new_v[name] = v
        new_p[name] = p + v
    return new_p, new_v
