"""AdamW / Adam updates, cosine learning-rate annealing and the training config."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .autograd import NonFiniteError


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_min: float = 1e-6
    optimizer: str = "adamw"  # "adamw" (decoupled decay) or "adam" (L2 added to the gradient)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 100
    batch_size: int = 4
    patience: int = 15
    max_steps: int | None = None  # stop after this many optimizer steps, if set
    val_split: str = "val"
    train_split: str = "train"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.lr_min < self.lr:
            raise ValueError(f"need 0 <= lr_min < lr, got lr={self.lr} lr_min={self.lr_min}")
        if self.optimizer not in ("adamw", "adam"):
            raise ValueError(f"optimizer must be 'adamw' or 'adam', got {self.optimizer!r}")
        if self.patience < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, epochs and batch_size must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1 when given")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0 and self.weight_decay >= 0):
            raise ValueError("invalid optimizer hyperparameters")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    lr = lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
    return min(lr_max, max(lr_min, lr))  # rounding may step one ulp outside the range


def init_state(params: dict[str, np.ndarray]) -> dict:
    return {"t": 0,
            "m": {k: np.zeros_like(p) for k, p in params.items()},
            "v": {k: np.zeros_like(p) for k, p in params.items()}}


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict,
               t: int, lr_t: float, cfg: TrainConfig) -> None:
    """One in-place update of ``params`` (name -> array) and ``state``.

    adamw: p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)
    adam:  g <- g + wd p, then the same update without the decoupled term.
    Raises NonFiniteError before touching anything if a gradient is not finite.
    """
    if t < 1:
        raise ValueError("step counter t starts at 1")
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {k}; step aborted")
    b1, b2, wd = cfg.beta1, cfg.beta2, cfg.weight_decay
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        if cfg.optimizer == "adam" and wd:
            g = g + wd * p
        m = state["m"][k]
        v = state["v"][k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.optimizer == "adamw" and wd:
            p *= 1.0 - lr_t * wd
        p -= lr_t * update
    state["t"] = t
