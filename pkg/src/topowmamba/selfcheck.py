"""Finite-difference gradient checks of the composite blocks and a tiny model.

Every check runs at float64 with all parameters redrawn at O(1) scale: with
the training initialisation many gradients (e.g. of the state matrices) are
too small for finite differences to resolve. The checked function is a fixed
random weighting of the block output, so every output element matters.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .autograd import Tensor
from .blocks import SCA, SCVSS, WMB, BlockConfig, VSSBranch
from .gradcheck import GradCheckReport, grad_check
from .losses import seg_loss
from .network import ModelConfig, build_model
from .nn import Module

PARAM_STD = 0.25
FD_EPS = 1e-3
N_COORDS = 200


def randomize(module: Module, rng: np.random.Generator, std: float = PARAM_STD) -> Module:
    """float64 copy of every parameter redrawn from N(0, std); log-state
    matrices are perturbed around their initial values instead."""
    module.astype(np.float64)
    for name, p in module.named_parameters():
        if name.endswith("a_log"):
            p.data = p.data + rng.normal(0.0, std, p.shape)
        else:
            p.data = rng.normal(0.0, std, p.shape)
    return module


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, Tensor(weights)))


def check_module(module: Module, x_shape, rng: np.random.Generator, forward=None,
                 tol: float = 1e-3, n_samples: int = N_COORDS) -> GradCheckReport:
    """Gradient check of weighted_sum(forward(x)) over parameters and input."""
    randomize(module, rng)
    forward = forward or module
    x = Tensor(rng.normal(size=x_shape), requires_grad=True)
    with_x = [p for _, p in module.named_parameters()] + [x]
    probe = forward(x)
    weights = rng.normal(size=probe.shape)
    return grad_check(lambda *_: _weighted_sum(forward(x), weights), with_x, eps=FD_EPS, tol=tol,
                      n_samples=n_samples, rng=rng, order=4)


def check_sca(rng, tol=1e-3):
    # eight channels so that parameters plus input exceed N_COORDS coordinates
    return check_module(SCA(8, rng), (1, 8, 4, 4), rng, tol=tol)


def check_vss(rng, tol=1e-3):
    return check_module(VSSBranch(8, rng, "conventional", n_state=4), (1, 8, 4, 4), rng, tol=tol)


def check_snake_vss(rng, tol=1e-3):
    return check_module(VSSBranch(8, rng, "serpentine", n_state=4), (1, 8, 4, 4), rng, tol=tol)


def check_scvss(rng, tol=1e-3):
    cfg = BlockConfig(channels=8, n_state=4)
    return check_module(SCVSS(cfg, rng), (1, 8, 4, 4), rng, tol=tol)


def check_wmb(rng, tol=1e-3):
    cfg = BlockConfig(channels=8, n_state=4)
    return check_module(WMB(cfg, rng), (1, 8, 6, 6), rng, tol=tol)


TINY_MODEL = dict(num_classes=3, stage_dims=[4, 8, 16, 32, 64], scvss_counts=[1, 1, 1, 1],
                  input_size=[32, 32], drop_path_rate=0.0, n_state=4)


def check_model(rng, tol=1e-3):
    """Full forward + segmentation loss of a tiny model on a 32x32 input."""
    model = randomize(build_model(ModelConfig(**TINY_MODEL)), rng)
    x = Tensor(rng.normal(size=(1, 1, 32, 32)))
    labels = rng.integers(0, 3, size=(1, 32, 32))
    params = [p for _, p in model.named_parameters()]
    return grad_check(lambda *_: seg_loss(model(x), labels), params, eps=FD_EPS, tol=tol,
                      n_samples=N_COORDS, rng=rng, order=4)


CHECKS: dict[str, Callable[..., GradCheckReport]] = {
    "sca": check_sca,
    "vss": check_vss,
    "snake_vss": check_snake_vss,
    "scvss": check_scvss,
    "wmb": check_wmb,
    "model": check_model,
}


def run_checks(names=None, tol: float = 1e-3, seed: int = 0) -> dict[str, GradCheckReport]:
    names = list(CHECKS) if not names else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown check(s) {unknown}; available: {sorted(CHECKS)}")
    return {n: CHECKS[n](np.random.default_rng([seed, i]), tol) for i, n in enumerate(names)}
