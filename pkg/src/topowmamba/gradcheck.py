"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autograd import NonFiniteError, Tape, Tensor, backward, no_record


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst: tuple[int, int] | None = None  # (input number, flat coordinate)
    analytic: float = 0.0
    numeric: float = 0.0

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return (f"{verdict}: max_rel_err={self.max_rel_err:.3e} over {self.n_checked} coords "
                f"(worst {self.worst}: tape={self.analytic:.6e} fd={self.numeric:.6e})")


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(f: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor], eps: float = 1e-6,
               tol: float = 1e-4, n_samples: int | None = None,
               rng: np.random.Generator | None = None, order: int = 2) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    ``order=2`` uses the three-point stencil (f(x+e) - f(x-e)) / 2e; ``order=4``
    the five-point stencil, whose smaller truncation error allows a larger
    ``eps`` and so less round-off on coordinates with tiny gradients.

    ``inputs`` should be float64 leaves with ``requires_grad=True``. With
    ``n_samples`` set, that many coordinates are drawn uniformly (without
    replacement) across all inputs; otherwise every coordinate is probed.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    for t in inputs:
        t.requires_grad = True

    with Tape() as tape:
        out = f(*inputs)
    analytic = backward(out, tape, inputs)

    sizes = [t.size for t in inputs]
    total = int(np.sum(sizes))
    if n_samples is None or n_samples >= total:
        picks = np.arange(total)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        picks = np.sort(rng.choice(total, size=n_samples, replace=False))
    offsets = np.cumsum([0] + sizes)

    def evaluate() -> float:
        with no_record():
            val = f(*inputs).item()
        if not np.isfinite(val):
            raise NonFiniteError("grad_check: non-finite function value")
        return val

    worst = (-1.0, None, 0.0, 0.0)
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        j = int(flat - offsets[k])
        view = inputs[k].data.reshape(-1)
        orig = view[j]
        def probe(h: float) -> float:
            view[j] = orig + h
            return evaluate()

        if order == 2:
            numeric = (probe(eps) - probe(-eps)) / (2 * eps)
        else:
            numeric = (8 * (probe(eps) - probe(-eps)) - (probe(2 * eps) - probe(-2 * eps))) / (12 * eps)
        view[j] = orig
        a = float(analytic[k].reshape(-1)[j])
        if not np.isfinite(a):
            raise NonFiniteError("grad_check: non-finite tape gradient")
        err = rel_err(a, numeric)
        if err > worst[0]:
            worst = (err, (k, j), a, numeric)

    max_err = max(worst[0], 0.0)
    return GradCheckReport(max_rel_err=max_err, passed=max_err < tol, n_checked=len(picks),
                           worst=worst[1], analytic=worst[2], numeric=worst[3])
