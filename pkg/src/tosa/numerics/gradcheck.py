"""Central finite-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import GradTape, Tensor


class GradCheckUsageError(ValueError):
    """The checked function is not scalar-valued."""


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float] = field(default_factory=list)
    tol: float = 1e-5

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to the entries of ``x`` (mutated in place, restored)."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f().item()
        flat[i] = orig - step
        down = f().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def check_gradients(f: Callable[[], Tensor], inputs: Tensor | Sequence[Tensor],
                    step: float = 1e-5, tol: float = 1e-5, floor: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` takes no arguments and closes over ``inputs``; each input must have
    ``requires_grad=True``. The error for one input is
    ``max|g_tape - g_fd| / max(max|g_tape|, max|g_fd|, floor)``, i.e. the
    worst deviation relative to that gradient's scale. ``floor`` keeps
    identically-zero gradients (e.g. a bias under a log-softmax) from turning
    finite-difference noise into a relative error of 1. The report holds the
    max over inputs.
    """
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for t in inputs:
        t.grad = None
    with GradTape() as tape:
        out = f()
    if out.size != 1:
        raise GradCheckUsageError(f"check_gradients needs a scalar function, got shape {out.shape}")
    tape.backward(out)
    errors = []
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_gradient(f, t, step)
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
        diff = np.abs(analytic - numeric).max(initial=0.0)
        errors.append(float(diff / scale))
    return GradCheckReport(float(max(errors, default=0.0)), errors, tol)
