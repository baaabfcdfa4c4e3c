from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    per_input: tuple
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def numeric_grad(fn, inputs, index: int, h: float = 1e-4) -> np.ndarray:
    t = inputs[index]
    g = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = float(fn(*inputs).data)
        flat[k] = orig - h
        down = float(fn(*inputs).data)
        flat[k] = orig
        g.reshape(-1)[k] = (up - down) / (2 * h)
    return g


def grad_check(fn, inputs, tolerance: float = 1e-4, h: float = 1e-4,
               zero_floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    The error for each input is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``,
    i.e. the worst deviation relative to the gradient's own scale.  The scale
    is floored at ``zero_floor`` so that a gradient which is identically zero
    (e.g. a bias that cancels in a difference) is not judged on round-off.
    Inputs should be float64 tensors with at most ~1e3 elements.
    """
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    out.backward()
    errors = []
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = numeric_grad(fn, inputs, i, h)
        scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), zero_floor)
        err = float(np.max(np.abs(analytic - numeric)) / scale)
        errors.append(err)
    return GradCheckReport(max(errors) if errors else 0.0, tuple(errors), tolerance)
