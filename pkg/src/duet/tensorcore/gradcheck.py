"""Central finite-difference checks against the reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict = field(default_factory=dict)
    abs_error: dict = field(default_factory=dict)
    grad_norm: dict = field(default_factory=dict)   # norm of the probed numeric gradient
    checked: int = 0

    def failures(self, tol=1e-4, atol=1e-8):
        """Tensors whose relative error is >= tol and whose absolute error is >= atol.

        The absolute test only matters for tensors whose true gradient is
        zero (relative error is then pure round-off over round-off).
        """
        return {n: e for n, e in self.per_param.items() if e >= tol and self.abs_error[n] >= atol}

    def ok(self, tol=1e-4, atol=1e-8):
        return not self.failures(tol, atol)


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_grad(f, tensor, index, eps=1e-5):
    """(f(x + eps) - f(x - eps)) / 2 eps at one coordinate of ``tensor.data``."""
    orig = tensor.data[index]
    try:
        tensor.data[index] = orig + eps
        with no_grad():
            up = float(f().data)
        tensor.data[index] = orig - eps
        with no_grad():
            down = float(f().data)
    finally:
        tensor.data[index] = orig
    return (up - down) / (2 * eps)


def check_gradients(f, tensors, eps=1e-5, max_coords=None, rng=None):
    """Compare analytic and central-difference gradients of scalar ``f()``.

    ``tensors`` maps names to tensors with ``requires_grad``. With
    ``max_coords`` set, a random subset of that many coordinates per tensor is
    probed (every tensor is still covered). Errors are norm-wise per tensor.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors.values():
        t.grad = None
    loss = f()
    loss.backward()
    report = GradCheckReport(max_rel_error=0.0)
    for name in sorted(tensors):
        t = tensors[name]
        analytic_full = np.zeros_like(t.data) if t.grad is None else t.grad
        n = t.data.size
        flat = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        analytic, numeric = [], []
        for k in np.sort(flat):
            idx = np.unravel_index(k, t.data.shape)
            analytic.append(analytic_full[idx])
            numeric.append(numeric_grad(f, t, idx, eps))
        err = relative_error(analytic, numeric)
        report.per_param[name] = err
        report.abs_error[name] = float(np.max(np.abs(np.subtract(analytic, numeric)))) if analytic else 0.0
        report.grad_norm[name] = float(np.linalg.norm(numeric))
        report.checked += len(flat)
        report.max_rel_error = max(report.max_rel_error, err)
    return report
