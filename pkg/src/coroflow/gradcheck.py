"""Finite-difference verification of reverse-mode gradients.

Central differences with h = 1e-5 on 64-bit values; the comparison metric is
the max absolute deviation divided by the gradient scale (floored at 1e-6 so
legitimately tiny gradients do not amplify rounding noise).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4


def numeric_gradient(f, array, h=DEFAULT_H, entries=None):
    """Central finite differences of scalar-valued f at the given array.

    Perturbs the array in place entry by entry, restoring it afterwards.
    `entries` optionally restricts the flat indices probed; untouched entries
    come back as NaN so callers can mask them.
    """
    flat = array.reshape(-1)
    if entries is None:
        entries = range(flat.size)
        grad = np.empty(flat.size, dtype=np.float64)
    else:
        grad = np.full(flat.size, np.nan)
    with ad.no_grad():
        for i in entries:
            saved = flat[i]
            flat[i] = saved + h
            f_plus = f()
            flat[i] = saved - h
            f_minus = f()
            flat[i] = saved
            grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(array.shape)


def relative_error(analytic, numeric):
    """Max |a - n| over the gradient scale, NaN entries of `numeric` ignored."""
    mask = np.isfinite(numeric)
    if not mask.any():
        return 0.0
    a = np.asarray(analytic)[mask]
    n = np.asarray(numeric)[mask]
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), 1e-6)
    return float(np.max(np.abs(a - n)) / scale)


def check_gradients(build, tensors, h=DEFAULT_H, tol=DEFAULT_TOL,
                    max_entries=None, rng=None):
    """Check d(build(...)) / d(tensor) against finite differences.

    `build` maps the given tensors to a scalar Tensor loss.  Each tensor is
    marked requires_grad, a single backward pass supplies the analytic
    gradients, then every entry (or a random subset of `max_entries` per
    tensor) is probed numerically.  Returns the worst relative error and
    raises AssertionError above `tol`.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    ad.clear_tape()
    loss = build(*tensors)
    ad.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in tensors]
    ad.clear_tape()

    def f():
        return build(*tensors).item()

    worst = 0.0
    for t, a in zip(tensors, analytic):
        entries = None
        if max_entries is not None and t.data.size > max_entries:
            rng = rng or np.random.default_rng(0)
            entries = rng.choice(t.data.size, size=max_entries, replace=False)
            entries = np.sort(entries)
        numeric = numeric_gradient(f, t.data, h=h, entries=entries)
        err = relative_error(a, numeric)
        worst = max(worst, err)
        if err > tol:
            raise AssertionError(
                f"gradient mismatch: relative error {err:.3e} > {tol:.1e} "
                f"for tensor of shape {t.data.shape}")
    return worst
