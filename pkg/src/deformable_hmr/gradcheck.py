"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .errors import NumericError

DEFAULT_STEP = 1e-5
# Gradients that are identically zero (key biases under softmax shift
# invariance) leave only rounding noise on both sides, and central-difference
# noise grows with |f|. The denominator is floored at GRAD_FLOOR * max(1, |f|).
GRAD_FLOOR = 1e-5


def numerical_gradient(f, param, step=DEFAULT_STEP, indices=None):
    """Central differences of scalar ``f()`` w.r.t. ``param.data`` (perturbed in place)."""
    flat = param.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(f().data)
        flat[i] = orig - step
        f_minus = float(f().data)
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad.reshape(param.shape)


def relative_error(analytic, numeric, floor=GRAD_FLOOR):
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def grad_check(f, params, step=DEFAULT_STEP, max_entries=None, seed=0, corrupt=None):
    """Return the worst relative error between analytic and numeric gradients.

    ``f`` rebuilds the graph on every call and returns a scalar Tensor.
    ``max_entries`` caps the number of coordinates probed per parameter
    (chosen with a seeded generator). ``corrupt`` is a hook applied to each
    analytic gradient before comparison; tests use it as a negative control.
    """
    errors = grad_check_report(f, params, step=step, max_entries=max_entries, seed=seed, corrupt=corrupt)
    return max(errors.values()) if errors else 0.0


def grad_check_report(f, params, step=DEFAULT_STEP, max_entries=None, seed=0, corrupt=None):
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(getattr(p, "name", None) or f"param{i}", p) for i, p in enumerate(params)]
    for _, p in named:
        p.grad = None
    out = f()
    out.backward()
    floor = GRAD_FLOOR * max(1.0, abs(float(out.data)))
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in named:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        if not np.all(np.isfinite(analytic)):
            raise NumericError(f"non-finite analytic gradient for {name}")
        if corrupt is not None:
            analytic = corrupt(analytic)
        if max_entries is not None and p.size > max_entries:
            idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
            numeric = numerical_gradient(f, p, step=step, indices=idx).reshape(-1)[idx]
            errors[name] = relative_error(analytic.reshape(-1)[idx], numeric, floor)
        else:
            errors[name] = relative_error(analytic, numerical_gradient(f, p, step=step), floor)
    return errors
