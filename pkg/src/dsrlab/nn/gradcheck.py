"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def relative_error(analytic, numeric, floor: float = 1e-12) -> np.ndarray:
    """Elementwise ``|ga - gn| / max(|ga|, |gn|, floor)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / den


def numeric_gradient(loss, array: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``loss()`` w.r.t. ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = loss()
        flat[i] = old - eps
        down = loss()
        flat[i] = old
        g[i] = (up - down) / (2.0 * eps)
    return grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_array: dict = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def check_arrays(loss, arrays, analytic, names=None, eps: float = 1e-5) -> GradCheckResult:
    """Compare analytic gradients of ``loss()`` against central differences."""
    names = names or [f"a{i}" for i in range(len(arrays))]
    per = {}
    for name, arr, ga in zip(names, arrays, analytic):
        gn = numeric_gradient(loss, arr, eps)
        per[name] = float(relative_error(ga, gn).max()) if arr.size else 0.0
    return GradCheckResult(max(per.values(), default=0.0), per)


def projection_loss(seed: int = 0):
    """Loss ``sum(out * R)`` with a fixed Gaussian ``R`` drawn on first use."""
    cache = {}

    def fn(out):
        if "R" not in cache:
            cache["R"] = np.random.default_rng(seed).standard_normal(np.shape(out))
        r = cache["R"]
        return np.sum(out * r), r

    return fn


def grad_check(model, x, eps: float = 1e-5, loss_fn=None, forward=None, check_input: bool = True,
               seed: int = 0, oracle_dtype=np.longdouble) -> GradCheckResult:
    """Finite-difference check of every parameter (and the input) of ``model``.

    ``forward(model, x)`` defaults to ``model.forward(x, True)`` and
    ``loss_fn(out) -> (value, dloss/dout)`` to a random projection.

    The analytic gradients come from an ordinary float64 pass. The
    finite-difference passes feed the input as ``oracle_dtype``, which
    carries the whole forward computation at that precision so that
    round-off in the loss stays below the smallest gradient entries.
    """
    loss_fn = loss_fn or projection_loss(seed)
    forward = forward or (lambda m, inp: m.forward(inp, True))
    x = np.array(x, dtype=np.float64)

    def loss():
        return loss_fn(forward(model, x.astype(oracle_dtype)))[0]

    model.zero_grad()
    _, dout = loss_fn(forward(model, x))
    dx = model.backward(dout)
    names, arrays, analytic = [], [], []
    for name, p, g in model.named_parameters():
        names.append(name)
        arrays.append(p)
        analytic.append(g.copy())
    if check_input:
        names.append("input")
        arrays.append(x)
        analytic.append(np.asarray(dx))
    return check_arrays(loss, arrays, analytic, names, eps)
