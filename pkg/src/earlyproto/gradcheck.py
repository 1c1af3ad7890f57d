"""Central finite-difference gradient oracle.

Works on plain numpy arrays through a user-supplied scalar function, so it
shares nothing with the reverse-mode path it checks.
"""
from __future__ import annotations

import numpy as np

from . import diffcore as dc


def numeric_grad(f, x: np.ndarray, h=1e-5) -> np.ndarray:
    """d f / d x by central differences; ``f`` reads ``x`` in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ValueError("numeric_grad needs a contiguous array it can perturb in place")
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check(fn, inputs: list[dc.Tensor], h=1e-5) -> float:
    """Relative error between analytic and numeric gradients, measured on the
    concatenation over all inputs.

    ``fn(*inputs)`` must return a scalar :class:`Tensor`.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    dc.backward(fn(*inputs))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    def value():
        with dc.no_grad():
            return float(fn(*inputs).data)

    numeric = [numeric_grad(value, t.data, h) for t in inputs]
    return rel_error(np.concatenate([g.ravel() for g in analytic]),
                     np.concatenate([g.ravel() for g in numeric]))


def weighted_sum(y: dc.Tensor, seed=0) -> dc.Tensor:
    """Random linear functional of ``y`` (plain sums hide errors, e.g. in softmax)."""
    w = np.random.default_rng(seed + 1000).normal(size=y.shape)
    return dc.tsum(dc.mul(y, dc.Tensor(w)))


def gradient_flow(params, loss: dc.Tensor) -> dict[str, float]:
    """Backprop ``loss`` alone and report the largest |grad| per parameter group."""
    from .model import param_group

    params.zero_grad()
    dc.backward(loss)
    out: dict[str, float] = {}
    for name, t in params.tensors.items():
        g = param_group(name)
        out[g] = max(out.get(g, 0.0), float(np.abs(t.grad).max()))
    return out


def params_check(params, loss_fn, names=None, h=1e-5) -> float:
    """Finite-difference check of ``loss_fn(params)`` against selected tensors."""
    names = list(params.tensors) if names is None else names
    params.zero_grad()
    dc.backward(loss_fn(params))
    analytic = {n: params[n].grad.copy() for n in names}

    def value():
        with dc.no_grad():
            return float(loss_fn(params).data)

    numeric = {n: numeric_grad(value, params[n].data, h) for n in names}
    return rel_error(np.concatenate([analytic[n].ravel() for n in names]),
                     np.concatenate([numeric[n].ravel() for n in names]))
