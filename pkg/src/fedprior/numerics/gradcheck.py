"""Central finite-difference gradient checks for registered ops and small models."""
from __future__ import annotations

import numpy as np

from . import ops
from .autograd import Tensor, backward, parameter


def _project(out, weights):
    return ops.sum(ops.mul(out, weights))


def relative_error(a, b, floor=1e-12):
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(fn, inputs, eps=1e-6, seed=0, floor=1e-12):
    """Compare autodiff and central differences of ``sum(fn(**inputs) * W)`` for a random W.

    ``inputs`` maps argument names to float arrays (all differentiated).
    Returns the largest per-input relative error; ``floor`` bounds the
    normalizing gradient norm from below, for inputs whose true gradient is ~0.
    """
    rng = np.random.default_rng([seed, 0x5EED])  # separate stream from any input generator
    inputs = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    probe = fn(**{k: Tensor(v) for k, v in inputs.items()})
    W = rng.normal(size=probe.data.shape)

    leaves = {k: parameter(v) for k, v in inputs.items()}
    analytic = backward(_project(fn(**leaves), W), leaves)

    def value(args):
        return float(np.sum(fn(**{k: Tensor(v) for k, v in args.items()}).data * W))

    worst = 0.0
    for name, x in inputs.items():
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += eps
            xm[idx] -= eps
            num[idx] = (value({**inputs, name: xp}) - value({**inputs, name: xm})) / (2 * eps)
        worst = max(worst, relative_error(analytic[name], num, floor))
    return worst
