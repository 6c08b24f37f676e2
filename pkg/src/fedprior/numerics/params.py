"""ParamSet helpers.

A ParamSet is a plain ``dict[str, np.ndarray]`` keyed by parameter path.
Iteration order is always taken lexicographically by path via :func:`paths`.
"""
from __future__ import annotations

import numpy as np

from ..exceptions import ShapeError
from .autograd import parameter


def paths(params):
    return sorted(params)


def copy_params(params):
    return {k: np.array(params[k], dtype=np.float64, copy=True) for k in paths(params)}


def shape_compatible(a, b):
    if set(a) != set(b):
        return False
    return all(np.shape(a[k]) == np.shape(b[k]) for k in a)


def check_compatible(a, b, what="parameter sets"):
    if set(a) != set(b):
        missing = sorted(set(a) ^ set(b))
        raise ShapeError(f"{what} differ in paths: {missing[:5]}")
    for k in a:
        if np.shape(a[k]) != np.shape(b[k]):
            raise ShapeError(f"{what} differ at {k!r}: {np.shape(a[k])} vs {np.shape(b[k])}")


def flatten(params):
    """Concatenate all arrays (lexicographic path order) into one vector."""
    keys = paths(params)
    layout = [(k, np.shape(params[k])) for k in keys]
    if not keys:
        return np.zeros(0), layout
    vec = np.concatenate([np.asarray(params[k], dtype=np.float64).reshape(-1) for k in keys])
    return vec, layout


def unflatten(vec, layout):
    out, pos = {}, 0
    for k, shape in layout:
        n = int(np.prod(shape, dtype=np.int64))
        out[k] = vec[pos : pos + n].reshape(shape).copy()
        pos += n
    if pos != vec.size:
        raise ShapeError(f"vector length {vec.size} does not match layout size {pos}")
    return out


def as_leaves(params):
    """Wrap arrays as gradient-tracking leaf tensors."""
    return {k: parameter(params[k]) for k in paths(params)}


def count(params):
    return int(sum(np.size(v) for v in params.values()))


def all_finite(params):
    return all(np.all(np.isfinite(v)) for v in params.values())
