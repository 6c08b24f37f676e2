"""Random-input builders for every registered differentiable op.

Each builder takes an rng and returns ``(fn, inputs)`` where ``fn(**tensors)``
calls the op with the differentiable arguments and fixed non-differentiable ones.
"""
import numpy as np

from fedprior.imaging import data_consistency, forward_batch, gen_coils, gen_vd_mask
from fedprior.numerics import ops


def _pos(rng, shape, lo=0.5, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def _dc(rng, soft):
    B, H, W = 2, 4, 4
    masks = np.stack([gen_vd_mask(H, W, 2, a=1, seed=int(rng.integers(1000))) for _ in range(B)])
    coils = gen_coils(H, W, 2, seed=int(rng.integers(1000)))
    ref = rng.normal(size=(B, H, W)) + 1j * rng.normal(size=(B, H, W))
    y = forward_batch(ref, masks, coils)
    x = rng.normal(size=(B, H, W, 2))
    if soft:
        return (lambda x, log_mu: data_consistency(x, log_mu, y, masks, coils),
                {"x": x, "log_mu": np.array(rng.normal())})
    return lambda x: data_consistency(x, None, y, masks, coils), {"x": x}


def build(name, rng):
    n = rng.normal
    if name in ("add", "sub", "mul"):
        op = getattr(ops, name)
        return (lambda a, b: op(a, b)), {"a": n(size=(3, 4)), "b": n(size=(4,))}
    if name == "div":
        return (lambda a, b: ops.div(a, b)), {"a": n(size=(3, 4)), "b": _pos(rng, (3, 1))}
    if name in ("neg", "square", "exp", "sigmoid", "silu", "gelu"):
        op = getattr(ops, name)
        return (lambda a: op(a)), {"a": n(size=(3, 5))}
    if name in ("log", "sqrt"):
        op = getattr(ops, name)
        return (lambda a: op(a)), {"a": _pos(rng, (3, 5))}
    if name == "relu":
        return (lambda a: ops.relu(a)), {"a": _away_from_zero(rng, (3, 5))}
    if name == "sum":
        return (lambda a: ops.sum(a, axis=1, keepdims=True)), {"a": n(size=(3, 4, 2))}
    if name == "mean":
        return (lambda a: ops.mean(a, axis=(0, 2))), {"a": n(size=(3, 4, 2))}
    if name == "reshape":
        return (lambda a: ops.reshape(a, (4, 6))), {"a": n(size=(2, 3, 4))}
    if name == "transpose":
        return (lambda a: ops.transpose(a, (2, 0, 1))), {"a": n(size=(2, 3, 4))}
    if name == "getitem":
        idx = (slice(None), np.array([0, 2, 2]))
        return (lambda a: ops.getitem(a, idx)), {"a": n(size=(2, 4, 3))}
    if name == "concat":
        return (lambda a, b: ops.concat([a, b], axis=1)), {"a": n(size=(2, 3)), "b": n(size=(2, 2))}
    if name == "embedding":
        idx = rng.integers(0, 5, size=(3, 2))
        return (lambda table: ops.embedding(table, idx)), {"table": n(size=(5, 4))}
    if name == "matmul":
        return (lambda a, b: ops.matmul(a, b)), {"a": n(size=(2, 3, 4)), "b": n(size=(4, 5))}
    if name == "einsum":
        return (lambda a, b: ops.einsum("bij,bjk->bik", a, b)), {"a": n(size=(2, 3, 4)), "b": n(size=(2, 4, 2))}
    if name in ("softmax", "log_softmax"):
        op = getattr(ops, name)
        return (lambda a: op(a, axis=-1)), {"a": n(size=(3, 6))}
    if name == "cross_entropy":
        t = rng.integers(0, 6, size=(2, 3))
        return (lambda a: ops.cross_entropy(a, t)), {"a": n(size=(2, 3, 6))}
    if name == "layer_norm":
        return (lambda a: ops.layer_norm(a)), {"a": n(size=(3, 6))}
    if name == "l2_normalize":
        return (lambda a: ops.l2_normalize(a)), {"a": n(size=(3, 4))}
    if name == "straight_through":
        # forward value tracks the input, so finite differences see the identity
        return (lambda a: ops.straight_through(a, a.data)), {"a": n(size=(3, 4))}
    if name == "conv2d":
        stride = int(rng.integers(1, 3))
        return (lambda x, w, b: ops.conv2d(x, w, b, stride=stride, padding=1),
                {"x": n(size=(2, 5, 5, 2)), "w": n(size=(3, 3, 2, 3)), "b": n(size=(3,))})
    if name == "upsample_nearest":
        return (lambda x: ops.upsample_nearest(x, 2)), {"x": n(size=(1, 2, 3, 2))}
    if name == "data_consistency":
        return _dc(rng, soft=bool(rng.integers(2)))
    raise KeyError(f"no gradient-check case for op {name!r}")
