from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ContractError
from .params import check_compatible, paths


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, hyper=AdamWConfig()):
    """One AdamW update with decoupled weight decay.

    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    check_compatible(params, grads, "params/grads")
    t = state.step + 1
    if t < 1:
        raise ContractError("step counter must be >= 1")
    b1, b2 = hyper.beta1, hyper.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k in paths(params):
        p = params[k]
        g = grads[k]
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        denom = np.sqrt(v / bc2) + hyper.eps
        upd = (m / bc1) / denom if hyper.eps > 0 else _safe_ratio(m / bc1, denom)
        new_p[k] = p * (1.0 - hyper.lr * hyper.weight_decay) - hyper.lr * upd
        new_m[k] = m
        new_v[k] = v
    return new_p, AdamWState(step=t, m=new_m, v=new_v)


def _safe_ratio(num, den):
    # eps == 0 with zero second moment: treat 0/0 as no update
    out = np.zeros_like(num)
    nz = den != 0
    out[nz] = num[nz] / den[nz]
    return out
