"""Dense float64 tensors with reverse-mode autodiff and an AdamW optimizer."""
from . import ops
from .autograd import REGISTRY, Tensor, as_tensor, backward, parameter, unbroadcast
from .optim import AdamWConfig, AdamWState, adamw_step
from .params import (
    all_finite,
    as_leaves,
    check_compatible,
    copy_params,
    flatten,
    paths,
    shape_compatible,
    unflatten,
)

__all__ = [
    "ops",
    "REGISTRY",
    "Tensor",
    "as_tensor",
    "backward",
    "parameter",
    "unbroadcast",
    "AdamWConfig",
    "AdamWState",
    "adamw_step",
    "all_finite",
    "as_leaves",
    "check_compatible",
    "copy_params",
    "flatten",
    "paths",
    "shape_compatible",
    "unflatten",
]
