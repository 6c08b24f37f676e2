"""MRI forward model ``A = M F C``, sampling masks, coil maps and image metrics.

Images are complex arrays ``[..., H, W]``. Networks carry them as real
``[B, H, W, 2]`` tensors (real, imaginary channels); :func:`to_channels` and
:func:`from_channels` convert between the two.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigError, ShapeError
from .numerics.autograd import as_tensor, make_node, register


def dft2(img, direction="forward"):
    """Centered, orthonormal 2D DFT over the last two axes (DC at H/2, W/2)."""
    img = np.asarray(img)
    if img.shape[-1] < 2 or img.shape[-2] < 2:
        raise ShapeError(f"dft2 needs H, W >= 2, got {img.shape[-2:]}")
    axes = (-2, -1)
    shifted = np.fft.ifftshift(img, axes=axes)
    if direction == "forward":
        k = np.fft.fft2(shifted, norm="ortho")
    elif direction == "inverse":
        k = np.fft.ifft2(shifted, norm="ortho")
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    return np.fft.fftshift(k, axes=axes)


def idft2(k):
    return dft2(k, "inverse")


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def default_acs(H):
    return max(1, math.ceil(H / 16))


def gen_vd_mask(H, W, R, a=None, seed=0):
    """Variable-density random mask with exactly round(H*W/R) samples.

    The central (2a)x(2a) block is always sampled; the remaining budget is
    drawn without replacement with Gaussian density (sigma = H/4) around
    the k-space center.
    """
    if a is None:
        a = default_acs(H)
    if R < 1:
        raise ConfigError(f"acceleration must be >= 1, got {R}")
    budget = _round_half_up(H * W / R)
    acs = (2 * a) ** 2
    if budget < acs or 2 * a > min(H, W):
        raise ConfigError(f"sampling budget {budget} cannot hold the {2 * a}x{2 * a} ACS block")
    mask = np.zeros((H, W))
    cy, cx = H // 2, W // 2
    mask[cy - a : cy + a, cx - a : cx + a] = 1.0
    remaining = budget - acs
    if remaining > 0:
        yy, xx = np.meshgrid(np.arange(H) - cy, np.arange(W) - cx, indexing="ij")
        sigma = H / 4
        dens = np.exp(-(yy ** 2 + xx ** 2) / (2 * sigma ** 2)).reshape(-1)
        free = np.flatnonzero(mask.reshape(-1) == 0)
        p = dens[free] / dens[free].sum()
        rng = np.random.default_rng(seed)
        pick = rng.choice(free, size=remaining, replace=False, p=p)
        mask.reshape(-1)[pick] = 1.0
    return mask


def gen_coils(H, W, ncoils, seed=0):
    """Smooth complex coil sensitivities normalized to unit sum-of-squares.

    ``ncoils == 1`` gives a unit sensitivity (single-coil mode).
    """
    if ncoils < 1:
        raise ConfigError("ncoils must be >= 1")
    if ncoils == 1:
        return np.ones((1, H, W), dtype=np.complex128)
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(H) - H / 2, np.arange(W) - W / 2, indexing="ij")
    radius, width = H / 3, H / 2
    offset = rng.uniform(0, 2 * np.pi)
    coils = np.empty((ncoils, H, W), dtype=np.complex128)
    for c in range(ncoils):
        ang = offset + 2 * np.pi * c / ncoils
        cy, cx = radius * np.sin(ang), radius * np.cos(ang)
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        gy, gx = rng.uniform(-np.pi, np.pi, size=2) / max(H, W)
        phase = gy * yy + gx * xx + rng.uniform(-np.pi, np.pi)
        coils[c] = mag * np.exp(1j * phase)
    sos = np.sqrt((np.abs(coils) ** 2).sum(axis=0))
    return coils / sos


@dataclass(frozen=True, eq=False)
class ImagingOperator:
    """Sampling mask ``[H, W]`` and coil maps ``[ncoils, H, W]``."""

    mask: np.ndarray
    coils: np.ndarray

    def __post_init__(self):
        if self.coils.ndim != 3 or self.coils.shape[1:] != self.mask.shape:
            raise ShapeError(f"mask {self.mask.shape} and coils {self.coils.shape} disagree")

    @property
    def shape(self):
        return self.mask.shape

    @property
    def acceleration(self):
        return self.mask.size / self.mask.sum()

    def forward(self, x):
        return forward_op(x, self)

    def adjoint(self, y):
        return adjoint_op(y, self)


def forward_op(x, A):
    """y_c = M * F(C_c * x) for every coil. x: [..., H, W] -> [..., ncoils, H, W]."""
    x = np.asarray(x)
    if x.shape[-2:] != A.mask.shape:
        raise ShapeError(f"image {x.shape[-2:]} does not match operator {A.mask.shape}")
    return A.mask * dft2(A.coils * x[..., None, :, :])


def adjoint_op(y, A):
    """x = sum_c conj(C_c) * F^-1(M * y_c)."""
    y = np.asarray(y)
    if y.shape[-3:] != A.coils.shape:
        raise ShapeError(f"k-space {y.shape} does not match coils {A.coils.shape}")
    return (np.conj(A.coils) * idft2(A.mask * y)).sum(axis=-3)


def normal_op(x, A):
    return adjoint_op(forward_op(x, A), A)


# batched helpers: masks [B,H,W], coils [B,nc,H,W] or [nc,H,W]

def forward_batch(x, masks, coils):
    return masks[:, None] * dft2(coils * x[:, None])


def adjoint_batch(y, masks, coils):
    return (np.conj(coils) * idft2(masks[:, None] * y)).sum(axis=1)


def to_channels(x):
    x = np.asarray(x)
    return np.stack([x.real, x.imag], axis=-1)


def from_channels(t):
    t = np.asarray(t)
    return t[..., 0] + 1j * t[..., 1]


@register("data_consistency")
def data_consistency(x, log_mu, y, masks, coils):
    """Differentiable soft/hard data consistency on [B,H,W,2] images.

    At sampled k-space locations the prediction k is replaced by
    (k + mu*y)/(1 + mu); unsampled locations are untouched. With unit
    sum-of-squares coils this equals x + w*(A^H y - A^H A x), w = mu/(1+mu).
    ``log_mu=None`` selects hard mode (w = 1, measured samples substituted).
    """
    x = as_tensor(x)
    xc = from_channels(x.data)
    atay = adjoint_batch(y, masks, coils)
    resid = atay - adjoint_batch(forward_batch(xc, masks, coils), masks, coils)
    if log_mu is None:
        w, dw, parents = 1.0, None, (x,)
    else:
        log_mu = as_tensor(log_mu)
        mu = float(np.exp(log_mu.data))
        w = mu / (1.0 + mu)
        dw = mu / (1.0 + mu) ** 2
        parents = (x, log_mu)
    out = to_channels(xc + w * resid)

    def bw(g):
        gc = from_channels(g)
        gx = gc - w * adjoint_batch(forward_batch(gc, masks, coils), masks, coils)
        grads = [to_channels(gx)]
        if dw is not None:
            grads.append(np.array(dw * float(np.sum(g * to_channels(resid)))).reshape(log_mu.data.shape))
        return tuple(grads)

    return make_node(out, parents, bw)


def data_consistency_error(x, y, A):
    """||M (F(C x) - y)|| / ||y||."""
    r = forward_op(x, A) - A.mask * y
    ny = np.linalg.norm(y)
    return float(np.linalg.norm(r) / (ny if ny > 0 else 1.0))


# -- metrics -----------------------------------------------------------------

def _magnitude(img):
    img = np.asarray(img)
    return np.abs(img) if np.iscomplexobj(img) else img.astype(np.float64)


# MSE at or below float64 round-off of unit-peak images counts as an exact match
EXACT_MSE = (4 * np.finfo(np.float64).eps) ** 2


def psnr(ref, test):
    """PSNR in dB with peak 1.

    Identical inputs, and inputs that differ only by float64 round-off
    (MSE <= ``EXACT_MSE``, e.g. after an FFT round trip), give ``math.inf``.
    """
    a, b = _magnitude(ref), _magnitude(test)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err <= EXACT_MSE:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def ssim(ref, test, window=SSIM_WINDOW):
    """Mean SSIM over all valid windows of a uniform ``window x window`` filter."""
    a, b = _magnitude(ref), _magnitude(test)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window:
        raise ConfigError(f"image {a.shape} smaller than the {window}x{window} SSIM window")

    def local_mean(img):
        return sliding_window_view(img, (window, window)).mean(axis=(-2, -1))

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a ** 2
    var_b = local_mean(b * b) - mu_b ** 2
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))
