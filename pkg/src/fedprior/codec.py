"""Multi-scale residual vector-quantizing autoencoder.

An image ``[H, W]`` (complex) is encoded to a latent grid ``z`` of shape
``[p_S, p_S, c]``. The latent is tokenized coarse to fine: at every scale the
current residual is area-averaged to ``p_s x p_s``, snapped to the nearest
codebook row, bilinearly upsampled back to ``p_S``, passed through a shared
3x3 projection and subtracted. Decoding sums the projected upsampled code
maps and runs the conv decoder.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, ShapeError, TrainingError
from .imaging import from_channels, psnr, to_channels
from .numerics import AdamWConfig, AdamWState, adamw_step, as_leaves, backward, ops
from .numerics.autograd import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CodecConfig:
    image_size: int = 32
    scales: tuple = (1, 2, 4, 8)
    channels: int = 16
    vocab_size: int = 128
    width: int = 32

    def __post_init__(self):
        sc = tuple(int(s) for s in self.scales)
        object.__setattr__(self, "scales", sc)
        if any(b <= a for a, b in zip(sc, sc[1:])) or sc[0] < 1:
            raise ConfigError(f"scale schedule must be strictly increasing positive ints, got {sc}")
        ratio = self.image_size / sc[-1]
        if ratio < 1 or ratio != int(ratio) or int(ratio) & (int(ratio) - 1):
            raise ConfigError(f"image size {self.image_size} must be a power-of-two multiple of {sc[-1]}")
        if self.vocab_size < 2:
            raise ConfigError("vocabulary needs at least two codes")

    @property
    def latent_size(self):
        return self.scales[-1]

    @property
    def n_down(self):
        return int(round(math.log2(self.image_size // self.latent_size)))

    @property
    def n_tokens(self):
        return sum(p * p for p in self.scales)


@dataclass
class TokenPyramid:
    """Token maps ``maps[s]`` of shape ``[..., p_s, p_s]`` (leading batch dims allowed)."""

    maps: list
    scales: tuple

    def __post_init__(self):
        if len(self.maps) != len(self.scales):
            raise ShapeError(f"{len(self.maps)} maps for a {len(self.scales)}-scale schedule")
        for m, p in zip(self.maps, self.scales):
            if m.shape[-2:] != (p, p):
                raise ShapeError(f"token map {m.shape} does not match scale {p}")

    def flat(self):
        lead = self.maps[0].shape[:-2]
        return np.concatenate([m.reshape(*lead, -1) for m in self.maps], axis=-1)

    @classmethod
    def from_flat(cls, tokens, scales):
        tokens = np.asarray(tokens, dtype=np.int64)
        total = sum(p * p for p in scales)
        if tokens.shape[-1] != total:
            raise ShapeError(f"{tokens.shape[-1]} tokens for a schedule holding {total}")
        maps, pos = [], 0
        for p in scales:
            maps.append(tokens[..., pos : pos + p * p].reshape(*tokens.shape[:-1], p, p))
            pos += p * p
        return cls(maps, tuple(scales))

    def __getitem__(self, i):
        return TokenPyramid([m[i] for m in self.maps], self.scales)

    def __len__(self):
        return self.maps[0].shape[0]


# -- resampling matrices -----------------------------------------------------

def area_matrix(src, dst):
    """[dst, src] matrix averaging source cells over each destination cell."""
    m = np.zeros((dst, src))
    step = src / dst
    for i in range(dst):
        lo, hi = i * step, (i + 1) * step
        for j in range(int(math.floor(lo)), int(math.ceil(hi))):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                m[i, j] = overlap / step
    return m


def bilinear_matrix(src, dst):
    """[dst, src] bilinear interpolation matrix (half-pixel centers, edge clamped)."""
    m = np.zeros((dst, src))
    if src == 1:
        m[:, 0] = 1.0
        return m
    scale = src / dst
    for i in range(dst):
        x = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(x)), src - 1)
        i1 = min(i0 + 1, src - 1)
        lam = x - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def _resize_np(x, mat):
    return np.einsum("ip,jq,...pqc->...ijc", mat, mat, x, optimize=True)


# -- parameters --------------------------------------------------------------

def _conv_init(rng, k, cin, cout, gain=1.0):
    bound = gain * math.sqrt(6.0 / (k * k * cin))
    return rng.uniform(-bound, bound, size=(k, k, cin, cout)), np.zeros(cout)


def init_codec(cfg: CodecConfig, seed=0):
    """Encoder: conv_in at full resolution, then (stride-2 conv, residual block) per level.
    Decoder mirrors it with nearest upsampling + conv; the full-resolution stage runs at half width.
    """
    rng = np.random.default_rng(seed)
    P = {}
    w, c, half = cfg.width, cfg.channels, max(cfg.width // 2, 2)

    def conv(name, cin, cout, gain=1.0):
        P[f"{name}.w"], P[f"{name}.b"] = _conv_init(rng, 3, cin, cout, gain)

    def res(name):
        conv(f"{name}.conv1", w, w)
        conv(f"{name}.conv2", w, w, gain=0.1)

    conv("enc.conv_in", 2, half)
    for i in range(cfg.n_down):
        conv(f"enc.down{i}", half if i == 0 else w, w)
        res(f"enc.res{i}")
    conv("enc.conv_out", w, c)

    conv("dec.conv_in", c, w)
    res("dec.res0")
    for i in range(cfg.n_down):
        last = i == cfg.n_down - 1
        conv(f"dec.up{i}", w, half if last else w)
        if not last:
            res(f"dec.res{i + 1}")
    conv("dec.conv_out", half, 2)

    proj = np.zeros((3, 3, c, c))
    proj[1, 1] = np.eye(c)
    P["quant.proj.w"] = proj
    P["quant.codebook"] = rng.normal(0.0, 1.0, size=(cfg.vocab_size, c))
    return P


def _conv(P, name, x, stride=1):
    return ops.conv2d(x, P[f"{name}.w"], P[f"{name}.b"], stride=stride, padding=1)


def _res(P, name, x):
    h = _conv(P, f"{name}.conv1", ops.silu(x))
    h = _conv(P, f"{name}.conv2", ops.silu(h))
    return ops.add(x, h)


def _encoder(P, cfg, xt):
    h = _conv(P, "enc.conv_in", xt)
    for i in range(cfg.n_down):
        h = _conv(P, f"enc.down{i}", ops.silu(h), stride=2)
        h = _res(P, f"enc.res{i}", h)
    return _conv(P, "enc.conv_out", ops.silu(h))


def _decoder(P, cfg, zt):
    h = _conv(P, "dec.conv_in", zt)
    h = _res(P, "dec.res0", h)
    for i in range(cfg.n_down):
        h = _conv(P, f"dec.up{i}", ops.upsample_nearest(h, 2))
        if i < cfg.n_down - 1:
            h = _res(P, f"dec.res{i + 1}", h)
    return _conv(P, "dec.conv_out", ops.silu(h))


def _as_batch(x, cfg):
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[-2:] != (cfg.image_size, cfg.image_size):
        raise ShapeError(f"expected {cfg.image_size}x{cfg.image_size} images, got {x.shape[-2:]}")
    return x, single


def encode_latent(x, params, cfg: CodecConfig):
    """Encoder forward pass: complex images [B,H,W] (or [H,W]) -> latents [B,p,p,c]."""
    xb, single = _as_batch(x, cfg)
    z = _encoder(params, cfg, Tensor(to_channels(xb))).data
    return z[0] if single else z


def quantize(vectors, codebook, chunk=4096):
    """Index of the nearest codebook row (squared Euclidean); ties go to the smallest index."""
    vectors = np.asarray(vectors, dtype=np.float64)
    codebook = np.asarray(codebook, dtype=np.float64)
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ConfigError("empty codebook")
    if vectors.shape[-1] != codebook.shape[1]:
        raise ShapeError(f"vector width {vectors.shape[-1]} != code width {codebook.shape[1]}")
    flat = vectors.reshape(-1, codebook.shape[1])
    out = np.empty(len(flat), dtype=np.int64)
    for i in range(0, len(flat), chunk):
        d = ((flat[i : i + chunk, None, :] - codebook[None]) ** 2).sum(axis=-1)
        out[i : i + chunk] = np.argmin(d, axis=1)
    return out.reshape(vectors.shape[:-1])


def _project(params, u):
    return ops.conv2d(u, params["quant.proj.w"], None, stride=1, padding=1)


def residual_quantize(z, params, cfg: CodecConfig, quantizer=None):
    """Run the coarse-to-fine residual loop on latents ``z`` [B,p,p,c].

    Returns ``(pyramid, upsampled_sum, residual_inputs)`` where
    ``upsampled_sum`` is the sum over scales of the upsampled code maps
    (before projection) and ``residual_inputs[s]`` are the downsampled
    residuals that were quantized at scale s.
    """
    P_S = cfg.latent_size
    if z.shape[-3:] != (P_S, P_S, cfg.channels):
        raise ShapeError(f"latent {z.shape} does not match schedule/channels")
    book = params["quant.codebook"]
    quantizer = quantizer or (lambda d: quantize(d, book))
    r = np.array(z, dtype=np.float64, copy=True)
    total = np.zeros_like(r)
    maps, inputs = [], []
    for p in cfg.scales:
        d = _resize_np(r, area_matrix(P_S, p)) if p != P_S else r.copy()
        idx = quantizer(d)
        e = params["quant.codebook"][idx]
        u = _resize_np(e, bilinear_matrix(p, P_S)) if p != P_S else e
        r = r - _project(params, Tensor(u)).data
        total = total + u
        maps.append(idx)
        inputs.append(d)
    return TokenPyramid(maps, cfg.scales), total, inputs


def encode_multiscale(x, params, cfg: CodecConfig):
    """Image(s) -> TokenPyramid with maps [B,p_s,p_s] (no batch dim for a single image)."""
    xb, single = _as_batch(x, cfg)
    z = encode_latent(xb, params, cfg)
    pyr, _, _ = residual_quantize(z, params, cfg)
    return pyr[0] if single else pyr


def pyramid_latent(pyramid: TokenPyramid, params, cfg: CodecConfig):
    """Projected sum of upsampled code maps (the quantized latent), [B,p,p,c] or [p,p,c]."""
    P_S = cfg.latent_size
    if tuple(pyramid.scales) != tuple(cfg.scales):
        raise ShapeError(f"pyramid schedule {pyramid.scales} != codec schedule {cfg.scales}")
    if pyramid.maps[0].ndim == 2:
        return pyramid_latent(TokenPyramid([m[None] for m in pyramid.maps], pyramid.scales), params, cfg)[0]
    V = params["quant.codebook"].shape[0]
    total = None
    for m, p in zip(pyramid.maps, cfg.scales):
        m = np.asarray(m)
        if m.size and (m.min() < 0 or m.max() >= V):
            raise IndexError(f"token index out of range [0, {V})")
        e = params["quant.codebook"][m]
        u = _resize_np(e, bilinear_matrix(p, P_S)) if p != P_S else e
        total = u if total is None else total + u
    return _project(params, Tensor(total)).data


def decode_latent(zq, params, cfg: CodecConfig):
    zq = np.asarray(zq)
    single = zq.ndim == 3
    zb = zq[None] if single else zq
    x = from_channels(_decoder(params, cfg, Tensor(zb)).data)
    return x[0] if single else x


def decode_multiscale(pyramid: TokenPyramid, params, cfg: CodecConfig):
    """TokenPyramid -> complex image(s)."""
    return decode_latent(pyramid_latent(pyramid, params, cfg), params, cfg)


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class CodecTrainConfig:
    steps: int = 2400
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 0.0
    ema_decay: float = 0.99
    dead_code_every: int = 50
    dead_code_until: float = 0.75  # no restarts in the final quarter, so the codebook can settle
    log_every: int = 100
    seed: int = 0
    lr_floor: float = 0.05  # cosine decay from lr to lr * lr_floor


def ema_update(codebook, ema_count, ema_sum, vectors, indices, decay):
    """EMA codebook update; rows with no assignments this step are left untouched.

    Returns new ``(codebook, ema_count, ema_sum)``.
    """
    V, c = codebook.shape
    vectors = np.asarray(vectors).reshape(-1, c)
    indices = np.asarray(indices).reshape(-1)
    counts = np.bincount(indices, minlength=V).astype(np.float64)
    sums = np.zeros((V, c))
    np.add.at(sums, indices, vectors)
    new_count = decay * ema_count + (1 - decay) * counts
    new_sum = decay * ema_sum + (1 - decay) * sums
    book = codebook.copy()
    hit = counts > 0
    book[hit] = new_sum[hit] / new_count[hit, None]
    return book, new_count, new_sum


def codec_loss(params, cfg, x_batch, leaves=None):
    """Image MSE + latent MSE with a straight-through quantizer.

    Returns ``(loss_tensor, aux)`` where aux carries the quantizer inputs for
    the EMA update.
    """
    P = leaves if leaves is not None else params
    xt = Tensor(to_channels(x_batch))
    z = _encoder(P, cfg, xt)
    numeric = {k: (v.data if isinstance(v, Tensor) else v) for k, v in P.items()}
    pyr, total, inputs = residual_quantize(z.data, numeric, cfg)
    zq = _project(P, Tensor(total))
    x_hat = _decoder(P, cfg, ops.straight_through(z, zq.data))
    loss = ops.add(ops.mse(x_hat, xt), ops.mse(z, zq))
    return loss, {"pyramid": pyr, "inputs": inputs}


def pretrain_codec(aux_images, cfg: CodecConfig = CodecConfig(), hyper: CodecTrainConfig = CodecTrainConfig(),
                   params=None, callback=None):
    """Train the codec on an auxiliary image set; returns frozen params and a loss history."""
    aux_images = np.asarray(aux_images)
    if len(aux_images) == 0:
        raise ConfigError("auxiliary dataset is empty")
    rng = np.random.default_rng(hyper.seed)
    params = dict(params) if params is not None else init_codec(cfg, hyper.seed)
    V, c = cfg.vocab_size, cfg.channels
    # data-dependent codebook init from quantizer inputs of a first batch
    probe = aux_images[rng.choice(len(aux_images), size=min(len(aux_images), 64), replace=False)]
    _, _, inputs = residual_quantize(encode_latent(probe, params, cfg), params, cfg)
    pool = np.concatenate([d.reshape(-1, c) for d in inputs])
    params["quant.codebook"] = pool[rng.choice(len(pool), size=V, replace=len(pool) < V)].copy()
    ema_count = np.ones(V)
    ema_sum = params["quant.codebook"].copy()
    usage = np.zeros(V, dtype=np.int64)

    trainable = [k for k in params if k != "quant.codebook"]
    opt = AdamWConfig(lr=hyper.lr, weight_decay=hyper.weight_decay)
    state = AdamWState()
    history = []
    n = len(aux_images)
    order = rng.permutation(n)
    pos = 0
    for step in range(hyper.steps):
        if pos + hyper.batch_size > n:
            order, pos = rng.permutation(n), 0
        batch = aux_images[order[pos : pos + hyper.batch_size]]
        pos += hyper.batch_size
        leaves = as_leaves({k: params[k] for k in trainable})
        full = dict(leaves)
        full["quant.codebook"] = params["quant.codebook"]
        loss, aux = codec_loss(params, cfg, batch, leaves=full)
        lv = loss.item()
        if not math.isfinite(lv):
            raise TrainingError("codec loss is not finite", {"step": step, "loss": lv})
        grads = backward(loss, leaves)
        frac = hyper.lr_floor + (1 - hyper.lr_floor) * 0.5 * (1 + math.cos(math.pi * step / hyper.steps))
        new, state = adamw_step({k: params[k] for k in trainable}, grads, state, replace(opt, lr=hyper.lr * frac))
        params.update(new)
        vecs = np.concatenate([d.reshape(-1, c) for d in aux["inputs"]])
        idx = np.concatenate([m.reshape(-1) for m in aux["pyramid"].maps])
        book, ema_count, ema_sum = ema_update(params["quant.codebook"], ema_count, ema_sum, vecs, idx, hyper.ema_decay)
        usage += np.bincount(idx, minlength=V)
        restart_ok = step < hyper.dead_code_until * hyper.steps
        if restart_ok and hyper.dead_code_every and (step + 1) % hyper.dead_code_every == 0:
            dead = np.flatnonzero(usage == 0)
            if len(dead):
                # restart unused codes on the quantizer inputs with the largest residual error
                err = ((vecs - book[idx]) ** 2).sum(axis=1)
                cand = np.argsort(-err)[: max(len(dead) * 4, 1)]
                fresh = vecs[rng.choice(cand, size=len(dead), replace=len(cand) < len(dead))]
                book[dead] = fresh
                ema_sum[dead] = fresh
                ema_count[dead] = 1.0
            usage[:] = 0
        params["quant.codebook"] = book
        history.append(lv)
        if hyper.log_every and (step + 1) % hyper.log_every == 0:
            log.info("codec step %d loss %.5f", step + 1, float(np.mean(history[-hyper.log_every:])))
        if callback is not None:
            callback(step, lv)
    return params, history


def reconstruction_psnr(images, params, cfg):
    """Mean magnitude PSNR of decode(encode(x)) over a set of images."""
    images = np.asarray(images)
    rec = decode_multiscale(encode_multiscale(images, params, cfg), params, cfg)
    return float(np.mean([psnr(np.abs(a), np.clip(np.abs(b), 0, 1)) for a, b in zip(images, rec)]))


# -- estimator ---------------------------------------------------------------

class MultiScaleVQCodec(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` pre-trains, ``transform`` tokenizes, ``inverse_transform`` decodes.

    ``transform`` returns flattened token sequences of shape ``[n, sum(p_s^2)]``.
    """

    def __init__(self, image_size=32, scales=(1, 2, 4, 8), channels=16, vocab_size=128, width=32,
                 steps=2400, batch_size=8, lr=2e-3, ema_decay=0.99, random_state=0):
        self.image_size = image_size
        self.scales = scales
        self.channels = channels
        self.vocab_size = vocab_size
        self.width = width
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.ema_decay = ema_decay
        self.random_state = random_state

    @property
    def config_(self):
        return CodecConfig(self.image_size, tuple(self.scales), self.channels, self.vocab_size, self.width)

    def fit(self, X, y=None):
        X = _check_images(X, self.image_size)
        hyper = CodecTrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                                 ema_decay=self.ema_decay, seed=self.random_state)
        self.params_, self.loss_history_ = pretrain_codec(X, self.config_, hyper)
        return self

    @classmethod
    def from_params(cls, params, cfg: CodecConfig, **kwargs):
        est = cls(image_size=cfg.image_size, scales=cfg.scales, channels=cfg.channels,
                  vocab_size=cfg.vocab_size, width=cfg.width, **kwargs)
        est.params_ = params
        return est

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = _check_images(X, self.image_size)
        return encode_multiscale(X, self.params_, self.config_).flat()

    def inverse_transform(self, T):
        check_is_fitted(self, "params_")
        pyr = TokenPyramid.from_flat(np.atleast_2d(T), self.config_.scales)
        return decode_multiscale(pyr, self.params_, self.config_)


def _check_images(X, size):
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1:] != (size, size):
        raise ShapeError(f"expected images of shape [n, {size}, {size}], got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    return X.astype(np.complex128)
