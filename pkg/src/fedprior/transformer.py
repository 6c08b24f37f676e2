"""Site-prompted next-scale autoregressive transformer over token pyramids.

Sequence layout for a schedule p_1..p_S: position 0 is the site token, then
the p_s^2 positions of every scale in order. Positions of scale s carry the
embedding of f_{s-1} bilinearly upsampled to p_s x p_s (a learned start
embedding at scale 1), so their logits depend on the site and f_{<s} only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .codec import CodecConfig, TokenPyramid, bilinear_matrix, decode_multiscale, encode_multiscale
from .exceptions import ConfigError, ShapeError
from .numerics import ops
from .numerics.autograd import Tensor, as_tensor
from .seeding import seed_sequence

ADALN_EPS = 1e-5


@dataclass(frozen=True)
class PriorConfig:
    n_sites: int = 3
    scales: tuple = (1, 2, 4, 8)
    vocab_size: int = 128
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    lam: float = 0.0015

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.n_layers < 1 or self.n_sites < 1:
            raise ConfigError("need at least one layer and one site")

    @property
    def n_tokens(self):
        return sum(p * p for p in self.scales)

    @property
    def seq_len(self):
        return 1 + self.n_tokens

    @classmethod
    def for_codec(cls, codec_cfg: CodecConfig, **kw):
        return cls(scales=codec_cfg.scales, vocab_size=codec_cfg.vocab_size, **kw)


def scale_ids(cfg: PriorConfig):
    """Scale id per sequence position (0 for the site token, s for scale s)."""
    ids = [0]
    for s, p in enumerate(cfg.scales, start=1):
        ids += [s] * (p * p)
    return np.asarray(ids)


def scale_offsets(cfg: PriorConfig):
    """Start offset of each scale inside the flattened token sequence (without the site token)."""
    out, pos = [], 0
    for p in cfg.scales:
        out.append(pos)
        pos += p * p
    return out


def scale_mask(cfg: PriorConfig):
    """Additive attention mask: 0 where scale(j) <= scale(i), -inf elsewhere."""
    ids = scale_ids(cfg)
    allowed = ids[None, :] <= ids[:, None]
    return np.where(allowed, 0.0, -np.inf)


def init_prior(cfg: PriorConfig, seed=0):
    rng = np.random.default_rng(seed)
    d, V, K = cfg.d_model, cfg.vocab_size, cfg.n_sites

    def lin(fan_in, fan_out, scale=1.0):
        return rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out)), np.zeros(fan_out)

    P = {
        "site.embed": rng.normal(0.0, 1.0, size=(K, d)),
        "tok.embed": rng.normal(0.0, 1.0, size=(V, d)),
        "tok.start": rng.normal(0.0, 1.0, size=(d,)),
        "pos.embed": rng.normal(0.0, 0.02, size=(cfg.seq_len, d)),
        "scale.embed": rng.normal(0.0, 0.02, size=(len(cfg.scales) + 1, d)),
    }
    for l in range(cfg.n_layers):
        b = f"blocks.{l:02d}"
        P[f"{b}.ada.w"], P[f"{b}.ada.b"] = np.zeros((d, 4 * d)), np.zeros(4 * d)
        P[f"{b}.attn.qkv.w"], P[f"{b}.attn.qkv.b"] = lin(d, 3 * d)
        P[f"{b}.attn.out.w"], P[f"{b}.attn.out.b"] = lin(d, d, 1.0 / math.sqrt(2 * cfg.n_layers))
        P[f"{b}.ffn.fc1.w"], P[f"{b}.ffn.fc1.b"] = lin(d, cfg.ffn_mult * d)
        P[f"{b}.ffn.fc2.w"], P[f"{b}.ffn.fc2.b"] = lin(cfg.ffn_mult * d, d, 1.0 / math.sqrt(2 * cfg.n_layers))
    P["head.ada.w"], P["head.ada.b"] = np.zeros((d, 2 * d)), np.zeros(2 * d)
    # zero output head: an untrained model predicts uniform logits
    P["head.out.w"], P["head.out.b"] = np.zeros((d, V)), np.zeros(V)
    P["probe.w"], P["probe.b"] = lin(d, K)
    return P


def _tokens(f, cfg):
    if isinstance(f, TokenPyramid):
        if tuple(f.scales) != cfg.scales:
            raise ShapeError(f"pyramid schedule {f.scales} != prior schedule {cfg.scales}")
        f = f.flat()
    f = np.asarray(f, dtype=np.int64)
    if f.ndim == 1:
        f = f[None]
    if f.shape[-1] != cfg.n_tokens:
        raise ShapeError(f"expected {cfg.n_tokens} tokens per pyramid, got {f.shape[-1]}")
    if f.size and (f.min() < 0 or f.max() >= cfg.vocab_size):
        raise IndexError("token index out of range")
    return f


def _sites(sites, B, cfg):
    sites = np.broadcast_to(np.asarray(sites, dtype=np.int64), (B,))
    if sites.min() < 0 or sites.max() >= cfg.n_sites:
        raise IndexError(f"site index out of range [0, {cfg.n_sites})")
    return sites


def site_token(P, sites):
    return ops.embedding(P["site.embed"], sites)


def build_input(f, sites, P, cfg: PriorConfig, start_offset=None):
    """Hidden input [B, 1+T, d]: site token, shifted upsampled token embeddings, + position/scale codes."""
    f = _tokens(f, cfg)
    B = f.shape[0]
    sites = _sites(sites, B, cfg)
    d = cfg.d_model
    offs = scale_offsets(cfg)
    parts = [ops.reshape(site_token(P, sites), (B, 1, d))]
    p1 = cfg.scales[0]
    start = ops.reshape(P["tok.start"], (1, 1, d))
    start = ops.mul(start, np.ones((B, p1 * p1, 1)))
    if start_offset is not None:
        start = ops.add(start, np.asarray(start_offset).reshape(B, 1, d))
    parts.append(start)
    for s in range(1, len(cfg.scales)):
        prev, cur = cfg.scales[s - 1], cfg.scales[s]
        toks = f[:, offs[s - 1] : offs[s - 1] + prev * prev].reshape(B, prev, prev)
        emb = ops.embedding(P["tok.embed"], toks)  # B,prev,prev,d
        m = bilinear_matrix(prev, cur)
        up = ops.resize(emb, m, m)
        parts.append(ops.reshape(up, (B, cur * cur, d)))
    h = ops.concat(parts, axis=1)
    h = ops.add(h, P["pos.embed"])
    return ops.add(h, ops.embedding(P["scale.embed"], scale_ids(cfg)))


def adaln(h, gamma, beta, eps=ADALN_EPS):
    """gamma * (h - mean) / std + beta over the channel axis; gamma/beta broadcast per row."""
    return ops.add(ops.mul(ops.layer_norm(h, eps), gamma), beta)


def _modulation(P, prefix, st, n):
    """Site-token affine heads -> n (gain, bias) pairs, each [B,1,d]; gains are 1 + linear."""
    mod = ops.add(ops.matmul(st, P[f"{prefix}.w"]), P[f"{prefix}.b"])
    B, dd = mod.shape
    d = dd // (2 * n)
    mod = ops.reshape(mod, (B, 1, dd))
    out = []
    for i in range(n):
        g = ops.add(ops.getitem(mod, (slice(None), slice(None), slice(2 * i * d, (2 * i + 1) * d))), 1.0)
        b = ops.getitem(mod, (slice(None), slice(None), slice((2 * i + 1) * d, (2 * i + 2) * d)))
        out.append((g, b))
    return out


def mhsa(h, mask, P, prefix, n_heads, return_probs=False):
    """Multi-head self-attention with unit-norm queries/keys and an additive mask."""
    h = as_tensor(h)
    B, T, d = h.shape
    dh = d // n_heads
    qkv = ops.add(ops.matmul(h, P[f"{prefix}.qkv.w"]), P[f"{prefix}.qkv.b"])
    qkv = ops.transpose(ops.reshape(qkv, (B, T, 3, n_heads, dh)), (2, 0, 3, 1, 4))  # 3,B,H,T,dh
    q = ops.l2_normalize(ops.getitem(qkv, 0))
    k = ops.l2_normalize(ops.getitem(qkv, 1))
    v = ops.getitem(qkv, 2)
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = ops.softmax(ops.add(scores, mask), axis=-1)
    out = ops.matmul(probs, v)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (B, T, d))
    out = ops.add(ops.matmul(out, P[f"{prefix}.out.w"]), P[f"{prefix}.out.b"])
    return (out, probs) if return_probs else out


def _block(h, st, mask, P, l, cfg):
    b = f"blocks.{l:02d}"
    (g1, b1), (g2, b2) = _modulation(P, f"{b}.ada", st, 2)
    h = ops.add(h, mhsa(adaln(h, g1, b1), mask, P, f"{b}.attn", cfg.n_heads))
    x = adaln(h, g2, b2)
    x = ops.gelu(ops.add(ops.matmul(x, P[f"{b}.ffn.fc1.w"]), P[f"{b}.ffn.fc1.b"]))
    x = ops.add(ops.matmul(x, P[f"{b}.ffn.fc2.w"]), P[f"{b}.ffn.fc2.b"])
    return ops.add(h, x)


def forward_hidden(f, sites, P, cfg: PriorConfig, start_offset=None):
    f = _tokens(f, cfg)
    sites = _sites(sites, f.shape[0], cfg)
    st = site_token(P, sites)
    mask = scale_mask(cfg)
    h = build_input(f, sites, P, cfg, start_offset)
    for l in range(cfg.n_layers):
        h = _block(h, st, mask, P, l, cfg)
    return h, st


def forward(f, sites, P, cfg: PriorConfig, return_site_logits=False, start_offset=None):
    """Token logits [B, T, V] (T = sum p_s^2) for pyramids ``f`` at sites ``sites``."""
    h, st = forward_hidden(f, sites, P, cfg, start_offset)
    ((g, b),) = _modulation(P, "head.ada", st, 1)
    x = ops.getitem(h, (slice(None), slice(1, None)))
    logits = ops.add(ops.matmul(adaln(x, g, b), P["head.out.w"]), P["head.out.b"])
    if not return_site_logits:
        return logits
    s0 = ops.getitem(h, (slice(None), 0))
    site_logits = ops.add(ops.matmul(s0, P["probe.w"]), P["probe.b"])
    return logits, site_logits


def loss_prior(f, sites, P, cfg: PriorConfig, lam=None):
    """Mean token cross-entropy plus lam * site-classification cross-entropy.

    Returns ``(loss, token_ce)`` with ``token_ce`` a float.
    """
    f = _tokens(f, cfg)
    sites = _sites(sites, f.shape[0], cfg)
    lam = cfg.lam if lam is None else lam
    logits, site_logits = forward(f, sites, P, cfg, return_site_logits=True)
    token_ce = ops.cross_entropy(logits, f)
    if lam == 0:
        return token_ce, token_ce.item()
    site_ce = ops.cross_entropy(site_logits, sites)
    return ops.add(token_ce, ops.mul(site_ce, lam)), token_ce.item()


# -- sampling ----------------------------------------------------------------

def n_candidates(V, q):
    if not 0.0 < q <= 1.0:
        raise ConfigError(f"keep fraction must lie in (0, 1], got {q}")
    return max(1, math.ceil(q * V - 1e-9))


def _nucleus_pick(rows, q, u):
    k = n_candidates(rows.shape[1], q)
    order = np.argsort(-rows, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(rows, order, axis=1)
    top = top - top.max(axis=1, keepdims=True)
    p = np.exp(top)
    p /= p.sum(axis=1, keepdims=True)
    cdf = np.cumsum(p, axis=1)
    pick = np.minimum((cdf < u[:, None]).sum(axis=1), k - 1)
    return order[np.arange(len(rows)), pick]


def sample_nucleus(logits, q=0.05, rng=None):
    """Keep the top ceil(q*V) logits, renormalize by softmax, draw one index per row.

    ``logits`` is [V] or [..., V]; returns an int or an int array of the leading shape.
    """
    rng = np.random.default_rng() if rng is None else rng
    x = np.asarray(logits, dtype=np.float64)
    rows = x.reshape(-1, x.shape[-1])
    out = _nucleus_pick(rows, q, rng.random(len(rows)))
    return int(out[0]) if x.ndim == 1 else out.reshape(x.shape[:-1])


def sample_greedy(logits):
    return np.argmax(np.asarray(logits), axis=-1)


def sample_rngs(seed, n):
    """Independent per-sample generators, so results do not depend on batching."""
    ss = seed_sequence(seed)
    return [np.random.default_rng(c) for c in ss.spawn(n)]


def generate_tokens(sites, P, cfg: PriorConfig, rngs, q=0.05, greedy=False, start_noise=0.0):
    """Scale-by-scale sampling; all positions of a scale are drawn jointly from one forward pass.

    ``rngs`` holds one generator per sample (see :func:`sample_rngs`).
    """
    sites = np.atleast_1d(np.asarray(sites, dtype=np.int64))
    B = len(sites)
    if len(rngs) != B:
        raise ShapeError(f"{len(rngs)} generators for {B} samples")
    offset = None
    if start_noise:
        offset = start_noise * np.stack([r.normal(size=cfg.d_model) for r in rngs])
    f = np.zeros((B, cfg.n_tokens), dtype=np.int64)
    offs = scale_offsets(cfg)
    for s, p in enumerate(cfg.scales):
        sl = slice(offs[s], offs[s] + p * p)
        logits = forward(f, sites, P, cfg, start_offset=offset).data[:, sl]
        if greedy:
            f[:, sl] = sample_greedy(logits)
        else:
            u = np.stack([r.random(p * p) for r in rngs])
            f[:, sl] = _nucleus_pick(logits.reshape(B * p * p, -1), q, u.reshape(-1)).reshape(B, p * p)
    return TokenPyramid.from_flat(f, cfg.scales)


def clip_magnitude(x):
    mag = np.abs(x)
    return np.where(mag > 1.0, x / np.where(mag > 0, mag, 1.0), x)


def generate(site, P, cfg: PriorConfig, codec_params, codec_cfg: CodecConfig, seed=0, n=1, q=0.05,
             greedy=False, start_noise=0.0, batch_size=64):
    """Sample ``n`` pyramids for ``site`` and decode them; magnitudes are clipped to [0, 1].

    Sample i always uses the i-th stream spawned from ``seed``, whatever ``batch_size`` is.
    """
    if not 0 <= site < cfg.n_sites:
        raise IndexError(f"site {site} out of range [0, {cfg.n_sites})")
    rngs = sample_rngs(seed, n)
    maps, images = [], []
    for i in range(0, n, batch_size):
        chunk = rngs[i : i + batch_size]
        pyr = generate_tokens(np.full(len(chunk), site), P, cfg, chunk, q=q, greedy=greedy, start_noise=start_noise)
        maps.append(pyr.flat())
        images.append(clip_magnitude(decode_multiscale(pyr, codec_params, codec_cfg)))
    return TokenPyramid.from_flat(np.concatenate(maps), cfg.scales), np.concatenate(images)


@dataclass
class PriorModel:
    """Trained transformer parameters bound to the frozen codec."""

    params: dict
    cfg: PriorConfig
    codec_params: dict
    codec_cfg: CodecConfig
    top_q: float = 0.05
    start_noise: float = 0.0

    def generate(self, site, n=1, seed=0, greedy=False):
        return generate(site, self.params, self.cfg, self.codec_params, self.codec_cfg, seed=seed, n=n,
                        q=self.top_q, greedy=greedy, start_noise=self.start_noise)

    def sample(self, site, n=1, seed=0):
        return self.generate(site, n=n, seed=seed)[1]


# -- estimator ---------------------------------------------------------------

class SitePromptedPrior(BaseEstimator):
    """Centralized (non-federated) training of the prior; see :mod:`fedprior.federation` for FL.

    ``fit(X, y)`` takes complex images and their site indices; ``sample``
    draws synthetic images for one site.
    """

    def __init__(self, codec=None, n_sites=3, d_model=64, n_layers=4, n_heads=4, ffn_mult=4, lam=0.0015,
                 epochs=10, batch_size=16, lr=1e-3, top_q=0.05, random_state=0):
        self.codec = codec
        self.n_sites = n_sites
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.ffn_mult = ffn_mult
        self.lam = lam
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.top_q = top_q
        self.random_state = random_state

    def _prior_config(self):
        return PriorConfig.for_codec(self.codec.config_, n_sites=self.n_sites, d_model=self.d_model,
                                     n_layers=self.n_layers, n_heads=self.n_heads, ffn_mult=self.ffn_mult,
                                     lam=self.lam)

    def fit(self, X, y):
        from .federation import TrainHyper, local_train

        check_is_fitted(self.codec, "params_")
        y = np.asarray(y, dtype=np.int64)
        tokens = encode_multiscale(np.asarray(X), self.codec.params_, self.codec.config_).flat()
        cfg = self._prior_config()
        params = init_prior(cfg, self.random_state)
        hyper = TrainHyper(lr=self.lr, batch_size=self.batch_size)
        params, losses = local_train(y, params, tokens, self.epochs, hyper, cfg, seed=self.random_state)
        self.params_, self.loss_history_ = params, losses
        return self

    def sample(self, site, n=1, random_state=None):
        check_is_fitted(self, "params_")
        seed = self.random_state if random_state is None else random_state
        _, images = generate(site, self.params_, self._prior_config(), self.codec.params_, self.codec.config_,
                             seed=seed, n=n, q=self.top_q)
        return images
