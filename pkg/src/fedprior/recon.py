"""Heterogeneous per-site reconstruction networks and their two-stage training.

Three families share one contract (zero-filled image + measured k-space ->
image) but have incompatible parameter sets:

* ``unrolled``: one shared denoiser applied n times, each followed by data consistency
* ``cascade-dc``: n separate denoisers, each followed by data consistency
* ``conv-autoencoder``: encoder/decoder on the zero-filled image, then hard data consistency

Soft data-consistency blocks carry a learnable ``log mu``; the last block is
always hard so every output matches the measured samples exactly.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, ShapeError, TrainingError
from .imaging import adjoint_batch, data_consistency, default_acs, forward_batch, from_channels, gen_vd_mask, psnr, ssim, to_channels
from .numerics import AdamWConfig, AdamWState, adamw_step, as_leaves, backward, copy_params, ops
from .numerics.autograd import Tensor
from .seeding import seed_sequence

log = logging.getLogger(__name__)

FAMILIES = ("unrolled", "cascade-dc", "conv-autoencoder")


@dataclass(frozen=True)
class ArchSpec:
    family: str = "unrolled"
    n_cascades: int = 5
    width: int = 16
    depth: int = 3
    mu_init: float = 0.05

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown architecture family {self.family!r}; expected one of {FAMILIES}")
        if self.n_cascades < 1:
            raise ConfigError("n_cascades must be >= 1")
        if self.width < 1 or self.depth < 2:
            raise ConfigError("width must be >= 1 and depth >= 2")
        if not self.mu_init > 0:
            raise ConfigError("mu_init must be positive")

    @classmethod
    def parse(cls, text, **kw):
        """'unrolled-5', 'cascade-3' / 'cascade-dc-3', 'conv-autoencoder'."""
        m = re.fullmatch(r"(unrolled|cascade(?:-dc)?)-(\d+)", text.strip())
        if m:
            fam = "unrolled" if m.group(1) == "unrolled" else "cascade-dc"
            return cls(fam, int(m.group(2)), **kw)
        if text.strip() == "conv-autoencoder":
            return cls("conv-autoencoder", 1, **kw)
        raise ConfigError(f"cannot parse architecture {text!r}")

    @property
    def label(self):
        if self.family == "conv-autoencoder":
            return self.family
        return f"{'unrolled' if self.family == 'unrolled' else 'cascade'}-{self.n_cascades}"

    def to_dict(self):
        return asdict(self)


@dataclass
class ReconModel:
    spec: ArchSpec
    params: dict
    site: int = 0


# -- parameters --------------------------------------------------------------

def _conv_init(rng, cin, cout, zero=False):
    if zero:
        return np.zeros((3, 3, cin, cout)), np.zeros(cout)
    bound = math.sqrt(6.0 / (9 * cin))
    return rng.uniform(-bound, bound, size=(3, 3, cin, cout)), np.zeros(cout)


def _denoiser_init(P, prefix, rng, spec):
    chans = [2] + [spec.width] * (spec.depth - 1) + [2]
    for j in range(spec.depth):
        # last conv starts at zero: the residual denoiser is the identity at init
        P[f"{prefix}.conv{j}.w"], P[f"{prefix}.conv{j}.b"] = _conv_init(rng, chans[j], chans[j + 1], zero=j == spec.depth - 1)


def build_model(spec: ArchSpec, seed=0, site=0):
    rng = np.random.default_rng(seed)
    P = {}
    if spec.family == "unrolled":
        _denoiser_init(P, "den", rng, spec)
    elif spec.family == "cascade-dc":
        for i in range(spec.n_cascades):
            _denoiser_init(P, f"cascade{i:02d}", rng, spec)
    else:
        w = spec.width
        P["ae.enc0.w"], P["ae.enc0.b"] = _conv_init(rng, 2, w)
        P["ae.enc1.w"], P["ae.enc1.b"] = _conv_init(rng, w, 2 * w)
        P["ae.mid.w"], P["ae.mid.b"] = _conv_init(rng, 2 * w, 2 * w)
        P["ae.dec0.w"], P["ae.dec0.b"] = _conv_init(rng, 2 * w, w)
        P["ae.out.w"], P["ae.out.b"] = _conv_init(rng, w, 2, zero=True)
    if spec.family != "conv-autoencoder":
        for i in range(spec.n_cascades - 1):
            P[f"dc{i:02d}.log_mu"] = np.array(math.log(spec.mu_init))
    return ReconModel(spec, P, site)


# -- forward -----------------------------------------------------------------

def _conv(P, name, x, stride=1):
    return ops.conv2d(x, P[f"{name}.w"], P[f"{name}.b"], stride=stride, padding=1)


def _denoise(P, prefix, x, depth):
    h = x
    for j in range(depth - 1):
        h = ops.relu(_conv(P, f"{prefix}.conv{j}", h))
    return ops.add(x, _conv(P, f"{prefix}.conv{depth - 1}", h))


def dc_block(x, y, masks, coils, log_mu=None):
    """Soft (``log_mu`` given) or hard (``None``) data consistency on [B,H,W,2] images."""
    return data_consistency(x, log_mu, y, masks, coils)


def _forward(P, spec, x, y, masks, coils):
    if spec.family == "conv-autoencoder":
        h = ops.relu(_conv(P, "ae.enc0", x))
        h = ops.relu(_conv(P, "ae.enc1", h, stride=2))
        h = ops.relu(_conv(P, "ae.mid", h))
        h = ops.relu(_conv(P, "ae.dec0", ops.upsample_nearest(h, 2)))
        return dc_block(ops.add(x, _conv(P, "ae.out", h)), y, masks, coils)
    n = spec.n_cascades
    for i in range(n):
        prefix = "den" if spec.family == "unrolled" else f"cascade{i:02d}"
        x = _denoise(P, prefix, x, spec.depth)
        x = dc_block(x, y, masks, coils, P[f"dc{i:02d}.log_mu"] if i < n - 1 else None)
    return x


def forward_recon(model: ReconModel, x_us, y, masks, coils, params=None):
    """Batch forward. ``x_us`` [B,H,W] complex, ``y`` [B,nc,H,W], ``masks`` [B,H,W], ``coils`` [B,nc,H,W].

    Returns a Tensor [B,H,W,2]; pass ``params`` (leaf tensors) to differentiate.
    """
    x_us = np.asarray(x_us)
    if x_us.ndim != 3:
        raise ShapeError(f"expected a batch of images [B,H,W], got {x_us.shape}")
    if y.shape[0] != x_us.shape[0] or y.shape[-2:] != x_us.shape[-2:] or masks.shape != x_us.shape:
        raise ShapeError(f"inconsistent batch: x {x_us.shape}, y {y.shape}, masks {masks.shape}")
    H, W = x_us.shape[-2:]
    if model.spec.family == "conv-autoencoder" and (H % 2 or W % 2):
        raise ShapeError("conv-autoencoder needs even image sides")
    P = model.params if params is None else params
    return _forward(P, model.spec, Tensor(to_channels(x_us)), y, masks, coils)


def reconstruct(model: ReconModel, data, batch_size=32):
    """Complex reconstructions [N,H,W] for every triple in ``data``."""
    out = []
    for i in range(0, len(data), batch_size):
        b = data.batch(np.arange(i, min(i + batch_size, len(data))))
        out.append(from_channels(forward_recon(model, b.x_us, b.y, b.masks, b.coils).data))
    return np.concatenate(out)


# -- data --------------------------------------------------------------------

@dataclass
class ReconSet:
    """Triples (x_ref, y, x_us) with the per-sample operator (mask, coils) and source site."""

    x_ref: np.ndarray
    y: np.ndarray
    x_us: np.ndarray
    masks: np.ndarray
    coils: np.ndarray
    source: np.ndarray

    def __len__(self):
        return len(self.x_ref)

    def batch(self, idx):
        return ReconSet(self.x_ref[idx], self.y[idx], self.x_us[idx], self.masks[idx], self.coils[idx],
                        self.source[idx])

    @staticmethod
    def concat(sets):
        return ReconSet(*(np.concatenate([getattr(s, f) for s in sets]) for f in
                          ("x_ref", "y", "x_us", "masks", "coils", "source")))


@dataclass(frozen=True)
class OperatorPool:
    """Acquisition settings of one site: acceleration, ACS half-width and candidate coil maps."""

    R: float
    coil_maps: tuple  # each [nc,H,W]
    acs: int | None = None

    def __post_init__(self):
        if len(self.coil_maps) == 0:
            raise ConfigError("operator pool needs at least one coil set")

    @property
    def shape(self):
        return self.coil_maps[0].shape[-2:]

    def draw(self, rng):
        coils = self.coil_maps[int(rng.integers(len(self.coil_maps)))]
        H, W = self.shape
        mask = gen_vd_mask(H, W, self.R, self.acs if self.acs is not None else default_acs(H),
                           seed=int(rng.integers(2 ** 63)))
        return mask, coils


def simulate(x_ref, pool: OperatorPool, seed=0, source=0):
    """Pair every reference image with a fresh operator from ``pool``; y = A x, x_us = A^H y."""
    x_ref = np.asarray(x_ref, dtype=np.complex128)
    if x_ref.ndim != 3 or x_ref.shape[1:] != pool.shape:
        raise ShapeError(f"references {x_ref.shape} do not match the operator pool {pool.shape}")
    ss = seed_sequence(seed)
    rngs = [np.random.default_rng(s) for s in ss.spawn(len(x_ref))]
    ops_ = [pool.draw(r) for r in rngs]
    masks = np.stack([m for m, _ in ops_])
    coils = np.stack([c for _, c in ops_])
    y = forward_batch(x_ref, masks, coils)
    x_us = adjoint_batch(y, masks, coils)
    return ReconSet(x_ref, y, x_us, masks, coils, np.full(len(x_ref), source, dtype=np.int64))


def check_recon_set(data: ReconSet, tol=1e-10):
    """Raise ContractError-style ValueError unless x_us == A^H y and y == A x_ref for every triple."""
    y_hat = forward_batch(data.x_ref, data.masks, data.coils)
    x_hat = adjoint_batch(data.y, data.masks, data.coils)
    ey = np.linalg.norm((y_hat - data.y).reshape(len(data), -1), axis=1)
    ny = np.maximum(np.linalg.norm(data.y.reshape(len(data), -1), axis=1), 1e-300)
    ex = np.linalg.norm((x_hat - data.x_us).reshape(len(data), -1), axis=1)
    nx = np.maximum(np.linalg.norm(data.x_us.reshape(len(data), -1), axis=1), 1e-300)
    bad = np.flatnonzero((ey / ny > tol) | (ex / nx > tol))
    if len(bad):
        raise ValueError(f"{len(bad)} inconsistent triples (first index {bad[0]})")
    return True


def synth_site_dataset(prior, source_site, pool: OperatorPool, n, seed=0):
    """``n`` prior samples of ``source_site`` simulated under operators from ``pool``."""
    if n < 1:
        raise ConfigError("need at least one synthetic sample")
    ss = seed_sequence(seed)
    gen_seed, op_seed = ss.spawn(2)
    images = prior.sample(source_site, n=n, seed=gen_seed)
    return simulate(images, pool, seed=op_seed, source=source_site)


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class ReconHyper:
    lr: float = 1e-3
    batch_size: int = 8
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.95

    def adamw(self):
        return AdamWConfig(lr=self.lr, beta1=self.beta1, beta2=self.beta2, weight_decay=self.weight_decay)


def recon_loss(model: ReconModel, batch: ReconSet, params=None):
    out = forward_recon(model, batch.x_us, batch.y, batch.masks, batch.coils, params=params)
    return ops.mse(out, to_channels(batch.x_ref))


def _run_epochs(model, pools, hyper, seed, stage):
    """One epoch per entry of ``pools``; fresh AdamW state for the stage."""
    rng = np.random.default_rng(seed)
    params = copy_params(model.params)
    state = AdamWState()
    opt = hyper.adamw()
    history = []
    for epoch, data in enumerate(pools):
        order = rng.permutation(len(data))
        losses = []
        for i in range(0, len(data), hyper.batch_size):
            leaves = as_leaves(params)
            loss = recon_loss(model, data.batch(order[i : i + hyper.batch_size]), leaves)
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingError(f"non-finite reconstruction loss during {stage}",
                                    {"site": model.site, "epoch": epoch, "batch": i // hyper.batch_size})
            grads = backward(loss, leaves)
            params, state = adamw_step(params, grads, state, opt)
            losses.append(lv)
        history.append(float(np.mean(losses)))
        log.debug("%s site %d epoch %d loss %.6f", stage, model.site, epoch, history[-1])
    return ReconModel(model.spec, params, model.site), history


def pretrain_local(model: ReconModel, local: ReconSet, epochs, hyper=ReconHyper(), seed=0):
    """Train on local triples only; returns ``(model, per-epoch losses)``."""
    if len(local) == 0:
        raise ConfigError("local dataset is empty")
    return _run_epochs(model, [local] * epochs, hyper, seed, "pretrain")


def source_schedule(site, n_sites, epochs):
    """Synthetic source per fine-tuning epoch: the other sites in cyclic order."""
    others = [j for j in range(n_sites) if j != site]
    if not others:
        raise ConfigError("hybrid fine-tuning needs at least two sites")
    return [others[e % len(others)] for e in range(epochs)]


def finetune_hybrid(model: ReconModel, local: ReconSet, synthetic: dict, epochs, hyper=ReconHyper(), seed=0,
                    n_sites=None):
    """Each epoch trains on local data plus the synthetic pool of one other site.

    ``synthetic`` maps source site j -> ReconSet, for every j != model.site.
    """
    n_sites = n_sites if n_sites is not None else max(max(synthetic, default=0), model.site) + 1
    sched = source_schedule(model.site, n_sites, epochs)
    for j in set(sched):
        if j not in synthetic or len(synthetic[j]) == 0:
            raise ConfigError(f"missing synthetic data from site {j}")
    return _run_epochs(model, [ReconSet.concat([local, synthetic[j]]) for j in sched], hyper, seed, "finetune")


METRIC_FIELDS = ("psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "n", "inf_count")


def evaluate(model: ReconModel, test: ReconSet, return_recon=False):
    """Mean/std PSNR and SSIM of magnitudes; infinite PSNRs are counted, not averaged."""
    if len(test) == 0:
        raise ConfigError("test set is empty")
    rec = reconstruct(model, test)
    p = np.array([psnr(a, b) for a, b in zip(test.x_ref, rec)])
    s = np.array([ssim(a, b) for a, b in zip(test.x_ref, rec)])
    finite = p[np.isfinite(p)]
    metrics = {
        "psnr_mean": float(finite.mean()) if len(finite) else math.inf,
        "psnr_std": float(finite.std()) if len(finite) else 0.0,
        "ssim_mean": float(s.mean()),
        "ssim_std": float(s.std()),
        "n": int(len(test)),
        "inf_count": int(np.sum(~np.isfinite(p))),
    }
    return (metrics, rec) if return_recon else metrics


def dc_errors(rec, data: ReconSet):
    """Per-image ||M (F(C x) - y)|| / ||y||."""
    r = forward_batch(rec, data.masks, data.coils) - data.masks[:, None] * data.y
    num = np.linalg.norm(r.reshape(len(data), -1), axis=1)
    den = np.linalg.norm(data.y.reshape(len(data), -1), axis=1)
    return num / np.where(den > 0, den, 1.0)


# -- estimator ---------------------------------------------------------------

class ReconstructionModel(BaseEstimator):
    """sklearn-style wrapper; ``X`` is a :class:`ReconSet` because each sample carries its own operator."""

    def __init__(self, family="unrolled", n_cascades=5, width=16, depth=3, mu_init=0.05, epochs=30, lr=1e-3,
                 batch_size=8, site=0, random_state=0):
        self.family = family
        self.n_cascades = n_cascades
        self.width = width
        self.depth = depth
        self.mu_init = mu_init
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.site = site
        self.random_state = random_state

    def _spec(self):
        return ArchSpec(self.family, self.n_cascades, self.width, self.depth, self.mu_init)

    def _hyper(self):
        return ReconHyper(lr=self.lr, batch_size=self.batch_size)

    def fit(self, X: ReconSet, y=None):
        check_recon_set(X, tol=1e-8)
        model = build_model(self._spec(), self.random_state, self.site)
        self.model_, self.loss_history_ = pretrain_local(model, X, self.epochs, self._hyper(), self.random_state)
        return self

    def finetune(self, X: ReconSet, synthetic: dict, epochs=None, n_sites=None):
        check_is_fitted(self, "model_")
        self.model_, hist = finetune_hybrid(self.model_, X, synthetic, self.epochs if epochs is None else epochs,
                                            self._hyper(), self.random_state + 1, n_sites)
        self.loss_history_ = list(self.loss_history_) + hist
        return self

    def predict(self, X: ReconSet):
        check_is_fitted(self, "model_")
        return reconstruct(self.model_, X)

    def score(self, X: ReconSet, y=None):
        """Mean finite PSNR (dB)."""
        return evaluate(self.model_, X)["psnr_mean"]
