"""FedAvg simulation for the site-prompted prior: broadcast, local training, weighted aggregation.

Sites exchange parameter sets by value. The codec is frozen and shared once,
so local datasets are pre-tokenized pyramids (``[N, sum p_s^2]`` int arrays).
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, ShapeError, TrainingError
from .numerics import AdamWConfig, AdamWState, adamw_step, as_leaves, backward, check_compatible, copy_params, paths
from .persistence import paramset_checksum
from .transformer import PriorConfig, init_prior, loss_prior

log = logging.getLogger(__name__)

WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    batch_size: int = 16
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")

    def adamw(self):
        return AdamWConfig(lr=self.lr, beta1=self.beta1, beta2=self.beta2, weight_decay=self.weight_decay)


@dataclass(frozen=True)
class FederationConfig:
    n_sites: int = 3
    rounds: int = 50
    local_epochs: int = 1
    weights: tuple | None = None  # None -> proportional to dataset sizes
    hyper: TrainHyper = field(default_factory=TrainHyper)
    seed: int = 0
    parallel: bool = False
    max_workers: int | None = None

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 1:
            raise ConfigError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.n_sites < 1:
            raise ConfigError("need at least one site")
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
            check_weights(self.weights, self.n_sites)


@dataclass
class RoundLog:
    round: int
    site_losses: list  # mean training loss per site over the round
    epoch_losses: list  # per site, one mean loss per local epoch
    checksum: str
    wall_time: float


def check_weights(weights, K):
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (K,):
        raise ConfigError(f"expected {K} aggregation weights, got {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ConfigError("aggregation weights must be finite and non-negative")
    if abs(math.fsum(w) - 1.0) > WEIGHT_TOL:
        raise ConfigError(f"aggregation weights must sum to 1 (got {math.fsum(w)!r})")
    return w


def size_weights(sizes):
    """alpha_k = N_k / sum N."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes <= 0):
        raise ConfigError("every site needs a non-empty dataset")
    return sizes / sizes.sum()


def broadcast(global_params, K):
    if K < 1:
        raise ConfigError("K must be >= 1")
    return [copy_params(global_params) for _ in range(K)]


def aggregate(locals_, weights):
    """Path-wise convex combination sum_k alpha_k theta^k.

    Evaluated as ``min_k theta^k + sum_k alpha_k (theta^k - min)`` with the
    terms sorted per element, which makes the result independent of site
    order and exact when all locals coincide.
    """
    if not locals_:
        raise ConfigError("nothing to aggregate")
    w = check_weights(weights, len(locals_))
    for other in locals_[1:]:
        check_compatible(locals_[0], other, "local parameter sets")
    out = {}
    for k in paths(locals_[0]):
        stack = np.stack([np.asarray(p[k], dtype=np.float64) for p in locals_])
        base = stack.min(axis=0)
        terms = w.reshape((-1,) + (1,) * (stack.ndim - 1)) * (stack - base)
        terms.sort(axis=0)
        out[k] = base + terms.sum(axis=0)
    return out


def _check_tokens(tokens, cfg: PriorConfig):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.n_tokens:
        raise ShapeError(f"site dataset must be [N, {cfg.n_tokens}] tokens, got {tokens.shape}")
    if len(tokens) == 0:
        raise ConfigError("site dataset is empty")
    return tokens


def local_train(site, params, tokens, epochs, hyper: TrainHyper, cfg: PriorConfig, seed=0):
    """``epochs`` passes of shuffled mini-batch AdamW on the prior loss for one site.

    ``site`` is an int, or an array of per-sample site indices (centralized
    training). Returns ``(params, epoch_losses)``; fresh optimizer state per call.
    """
    if epochs < 1:
        raise ConfigError("local training needs at least one epoch")
    tokens = _check_tokens(tokens, cfg)
    rng = np.random.default_rng(seed)
    params = copy_params(params)
    state = AdamWState()
    opt = hyper.adamw()
    n = len(tokens)
    sites = np.broadcast_to(np.asarray(site, dtype=np.int64), (n,))
    epoch_losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, hyper.batch_size):
            idx = order[i : i + hyper.batch_size]
            leaves = as_leaves(params)
            loss, _ = loss_prior(tokens[idx], sites[idx], leaves, cfg)
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingError(f"non-finite prior loss at site {site}",
                                    {"site": site, "epoch": epoch, "batch": i // hyper.batch_size, "loss": lv})
            grads = backward(loss, leaves)
            params, state = adamw_step(params, grads, state, opt)
            losses.append(lv)
        epoch_losses.append(float(np.mean(losses)))
    return params, epoch_losses


def mean_token_ce(params, datasets, cfg: PriorConfig, batch_size=64):
    """Mean token cross-entropy over all sites' data (no site term)."""
    total, count = 0.0, 0
    for k, tokens in enumerate(datasets):
        tokens = _check_tokens(tokens, cfg)
        for i in range(0, len(tokens), batch_size):
            b = tokens[i : i + batch_size]
            _, ce = loss_prior(b, k, params, cfg, lam=0.0)
            total += ce * len(b)
            count += len(b)
    return total / count


def _site_seed(seed, rnd, site):
    return np.random.SeedSequence([seed, rnd, site])


def run_federation(fed: FederationConfig, prior_cfg: PriorConfig, datasets, init_params=None, callback=None):
    """Rounds of broadcast -> local_train -> aggregate.

    ``datasets[k]`` are site k's token pyramids. Returns ``(params, logs)``.
    Output is bit-identical whether sites train serially or in parallel.
    """
    if len(datasets) != fed.n_sites or prior_cfg.n_sites != fed.n_sites:
        raise ConfigError(f"{len(datasets)} datasets for {fed.n_sites} sites (prior expects {prior_cfg.n_sites})")
    datasets = [_check_tokens(t, prior_cfg) for t in datasets]
    weights = fed.weights if fed.weights is not None else size_weights([len(t) for t in datasets])
    params = init_prior(prior_cfg, fed.seed) if init_params is None else copy_params(init_params)
    K = fed.n_sites
    logs = []
    pool = ThreadPoolExecutor(max_workers=fed.max_workers or K) if fed.parallel else None
    try:
        for rnd in range(fed.rounds):
            t0 = time.perf_counter()
            copies = broadcast(params, K)

            def work(k):
                return local_train(k, copies[k], datasets[k], fed.local_epochs, fed.hyper, prior_cfg,
                                   seed=_site_seed(fed.seed, rnd, k))

            results = list(pool.map(work, range(K))) if pool else [work(k) for k in range(K)]
            params = aggregate([r[0] for r in results], weights)
            ep = [r[1] for r in results]
            entry = RoundLog(rnd, [float(np.mean(e)) for e in ep], ep, paramset_checksum(params),
                             time.perf_counter() - t0)
            logs.append(entry)
            log.info("round %d site losses %s", rnd, " ".join(f"{v:.4f}" for v in entry.site_losses))
            if callback is not None:
                callback(entry, params)
    finally:
        if pool:
            pool.shutdown()
    return params, logs


def round_rows(logs):
    """CSV rows (round, site, epoch, loss)."""
    return [(e.round, k, i, loss) for e in logs for k, site in enumerate(e.epoch_losses)
            for i, loss in enumerate(site)]
