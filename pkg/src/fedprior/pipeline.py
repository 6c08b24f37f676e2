"""End-to-end stages shared by the command line and the acceptance suite.

Every stage is a pure function of the run configuration (and its inputs), so
reruns reproduce their outputs byte for byte.
"""
from __future__ import annotations

import logging
import re
from pathlib import Path

import numpy as np

from .codec import encode_multiscale, pretrain_codec
from .config import RunConfig
from .datasets import aux_phantoms, gen_site_phantoms, make_sites
from .exceptions import ConfigError, FormatError
from .federation import run_federation
from .imaging import gen_coils
from .persistence import file_checksum, load_tensor, save_tensor
from .recon import (
    OperatorPool,
    ReconSet,
    build_model,
    dc_errors,
    evaluate,
    finetune_hybrid,
    pretrain_local,
    simulate,
    synth_site_dataset,
)
from .transformer import PriorModel

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
_PURPOSE = {"train": 0, "val": 1, "test": 2, "synth": 3}


# -- data --------------------------------------------------------------------

def site_specs(cfg: RunConfig):
    return make_sites(cfg.n_sites, cfg.seeds()["data"])


def split_indices(cfg: RunConfig, site):
    s = cfg.sites
    total = s["n_train"] + s["n_val"] + s["n_test"]
    perm = np.random.default_rng([cfg.seeds()["data"], 7, site]).permutation(total)
    a, b = s["n_train"], s["n_train"] + s["n_val"]
    return {"train": np.sort(perm[:a]), "val": np.sort(perm[a:b]), "test": np.sort(perm[b:])}


def site_images(cfg: RunConfig, site, split=None):
    """Reference images of one site, all splits (dict) or one split (array)."""
    spec = site_specs(cfg)[site]
    H = cfg.sites["image_size"]
    idx = split_indices(cfg, site)
    total = sum(len(v) for v in idx.values())
    images = gen_site_phantoms(spec, total, H, H)
    out = {k: images[v] for k, v in idx.items()}
    return out if split is None else out[split]


def write_dataset(cfg: RunConfig, out):
    """site_<k>/<split>/img_<i>.fvt files; returns {relative path: checksum}."""
    out = Path(out)
    files = {}
    for k in range(cfg.n_sites):
        imgs = site_images(cfg, k)
        idx = split_indices(cfg, k)
        for split in SPLITS:
            for i, img in zip(idx[split], imgs[split]):
                path = out / f"site_{k}" / split / f"img_{int(i):04d}.fvt"
                save_tensor(img, path)
                files[str(path.relative_to(out))] = file_checksum(path)
    return files


_IMG = re.compile(r"img_(\d+)\.fvt")


def load_split(data_dir, site, split):
    d = Path(data_dir) / f"site_{site}" / split
    if not d.is_dir():
        raise FileNotFoundError(f"missing dataset directory {d}")
    files = sorted((int(m.group(1)), p) for p in d.iterdir() if (m := _IMG.fullmatch(p.name)))
    if not files:
        raise FormatError(f"no images in {d}")
    return np.stack([load_tensor(p) for _, p in files])


# -- acquisition -------------------------------------------------------------

def site_pool(cfg: RunConfig, site, R):
    H = cfg.sites["image_size"]
    coils = tuple(gen_coils(H, H, cfg.sites["ncoils"], seed=[cfg.seeds()["ops"], site, j])
                  for j in range(cfg.sites["coil_sets"]))
    return OperatorPool(float(R), coils)


def _op_seed(cfg, purpose, site, R, *extra):
    return np.random.SeedSequence([cfg.seeds()["ops"], _PURPOSE[purpose], site, int(round(R * 1000)), *extra])


def site_triples(cfg: RunConfig, site, images, R, purpose="train", rep=0):
    return simulate(images, site_pool(cfg, site, R), seed=_op_seed(cfg, purpose, site, R, rep), source=site)


# -- prior -------------------------------------------------------------------

def train_codec(cfg: RunConfig, callback=None):
    aux = aux_phantoms(cfg.codec["n_aux"], cfg.sites["image_size"], cfg.sites["image_size"], seed=cfg.seeds()["aux"])
    return pretrain_codec(aux, cfg.codec_config(), cfg.codec_train_config(), callback=callback)


def tokenize(cfg: RunConfig, codec_params, images_by_site):
    ccfg = cfg.codec_config()
    return [encode_multiscale(np.asarray(x), codec_params, ccfg).flat() for x in images_by_site]


def train_prior(cfg: RunConfig, codec_params, images_by_site, rounds=None, threads=None, callback=None):
    """Federated prior training on each site's training images; returns ``(PriorModel, logs, tokens)``."""
    if len(images_by_site) != cfg.n_sites:
        raise ConfigError(f"expected images for {cfg.n_sites} sites, got {len(images_by_site)}")
    tokens = tokenize(cfg, codec_params, images_by_site)
    fed = cfg.federation_config(rounds=rounds, threads=threads)
    params, logs = run_federation(fed, cfg.prior_config(), tokens, callback=callback)
    prior = PriorModel(params, cfg.prior_config(), codec_params, cfg.codec_config(), cfg.prior["top_q"],
                       cfg.prior["start_noise"])
    return prior, logs, tokens


# -- reconstruction ----------------------------------------------------------

def synthetic_sets(cfg: RunConfig, prior, site, R, rep=0):
    """Synthetic triples from every other site, simulated under ``site``'s acquisition."""
    pool = site_pool(cfg, site, R)
    n = cfg.recon["n_synth"]
    return {j: synth_site_dataset(prior, j, pool, n, seed=_op_seed(cfg, "synth", site, R, j, rep))
            for j in range(cfg.n_sites) if j != site}


def train_site(cfg: RunConfig, site, train_images, prior=None, skip_finetune=False, rep=0, synthetic=None):
    """Local pre-training, then (unless skipped) hybrid fine-tuning.

    Returns ``(single_site_model, final_model, history)``; with
    ``skip_finetune`` both models are the same object.
    """
    R = cfg.recon["R"]
    hyper = cfg.recon_hyper()
    seed = np.random.SeedSequence([cfg.seeds()["recon"], site, rep])
    init_seed, pre_seed, ft_seed = seed.spawn(3)
    local = site_triples(cfg, site, train_images, R, "train", rep)
    model = build_model(cfg.arch(site), init_seed, site)
    single, hist = pretrain_local(model, local, cfg.recon["pretrain_epochs"], hyper, pre_seed)
    history = {"pretrain": hist, "finetune": []}
    if skip_finetune or cfg.recon["finetune_epochs"] == 0:
        return single, single, history
    if synthetic is None:
        if prior is None:
            raise ConfigError("hybrid fine-tuning needs a trained prior")
        synthetic = synthetic_sets(cfg, prior, site, R, rep)
    final, hist = finetune_hybrid(single, local, synthetic, cfg.recon["finetune_epochs"], hyper, ft_seed,
                                  n_sites=cfg.n_sites)
    history["finetune"] = hist
    return single, final, history


EVAL_HEADER = ("site", "target_site", "R", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "n", "inf_count")


def evaluate_grid(cfg: RunConfig, models, test_by_site, Rs=None):
    """Every model on every site's test set at every acceleration.

    Returns ``(rows, max_dc_error)``; rows follow :data:`EVAL_HEADER`.
    """
    Rs = cfg.eval["R"] if Rs is None else Rs
    rows, worst = [], 0.0
    for R in Rs:
        tests = {t: site_triples(cfg, t, test_by_site[t], R, "test") for t in sorted(test_by_site)}
        for k in sorted(models):
            for t, data in tests.items():
                m, rec = evaluate(models[k], data, return_recon=True)
                worst = max(worst, float(dc_errors(rec, data).max()))
                rows.append((k, t, float(R), m["psnr_mean"], m["psnr_std"], m["ssim_mean"], m["ssim_std"],
                             m["n"], m["inf_count"]))
    return rows, worst


def within_across(rows, R):
    """(mean within-site PSNR, mean across-site PSNR) at acceleration R, averaged over sites."""
    within = [r[3] for r in rows if r[2] == R and r[0] == r[1]]
    across = [r[3] for r in rows if r[2] == R and r[0] != r[1]]
    return float(np.mean(within)), float(np.mean(across))
