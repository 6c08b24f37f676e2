"""Command line: gen-data, train-prior, synth, train-recon, evaluate.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numeric/training failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import default_config_text, load_config
from .exceptions import ConfigError, FormatError, ShapeError, TrainingError
from .federation import round_rows
from .persistence import (
    file_checksum,
    load_checkpoint,
    load_paramset,
    paramset_checksum,
    save_checkpoint,
    save_paramset,
    write_csv,
    write_json,
)
from .pipeline import (
    EVAL_HEADER,
    evaluate_grid,
    load_split,
    site_pool,
    train_codec,
    train_prior,
    train_site,
    write_dataset,
)
from .codec import CodecConfig
from .recon import ArchSpec, ReconModel, check_recon_set, synth_site_dataset
from .transformer import PriorConfig, PriorModel

log = logging.getLogger("fedprior")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_TRAIN = 0, 2, 3, 4


def _manifest(out, cfg, command, extra=None):
    out = Path(out)
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[str(p.relative_to(out))] = file_checksum(p)
    doc = {"command": command, "version": __version__, "files": files}
    if cfg is not None:
        doc.update({"config_hash": cfg.hash(), "seeds": cfg.seeds(), "config": cfg.to_dict()})
    doc.update(extra or {})
    write_json(out / "manifest.json", doc)


def _prior_header(prior: PriorModel):
    c, cc = prior.cfg, prior.codec_cfg
    return {"kind": "prior",
            "prior": {"n_sites": c.n_sites, "scales": list(c.scales), "vocab_size": c.vocab_size,
                      "d_model": c.d_model, "n_layers": c.n_layers, "n_heads": c.n_heads,
                      "ffn_mult": c.ffn_mult, "lam": c.lam, "top_q": prior.top_q, "start_noise": prior.start_noise},
            "codec": {"image_size": cc.image_size, "scales": list(cc.scales), "channels": cc.channels,
                      "vocab_size": cc.vocab_size, "width": cc.width}}


def save_prior(prior: PriorModel, path):
    params = {f"prior/{k}": v for k, v in prior.params.items()}
    params.update({f"codec/{k}": v for k, v in prior.codec_params.items()})
    save_checkpoint(_prior_header(prior), params, path)


def load_prior(path) -> PriorModel:
    header, params = load_checkpoint(path)
    if header.get("kind") != "prior":
        raise FormatError(f"{path} is not a prior checkpoint")
    p = dict(header["prior"])
    top_q, noise = p.pop("top_q"), p.pop("start_noise")
    cfg = PriorConfig(**p)
    ccfg = CodecConfig(**header["codec"])
    prior = {k[6:]: v for k, v in params.items() if k.startswith("prior/")}
    codec = {k[6:]: v for k, v in params.items() if k.startswith("codec/")}
    return PriorModel(prior, cfg, codec, ccfg, top_q, noise)


def load_recon(path) -> ReconModel:
    header, params = load_checkpoint(path)
    if header.get("kind") != "recon":
        raise FormatError(f"{path} is not a reconstruction checkpoint")
    return ReconModel(ArchSpec(**header["arch"]), params, int(header["site"]))


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args):
    cfg = load_config(args.config)
    out = Path(args.out)
    files = write_dataset(cfg, out)
    _manifest(out, cfg, "gen-data", {"n_files": len(files)})
    log.info("wrote %d images under %s", len(files), out)


def cmd_train_prior(args):
    cfg = load_config(args.config)
    if args.rounds is not None and args.rounds < 1:
        raise ConfigError(f"--rounds must be >= 1, got {args.rounds}")
    out = Path(args.out)
    if args.pretrain_codec:
        codec_params, hist = train_codec(cfg)
        save_paramset(codec_params, out / "codec.fps")
        write_csv(out / "codec_loss.csv", ("step", "loss"), list(enumerate(hist)))
    elif args.codec:
        codec_params = _load_codec(args.codec)
    else:
        raise ConfigError("train-prior needs --pretrain-codec or --codec PATH")
    images = [load_split(args.data, k, "train") for k in range(cfg.n_sites)]
    prior, logs, _ = train_prior(cfg, codec_params, images, rounds=args.rounds, threads=args.threads)
    save_prior(prior, out / "prior.ckpt")
    write_csv(out / "rounds.csv", ("round", "site", "epoch", "loss"), round_rows(logs))
    summary = {
        "rounds": len(logs),
        "initial_mean_loss": float(np.mean(logs[0].site_losses)),
        "final_mean_loss": float(np.mean(logs[-1].site_losses)),
        "checksums": [e.checksum for e in logs],
        "prior_checksum": paramset_checksum(prior.params),
    }
    write_json(out / "summary.json", summary)
    _manifest(out, cfg, "train-prior", {"summary": summary})


def _load_codec(path):
    path = Path(path)
    if path.suffix == ".ckpt":
        return load_prior(path).codec_params
    return load_paramset(path)


def cmd_synth(args):
    prior = load_prior(args.prior)
    if not 0 <= args.site < prior.cfg.n_sites or not 0 <= args.ops_from < prior.cfg.n_sites:
        raise ConfigError(f"site indices must lie in [0, {prior.cfg.n_sites})")
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    pool = site_pool(cfg, args.ops_from, args.R)
    data = synth_site_dataset(prior, args.site, pool, args.n, seed=seed)
    check_recon_set(data)
    out = Path(args.out)
    lines = []
    for i in range(len(data)):
        path = out / f"triple_{i:04d}.fps"
        save_paramset({"x_ref": data.x_ref[i], "y": data.y[i], "x_us": data.x_us[i], "mask": data.masks[i],
                       "coils": data.coils[i]}, path)
        lines.append(json.dumps({"seed": seed, "index": i, "site": args.site, "ops_from": args.ops_from,
                                 "R": args.R, "path": path.name}, sort_keys=True))
    (out / "generation.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _manifest(out, cfg, "synth", {"seed": seed, "site": args.site, "ops_from": args.ops_from, "n": args.n})


def cmd_train_recon(args):
    cfg = load_config(args.config)
    k = args.site
    if not 0 <= k < cfg.n_sites:
        raise ConfigError(f"--site must lie in [0, {cfg.n_sites})")
    prior = None if args.skip_finetune else load_prior(args.prior) if args.prior else None
    if prior is None and not args.skip_finetune:
        raise ConfigError("train-recon needs --prior unless --skip-finetune is given")
    images = load_split(args.data, k, "train")
    _, model, hist = train_site(cfg, k, images, prior, skip_finetune=args.skip_finetune)
    out = Path(args.out)
    stage = "single-site" if args.skip_finetune else "hybrid"
    save_checkpoint({"kind": "recon", "site": k, "arch": model.spec.to_dict(), "stage": stage},
                    model.params, out / f"recon_site{k}.ckpt")
    rows = [("pretrain", i, v) for i, v in enumerate(hist["pretrain"])]
    rows += [("finetune", i, v) for i, v in enumerate(hist["finetune"])]
    write_csv(out / f"recon_site{k}_loss.csv", ("stage", "epoch", "loss"), rows)
    _manifest(out, cfg, "train-recon", {"site": k, "stage": stage})


def cmd_evaluate(args):
    cfg = load_config(args.config)
    models = {}
    for d in args.models:
        for p in sorted(Path(d).glob("recon_site*.ckpt")):
            m = load_recon(p)
            if m.site in models:
                raise ConfigError(f"two models for site {m.site}")
            models[m.site] = m
    if not models:
        raise FileNotFoundError(f"no recon_site*.ckpt files in {args.models}")
    tests = {t: load_split(args.data, t, "test") for t in range(cfg.n_sites)}
    rows, worst = evaluate_grid(cfg, models, tests)
    out = Path(args.out)
    write_csv(out / "metrics.csv", EVAL_HEADER, rows)
    report = {"config_hash": cfg.hash(), "seeds": cfg.seeds(), "rows": len(rows), "max_dc_error": worst,
              "models": {str(k): m.spec.label for k, m in sorted(models.items())}}
    write_json(out / "report.json", report)
    _manifest(out, cfg, "evaluate", {"report": report})


# -- entry -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="fedprior", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=None, help="cap on parallel worker tasks")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write per-site phantom datasets")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-prior", help="(pre-train the codec and) federate the prior")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--pretrain-codec", action="store_true")
    t.add_argument("--codec", help="codec ParamSet (.fps) or prior checkpoint to take the codec from")
    t.add_argument("--rounds", type=int)
    t.set_defaults(func=cmd_train_prior)

    s = sub.add_parser("synth", help="generate synthetic triples for one site")
    s.add_argument("--config")
    s.add_argument("--prior", required=True)
    s.add_argument("--site", type=int, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--ops-from", type=int, required=True)
    s.add_argument("--R", type=float, default=4.0)
    s.add_argument("--seed", type=int, help="defaults to the config's master seed")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("train-recon", help="train one site's reconstruction model")
    r.add_argument("--config")
    r.add_argument("--site", type=int, required=True)
    r.add_argument("--prior")
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--skip-finetune", action="store_true")
    r.set_defaults(func=cmd_train_recon)

    e = sub.add_parser("evaluate", help="within/across-site metric matrix")
    e.add_argument("--config")
    e.add_argument("--models", nargs="+", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("show-config", help="print the default configuration")
    c.set_defaults(func=lambda a: sys.stdout.write(default_config_text()))
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.func(args)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, FloatingPointError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
