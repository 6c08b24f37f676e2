"""Run configuration: a TOML file with sections [sites], [codec], [prior],
[federation], [recon] (plus optional [recon.site_k]) and [eval].

Keys missing from a section take the packaged defaults; unknown keys and
missing sections are errors.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .codec import CodecConfig, CodecTrainConfig
from .exceptions import ConfigError
from .federation import FederationConfig, TrainHyper
from .recon import ArchSpec, ReconHyper
from .transformer import PriorConfig

SECTIONS = ("sites", "codec", "prior", "federation", "recon", "eval")
SEED_ENV = "FEDPRIOR_SEED"
DEFAULT_ARCHS = ("cascade-3", "conv-autoencoder", "unrolled-5")


def default_dict():
    text = resources.files("fedprior").joinpath("default_config.toml").read_text(encoding="utf-8")
    return tomllib.loads(text)


def _check_type(where, key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"[{where}] {key}: expected {type(default).__name__}, got {type(value).__name__}")
    return float(value) if isinstance(default, float) else value


def _merge_section(name, given, default):
    out = {k: v for k, v in default.items() if not isinstance(v, dict)}
    for k, v in given.items():
        if name == "recon" and isinstance(v, dict):
            continue  # per-site tables are handled by the caller
        if k not in out:
            raise ConfigError(f"[{name}] unknown key {k!r}")
        out[k] = _check_type(name, k, v, out[k])
    return out


@dataclass
class RunConfig:
    seed: int
    sites: dict
    codec: dict
    prior: dict
    federation: dict
    recon: dict
    recon_sites: dict  # site -> {"arch": str}
    eval: dict

    # -- typed views ---------------------------------------------------------
    @property
    def n_sites(self):
        return self.sites["n_sites"]

    def codec_config(self):
        c = self.codec
        return CodecConfig(self.sites["image_size"], tuple(c["scales"]), c["channels"], c["vocab_size"], c["width"])

    def codec_train_config(self):
        c = self.codec
        return CodecTrainConfig(steps=c["steps"], batch_size=c["batch_size"], lr=c["lr"], ema_decay=c["ema_decay"],
                                seed=self.seeds()["codec"])

    def prior_config(self):
        p = self.prior
        return PriorConfig.for_codec(self.codec_config(), n_sites=self.n_sites, d_model=p["d_model"],
                                     n_layers=p["n_layers"], n_heads=p["n_heads"], ffn_mult=p["ffn_mult"],
                                     lam=p["lam"])

    def federation_config(self, rounds=None, threads=None):
        f = self.federation
        hyper = TrainHyper(lr=f["lr"], batch_size=f["batch_size"], weight_decay=f["weight_decay"])
        parallel = f["parallel"] if threads is None else threads > 1
        return FederationConfig(n_sites=self.n_sites, rounds=f["rounds"] if rounds is None else rounds,
                                local_epochs=f["local_epochs"], hyper=hyper, seed=self.seeds()["prior"],
                                parallel=parallel, max_workers=threads)

    def arch(self, site):
        r = self.recon
        text = self.recon_sites.get(site, {}).get("arch", DEFAULT_ARCHS[site % len(DEFAULT_ARCHS)])
        return ArchSpec.parse(text, width=r["width"], depth=r["depth"], mu_init=r["mu_init"])

    def recon_hyper(self):
        return ReconHyper(lr=self.recon["lr"], batch_size=self.recon["batch_size"])

    def seeds(self):
        """Every seed used downstream, derived from the master seed."""
        s = self.seed
        return {"master": s, "data": s, "aux": 12345 + s, "codec": s, "prior": s, "recon": s, "ops": s}

    def to_dict(self):
        d = {"seed": self.seed}
        for name in SECTIONS:
            d[name] = copy.deepcopy(getattr(self, name))
        for k, v in sorted(self.recon_sites.items()):
            d["recon"][f"site_{k}"] = dict(v)
        return d

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def validate(self):
        s = self.sites
        for key in ("n_sites", "image_size", "n_train", "n_val", "n_test", "ncoils", "coil_sets"):
            if s[key] < (0 if key in ("n_val",) else 1):
                raise ConfigError(f"[sites] {key} must be positive")
        if self.federation["rounds"] < 1 or self.federation["local_epochs"] < 1:
            raise ConfigError("[federation] rounds and local_epochs must be >= 1")
        for k in self.recon_sites:
            if not 0 <= k < self.n_sites:
                raise ConfigError(f"[recon.site_{k}] refers to a site outside 0..{self.n_sites - 1}")
        if not all(isinstance(r, (int, float)) and not isinstance(r, bool) for r in self.eval["R"]):
            raise ConfigError("[eval] R must be a list of numbers")
        self.eval["R"] = [float(r) for r in self.eval["R"]]
        if not self.eval["R"] or any(r < 1 for r in self.eval["R"]):
            raise ConfigError("[eval] R must be a non-empty list of accelerations >= 1")
        if self.recon["R"] < 1:
            raise ConfigError("[recon] R must be >= 1")
        # build typed views once so invalid combinations fail early
        self.codec_config()
        self.prior_config()
        self.federation_config()
        for k in range(self.n_sites):
            self.arch(k)
        return self


def from_dict(raw, env=None):
    env = os.environ if env is None else env
    defaults = default_dict()
    raw = dict(raw)
    unknown = set(raw) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    for name in SECTIONS:
        if name not in raw:
            raise ConfigError(f"missing section [{name}]")
        if not isinstance(raw[name], dict):
            raise ConfigError(f"[{name}] must be a table")
    sections = {name: _merge_section(name, raw[name], defaults[name]) for name in SECTIONS}
    recon_sites = {}
    for k, v in raw["recon"].items():
        if isinstance(v, dict):
            if not k.startswith("site_") or not k[5:].isdigit():
                raise ConfigError(f"[recon] unknown subsection {k!r}")
            extra = set(v) - {"arch"}
            if extra:
                raise ConfigError(f"[recon.{k}] unknown key(s): {', '.join(sorted(extra))}")
            recon_sites[int(k[5:])] = {"arch": str(v.get("arch", DEFAULT_ARCHS[int(k[5:]) % 3]))}
    seed = raw.get("seed", defaults["seed"])
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    return RunConfig(seed=seed, recon_sites=recon_sites, **sections).validate()


def load_config(path=None, env=None):
    """Parse and validate a config file; ``None`` loads the packaged defaults."""
    if path is None:
        return from_dict(default_dict(), env)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8") from exc
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw, env)


def default_config_text():
    return resources.files("fedprior").joinpath("default_config.toml").read_text(encoding="utf-8")
