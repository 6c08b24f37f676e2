"""Synthetic multi-site phantom data with controlled inter-site differences."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ConfigError


@dataclass(frozen=True)
class SiteSpec:
    site: int
    base_level: float
    texture_freq: float
    ellipse_range: tuple = (3, 6)
    polarity: int = 1
    texture_amp: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.base_level < 1.0:
            raise ConfigError(f"site {self.site}: base level must lie in (0, 1)")
        lo, hi = self.ellipse_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"site {self.site}: bad ellipse range {self.ellipse_range}")
        if self.polarity not in (-1, 1):
            raise ConfigError(f"site {self.site}: polarity must be +1 or -1")

    def to_dict(self):
        d = asdict(self)
        d["ellipse_range"] = list(self.ellipse_range)
        return d


def default_sites(seed=0):
    """Three deliberately separable sites (base intensity 0.3 / 0.5 / 0.7)."""
    return [
        SiteSpec(0, 0.3, 2.0, (3, 5), 1, seed=seed * 1000 + 11),
        SiteSpec(1, 0.5, 4.0, (5, 8), -1, seed=seed * 1000 + 23),
        SiteSpec(2, 0.7, 6.0, (2, 4), 1, seed=seed * 1000 + 37),
    ]


def make_sites(n, seed=0):
    """``n`` sites; n == 3 gives :func:`default_sites`, otherwise base levels and
    texture frequencies are spread evenly over the same ranges."""
    if n < 1:
        raise ConfigError("need at least one site")
    if n == 3:
        return default_sites(seed)
    ranges = [(3, 5), (5, 8), (2, 4)]
    out = []
    for k in range(n):
        t = k / (n - 1) if n > 1 else 0.5
        out.append(SiteSpec(k, 0.3 + 0.4 * t, 2.0 + 4.0 * t, ranges[k % 3], 1 if k % 2 == 0 else -1,
                            seed=seed * 1000 + 11 + 12 * k))
    return out


def _grid(H, W):
    y = (np.arange(H) + 0.5) / H * 2 - 1
    x = (np.arange(W) + 0.5) / W * 2 - 1
    return np.meshgrid(y, x, indexing="ij")


def _ellipse(yy, xx, cy, cx, ay, ax, theta):
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return ((u / ax) ** 2 + (v / ay) ** 2 <= 1.0).astype(np.float64)


def phantom(spec: SiteSpec, index: int, H=32, W=32):
    """One complex phantom; deterministic in (spec.seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    yy, xx = _grid(H, W)
    head = _ellipse(yy, xx, 0.0, 0.0, rng.uniform(0.75, 0.9), rng.uniform(0.65, 0.85), rng.uniform(-0.3, 0.3))
    pattern = 0.35 * head
    lo, hi = spec.ellipse_range
    for _ in range(int(rng.integers(lo, hi + 1))):
        r = rng.uniform(0, 0.5)
        phi = rng.uniform(0, 2 * np.pi)
        sign = spec.polarity if rng.uniform() < 0.8 else -spec.polarity
        amp = sign * rng.uniform(0.08, 0.25)
        pattern += amp * head * _ellipse(yy, xx, r * math.sin(phi), r * math.cos(phi),
                                         rng.uniform(0.08, 0.35), rng.uniform(0.08, 0.35),
                                         rng.uniform(0, np.pi))
    ang = rng.uniform(0, np.pi)
    tex = spec.texture_amp * np.sin(2 * np.pi * spec.texture_freq * 0.5 * (xx * math.cos(ang) + yy * math.sin(ang))
                                    + rng.uniform(0, 2 * np.pi))
    pattern += tex * head
    # upper bound kept a hair below 1 so |mag * exp(i phase)| never rounds above 1
    mag = np.clip(spec.base_level + pattern - pattern.mean(), 0.0, 1.0 - 1e-12)
    a0, ay, ax = rng.uniform(-0.5, 0.5, size=3)
    phase = a0 + 0.5 * (ay * yy + ax * xx)
    return mag * np.exp(1j * phase)


def gen_site_phantoms(spec: SiteSpec, n, H=32, W=32, start=0):
    if n < 1:
        raise ConfigError("need at least one phantom")
    return np.stack([phantom(spec, start + i, H, W) for i in range(n)])


def aux_phantoms(n, H=32, W=32, seed=12345):
    """Auxiliary set for codec pre-training: site parameters drawn at random per image."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        lo = int(rng.integers(1, 6))
        spec = SiteSpec(
            site=-1,
            base_level=float(rng.uniform(0.2, 0.8)),
            texture_freq=float(rng.uniform(1.0, 7.0)),
            ellipse_range=(lo, lo + int(rng.integers(0, 4))),
            polarity=int(rng.choice([-1, 1])),
            seed=int(rng.integers(2 ** 31)),
        )
        out.append(phantom(spec, i, H, W))
    return np.stack(out)


@dataclass(frozen=True)
class Split:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)


def make_split(n, fractions=(0.8, 0.1, 0.1), seed=0):
    """Seeded disjoint train/val/test partition of range(n) (largest-remainder sizes)."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    raw = [f * n for f in fractions]
    sizes = [int(math.floor(r + 1e-9)) for r in raw]
    order = sorted(range(3), key=lambda i: -(raw[i] - sizes[i]))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    perm = np.random.default_rng(seed).permutation(n).tolist()
    a, b = sizes[0], sizes[0] + sizes[1]
    return Split(sorted(perm[:a]), sorted(perm[a:b]), sorted(perm[b:]))


# -- distribution distance ---------------------------------------------------

def image_features(images):
    """Per-image [mean, std, gradient energy, 5-bin histogram] of the magnitude."""
    mags = np.abs(np.asarray(images))
    if mags.ndim == 2:
        mags = mags[None]
    feats = []
    for m in mags:
        gy = np.diff(m, axis=0)
        gx = np.diff(m, axis=1)
        hist, _ = np.histogram(np.clip(m, 0, 1), bins=5, range=(0.0, 1.0))
        feats.append([m.mean(), m.std(), (gy ** 2).mean() + (gx ** 2).mean(), *(hist / m.size)])
    return np.asarray(feats)


def _psd_sqrt(a):
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _frechet(mu_a, cov_a, mu_b, cov_b):
    ra = _psd_sqrt(cov_a)
    cross = _psd_sqrt(ra @ cov_b @ ra)
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2 * np.trace(cross))


def _gaussian_fit(feats, ridge):
    mu = feats.mean(axis=0)
    if len(feats) > 1:
        cov = np.cov(feats, rowvar=False)
    else:
        cov = np.zeros((feats.shape[1], feats.shape[1]))
    return mu, cov + ridge * np.eye(feats.shape[1])


def dist_distance(images_a, images_b, ridge=1e-8):
    """Frechet distance between Gaussian fits of hand-crafted image features."""
    fa, fb = image_features(images_a), image_features(images_b)
    if len(fa) == 0 or len(fb) == 0:
        raise ConfigError("dist_distance needs two non-empty image sets")
    mu_a, cov_a = _gaussian_fit(fa, ridge)
    mu_b, cov_b = _gaussian_fit(fb, ridge)
    d = 0.5 * (_frechet(mu_a, cov_a, mu_b, cov_b) + _frechet(mu_b, cov_b, mu_a, cov_a))
    return max(d, 0.0)


def intra_bootstrap(images, n_boot=100, seed=0):
    """Distances between random half-splits of one image set."""
    images = np.asarray(images)
    rng = np.random.default_rng(seed)
    half = len(images) // 2
    out = []
    for _ in range(n_boot):
        perm = rng.permutation(len(images))
        out.append(dist_distance(images[perm[:half]], images[perm[half : 2 * half]]))
    return np.asarray(out)


def inter_distance(images_a, images_b, n_draws=20, seed=0):
    """Mean distance between random half-size subsets of two sets."""
    images_a, images_b = np.asarray(images_a), np.asarray(images_b)
    rng = np.random.default_rng(seed)
    half = min(len(images_a), len(images_b)) // 2
    vals = [
        dist_distance(images_a[rng.permutation(len(images_a))[:half]], images_b[rng.permutation(len(images_b))[:half]])
        for _ in range(n_draws)
    ]
    return float(np.mean(vals))
