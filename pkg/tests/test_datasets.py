import numpy as np
import pytest

from fedprior.datasets import (
    SiteSpec,
    aux_phantoms,
    default_sites,
    dist_distance,
    gen_site_phantoms,
    image_features,
    inter_distance,
    intra_bootstrap,
    make_sites,
    make_split,
)
from fedprior.exceptions import ConfigError


@pytest.fixture(scope="module")
def site_images():
    return [gen_site_phantoms(s, 100) for s in default_sites()]


def test_phantoms_deterministic_per_index():
    spec = default_sites()[1]
    a = gen_site_phantoms(spec, 4)
    b = gen_site_phantoms(spec, 2, start=2)
    np.testing.assert_array_equal(a[2:], b)
    np.testing.assert_array_equal(a, gen_site_phantoms(spec, 4))


def test_phantom_magnitudes_in_unit_interval(site_images):
    for imgs in site_images:
        m = np.abs(imgs)
        assert m.min() >= 0.0 and m.max() <= 1.0


@pytest.mark.parametrize("site", [0, 1, 2])
def test_mean_magnitude_near_base_level(site_images, site):
    base = default_sites()[site].base_level
    assert abs(np.abs(site_images[site]).mean() - base) <= 0.05


def test_default_sites_differ_pairwise():
    sites = default_sites()
    assert [s.base_level for s in sites] == [0.3, 0.5, 0.7]
    assert len({s.texture_freq for s in sites}) == 3


def test_site_spec_validation():
    with pytest.raises(ConfigError):
        SiteSpec(0, 1.2, 2.0)
    with pytest.raises(ConfigError):
        SiteSpec(0, 0.5, 2.0, polarity=0)
    with pytest.raises(ConfigError):
        gen_site_phantoms(default_sites()[0], 0)


def test_make_sites_interpolates():
    sites = make_sites(5)
    assert len(sites) == 5
    levels = [s.base_level for s in sites]
    assert levels == sorted(levels) and levels[0] == pytest.approx(0.3) and levels[-1] == pytest.approx(0.7)
    assert make_sites(3) == default_sites()


def test_aux_set_is_separate_and_deterministic():
    a = aux_phantoms(4)
    np.testing.assert_array_equal(a, aux_phantoms(4))
    assert a.shape == (4, 32, 32) and np.abs(a).max() <= 1.0


def test_split_example_sizes():
    s = make_split(10, (0.8, 0.1, 0.1), seed=0)
    assert (len(s.train), len(s.val), len(s.test)) == (8, 1, 1)
    assert sorted(s.train + s.val + s.test) == list(range(10))
    assert make_split(10, seed=0) == s


@pytest.mark.parametrize("n", [1, 7, 176, 1000])
def test_split_disjoint_cover(n):
    s = make_split(n, (0.7, 0.2, 0.1), seed=n)
    assert sorted(s.train + s.val + s.test) == list(range(n))


def test_split_bad_fractions():
    with pytest.raises(ConfigError):
        make_split(10, (0.5, 0.2, 0.2))


def test_features_are_eight_dims(site_images):
    assert image_features(site_images[0][:3]).shape == (3, 8)


def test_distance_self_zero_and_symmetric(site_images):
    a, b = site_images[0][:40], site_images[2][:40]
    assert dist_distance(a, a) == pytest.approx(0.0, abs=1e-8)
    assert dist_distance(a, b) == dist_distance(b, a)
    assert dist_distance(a, b) > 0


def test_distance_degenerate_single_image(site_images):
    d = dist_distance(site_images[0][:1], site_images[1][:1])
    assert np.isfinite(d) and d > 0


def test_inter_exceeds_intra(site_images):
    intra = intra_bootstrap(site_images[0], n_boot=30, seed=1)
    assert inter_distance(site_images[0], site_images[1], n_draws=5) > intra.max()
