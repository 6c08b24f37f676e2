import math

import numpy as np
import pytest
from scipy import stats

from fedprior.codec import CodecConfig, MultiScaleVQCodec, init_codec
from fedprior.datasets import default_sites, gen_site_phantoms
from fedprior.exceptions import ConfigError
from fedprior.federation import TrainHyper, local_train
from fedprior.numerics.gradcheck import check_gradients
from fedprior.transformer import (
    PriorConfig,
    SitePromptedPrior,
    adaln,
    build_input,
    forward,
    generate,
    init_prior,
    loss_prior,
    mhsa,
    n_candidates,
    sample_greedy,
    sample_nucleus,
    sample_rngs,
    scale_ids,
    scale_mask,
    scale_offsets,
)

CFG = PriorConfig()
MICRO = PriorConfig(n_sites=2, scales=(1, 2), vocab_size=8, d_model=8, n_layers=1, n_heads=2, ffn_mult=2)


def randomized(P, seed=0, scale=0.3):
    """Copy of ``P`` with the zero-initialized heads replaced by random values (a generic trained model)."""
    rng = np.random.default_rng(seed)
    return {k: v + scale * rng.normal(size=v.shape) for k, v in P.items()}


def rand_tokens(rng, cfg, B):
    return rng.integers(0, cfg.vocab_size, size=(B, cfg.n_tokens))


def test_sequence_layout():
    assert CFG.seq_len == 86
    assert scale_offsets(CFG) == [0, 1, 5, 21]
    ids = scale_ids(CFG)
    assert ids[0] == 0 and list(np.bincount(ids)) == [1, 1, 4, 16, 64]


def test_mask_permissions():
    m = scale_mask(CFG)
    ids = scale_ids(CFG)
    assert np.all(m[:, 0] == 0)  # site token visible to all
    allowed = m == 0
    assert np.array_equal(allowed, ids[None, :] <= ids[:, None])
    assert np.all(np.isneginf(m[~allowed]))


def test_config_validation():
    with pytest.raises(ConfigError):
        PriorConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        PriorConfig(n_layers=0)


def test_build_input_shifted_teacher_forcing():
    P = init_prior(CFG, 0)
    rng = np.random.default_rng(0)
    f = rand_tokens(rng, CFG, 1)
    g = f.copy()
    g[:, 21:] = rng.integers(0, 128, size=64)  # change only the finest scale
    a, b = build_input(f, [1], P, CFG).data, build_input(g, [1], P, CFG).data
    assert a.shape == (1, 86, 64)
    assert np.array_equal(a, b)


def test_build_input_site_changes_only_first_row():
    P = init_prior(CFG, 0)
    f = rand_tokens(np.random.default_rng(1), CFG, 1)
    a, b = build_input(f, [0], P, CFG).data, build_input(f, [2], P, CFG).data
    assert not np.array_equal(a[0, 0], b[0, 0])
    assert np.array_equal(a[0, 1:], b[0, 1:])


def test_build_input_upsamples_previous_scale():
    P = init_prior(CFG, 0)
    f = np.zeros((1, 85), dtype=int)
    f[0, 0] = 7  # scale-1 token
    h = build_input(f, [0], P, CFG).data[0]
    base = P["pos.embed"] + P["scale.embed"][scale_ids(CFG)]
    np.testing.assert_allclose(h[2:6] - base[2:6], np.tile(P["tok.embed"][7], (4, 1)), atol=1e-12)
    np.testing.assert_allclose(h[1] - base[1], P["tok.start"], atol=1e-12)


def test_adaln_examples():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(2, 5, 8))
    plain = adaln(h, np.ones((1, 1, 8)), np.zeros((1, 1, 8))).data
    np.testing.assert_allclose(plain.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(plain.var(axis=-1), 1.0 / (1.0 + 1e-5 / h.var(axis=-1)), atol=1e-10)
    beta = rng.normal(size=(1, 1, 8))
    const = adaln(np.full((1, 3, 8), 2.5), rng.normal(size=(1, 1, 8)), beta).data
    np.testing.assert_array_equal(const, np.broadcast_to(beta, (1, 3, 8)))


def test_mhsa_single_token_is_value_projection():
    P = randomized(init_prior(CFG, 0))
    h = np.random.default_rng(2).normal(size=(1, 1, 64))
    out = mhsa(h, np.zeros((1, 1)), P, "blocks.00.attn", 4).data
    w, b = P["blocks.00.attn.qkv.w"], P["blocks.00.attn.qkv.b"]
    v = h[0] @ w[:, 128:] + b[128:]
    np.testing.assert_allclose(out[0], v @ P["blocks.00.attn.out.w"] + P["blocks.00.attn.out.b"], atol=1e-12)


def test_mhsa_rows_sum_to_one_and_scores_bounded():
    P = randomized(init_prior(CFG, 0))
    h = np.random.default_rng(3).normal(size=(2, 86, 64))
    mask = scale_mask(CFG)
    _, probs = mhsa(h, mask, P, "blocks.01.attn", 4, return_probs=True)
    p = probs.data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p[..., mask != 0] == 0)
    # largest possible ratio between two permitted probabilities is exp(2/sqrt(dh))
    row = p[0, 0, -1]
    assert row.max() / row.min() <= math.exp(2 / math.sqrt(16)) + 1e-9


def test_forward_shape_and_causality_spot_check():
    P = randomized(init_prior(CFG, 1))
    rng = np.random.default_rng(4)
    f = rand_tokens(rng, CFG, 2)
    base = forward(f, [0, 1], P, CFG).data
    assert base.shape == (2, 85, 128)
    offs = scale_offsets(CFG) + [85]
    for s in range(4):
        g = f.copy()
        g[:, offs[s] :] = rand_tokens(rng, CFG, 2)[:, offs[s] :]
        out = forward(g, [0, 1], P, CFG).data
        assert np.array_equal(out[:, : offs[s + 1]], base[:, : offs[s + 1]])
        if s < 3:
            assert not np.array_equal(out[:, offs[s + 1] :], base[:, offs[s + 1] :])


def test_site_changes_logits():
    P = randomized(init_prior(CFG, 1))
    f = rand_tokens(np.random.default_rng(5), CFG, 1)
    assert not np.allclose(forward(f, [0], P, CFG).data, forward(f, [2], P, CFG).data)


def test_untrained_loss_is_log_vocab():
    P = init_prior(CFG, 0)
    f = rand_tokens(np.random.default_rng(6), CFG, 4)
    _, ce = loss_prior(f, [0, 1, 2, 0], P, CFG)
    assert ce == pytest.approx(math.log(128), abs=1e-12)


def test_lambda_zero_is_pure_token_ce():
    P = randomized(init_prior(CFG, 0))
    f = rand_tokens(np.random.default_rng(7), CFG, 3)
    loss0, ce = loss_prior(f, [0, 1, 2], P, CFG, lam=0.0)
    assert loss0.item() == ce
    loss, ce2 = loss_prior(f, [0, 1, 2], P, CFG)
    assert ce2 == ce and loss.item() > ce


def test_loss_gradient_micro_model():
    P = randomized(init_prior(MICRO, 0), scale=0.5)
    rng = np.random.default_rng(8)
    f = rand_tokens(rng, MICRO, 3)
    sites = np.array([0, 1, 1])
    err = check_gradients(lambda **p: loss_prior(f, sites, p, MICRO, lam=0.3)[0], P, seed=1)
    assert err < 1e-6


def test_memorizes_two_images():
    f = rand_tokens(np.random.default_rng(9), CFG, 2)
    P0 = init_prior(CFG, 0)
    hyper = TrainHyper(lr=3e-3, batch_size=2)
    P, losses = local_train(np.array([0, 1]), P0, f, 200, hyper, CFG, seed=0)
    assert len(losses) == 200
    assert losses[-1] < 0.5 * losses[0]


def test_n_candidates():
    assert n_candidates(4096, 0.05) == 205
    assert n_candidates(128, 0.05) == 7
    assert n_candidates(100, 0.05) == 5
    assert n_candidates(10, 1.0) == 10
    with pytest.raises(ConfigError):
        n_candidates(10, 0.0)


def test_nucleus_dominant_logit():
    rng = np.random.default_rng(0)
    logits = np.zeros((10000, 64))
    logits[:, 17] = 1e6
    draws = sample_nucleus(logits, q=0.25, rng=rng)
    assert np.mean(draws == 17) > 0.999


def test_nucleus_uniform_chi_square():
    rng = np.random.default_rng(1)
    V = 16
    draws = sample_nucleus(np.zeros((16000, V)), q=1.0, rng=rng)
    counts = np.bincount(draws, minlength=V)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_nucleus_restricts_to_top_candidates():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(200, 40))
    draws = sample_nucleus(logits, q=0.1, rng=rng)
    top = np.argsort(-logits, axis=1)[:, :4]
    assert all(d in t for d, t in zip(draws, top))
    assert isinstance(sample_nucleus(logits[0], q=0.1, rng=rng), int)


def test_nucleus_deterministic_given_rng():
    logits = np.random.default_rng(3).normal(size=(50, 20))
    a = sample_nucleus(logits, 0.5, np.random.default_rng(9))
    b = sample_nucleus(logits, 0.5, np.random.default_rng(9))
    assert np.array_equal(a, b)
    assert np.array_equal(sample_greedy(logits), logits.argmax(axis=1))


@pytest.fixture(scope="module")
def small_codec():
    cfg = CodecConfig()
    return init_codec(cfg, 0), cfg


def test_generate_deterministic_and_batch_independent(small_codec):
    cp, cc = small_codec
    P = randomized(init_prior(CFG, 0), scale=0.1)
    pyr, img = generate(1, P, CFG, cp, cc, seed=5, n=3, q=0.2, batch_size=3)
    pyr2, img2 = generate(1, P, CFG, cp, cc, seed=5, n=3, q=0.2, batch_size=1)
    assert pyr.flat().shape == (3, 85)
    assert np.array_equal(pyr.flat(), pyr2.flat()) and np.array_equal(img, img2)
    assert img.shape == (3, 32, 32) and np.abs(img).max() <= 1.0 + 1e-12
    _, other = generate(1, P, CFG, cp, cc, seed=6, n=3, q=0.2)
    assert not np.array_equal(img, other)


def test_generate_greedy_ignores_rng(small_codec):
    cp, cc = small_codec
    P = randomized(init_prior(CFG, 0), scale=0.1)
    a, _ = generate(0, P, CFG, cp, cc, seed=1, n=2, greedy=True)
    b, _ = generate(0, P, CFG, cp, cc, seed=2, n=2, greedy=True)
    assert np.array_equal(a.flat(), b.flat())


def test_generate_bad_site(small_codec):
    cp, cc = small_codec
    with pytest.raises(IndexError):
        generate(3, init_prior(CFG, 0), CFG, cp, cc)


def test_sample_rngs_independent_streams():
    a = [r.random() for r in sample_rngs(0, 3)]
    b = [r.random() for r in sample_rngs(0, 5)][:3]
    assert a == b and len(set(a)) == 3


def test_estimator_fit_and_sample():
    X = np.concatenate([gen_site_phantoms(s, 4) for s in default_sites()])
    y = np.repeat([0, 1, 2], 4)
    codec = MultiScaleVQCodec(steps=3, batch_size=4).fit(X)
    prior = SitePromptedPrior(codec=codec, d_model=16, n_layers=1, epochs=2, batch_size=4)
    assert prior.get_params()["lam"] == 0.0015
    prior.fit(X, y)
    assert len(prior.loss_history_) == 2
    out = prior.sample(2, n=2)
    assert out.shape == (2, 32, 32)
