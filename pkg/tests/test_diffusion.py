import math

import numpy as np
import pytest

from lora_erasure import autodiff as ad
from lora_erasure.attention import LoraAdapter
from lora_erasure.diffusion import (
    NEUTRAL,
    ConceptWorld,
    Denoiser,
    NoiseSchedule,
    ddim_sample,
    ddim_sample_batch,
    ddim_timesteps,
    denoise_loss,
    denoiser_from_bytes,
    denoiser_to_bytes,
    forward_noise,
    initial_noise,
    make_world,
)
from lora_erasure.errors import ContractError, DimensionError


# ------------------------------------------------------------- schedule


def test_cosine_schedule_endpoints_and_monotone():
    s = NoiseSchedule.cosine(100)
    assert s.T == 100
    assert s.alpha_bar[0] == 1.0
    assert s.alpha_bar[-1] < 1e-3
    assert np.all(np.diff(s.alpha_bar) < 0)


def test_schedule_rejects_non_monotone():
    with pytest.raises(ContractError):
        NoiseSchedule(np.array([1.0, 0.5, 0.6]))


# --------------------------------------------------------- forward noise


def test_forward_noise_endpoints():
    sched = NoiseSchedule(np.array([1.0, 0.25, 0.0]))
    x0, eps = np.array([2.0, 0.0]), np.array([0.0, 2.0])
    np.testing.assert_array_equal(forward_noise(x0, 0, eps, sched), x0)
    np.testing.assert_array_equal(forward_noise(x0, 2, eps, sched), eps)
    np.testing.assert_allclose(forward_noise(x0, 1, eps, sched), [1.0, math.sqrt(3)], rtol=1e-15)


def test_forward_noise_out_of_range():
    sched = NoiseSchedule.cosine(10)
    with pytest.raises(ContractError):
        forward_noise(np.zeros(2), 11, np.zeros(2), sched)
    with pytest.raises(ContractError):
        forward_noise(np.zeros(2), -1, np.zeros(2), sched)


# ------------------------------------------------------------- world


def test_world_layout():
    w = make_world()
    np.testing.assert_allclose(np.linalg.norm(w.centers, axis=1), 4.0)
    assert w.clusters == (0, 0, 0, 0, 1, 1, 1, 1)
    assert w.neutral_sigma == 0.5


def test_world_rejects_coincident_modes():
    with pytest.raises(ContractError):
        ConceptWorld(np.array([[1.0, 0.0], [1.0, 0.0]]), np.ones(2), np.zeros(2), 0.5)
    with pytest.raises(ContractError):
        ConceptWorld(np.array([[0.0, 0.0]]), np.ones(1), np.zeros(2), 0.5)


def test_world_sampling_modes():
    w = make_world()
    rng = np.random.default_rng(0)
    pts = w.sample(2, 2000, rng)
    np.testing.assert_allclose(pts.mean(axis=1), w.centers[2], atol=0.05)
    assert np.linalg.norm(w.sample(NEUTRAL, 2000, rng).mean(axis=1)) < 0.05
    conj = w.sample((0, NEUTRAL), 2000, rng)
    near_origin = np.linalg.norm(conj, axis=0) < 2.0
    assert 0.4 < near_origin.mean() < 0.6


# ------------------------------------------------------------ denoiser


def test_token_ids(small_denoiser):
    d = small_denoiser
    assert d.token_ids(None) == [d.start_token, d.null_token]
    assert d.token_ids(NEUTRAL) == [d.start_token, d.neutral_token]
    assert d.token_ids((1, NEUTRAL, 3)) == [d.start_token, 1, d.neutral_token, 3]
    with pytest.raises(ContractError):
        d.token_ids(9)
    with pytest.raises(ContractError):
        d.token_ids(())


def test_predict_shape_and_errors(small_denoiser):
    out = small_denoiser.predict(1, np.zeros((2, 5)), 3)
    assert out.shape == (2, 5)
    with pytest.raises(DimensionError):
        small_denoiser.predict(1, np.zeros((3, 5)), 3)


def test_zero_adapter_prediction_is_base(small_denoiser):
    d = small_denoiser
    zero = LoraAdapter.init(0, d.attention(), np.random.default_rng(0), rank=4, adapted="qkvo")
    x = np.random.default_rng(1).standard_normal((2, 4))
    np.testing.assert_array_equal(d.predict(0, x, 5, zero), d.predict(0, x, 5))


def test_guidance_identities(small_denoiser):
    d = small_denoiser
    x = np.random.default_rng(2).standard_normal((2, 3))
    np.testing.assert_array_equal(d.guided(2, x, 4, 1.0), d.predict(2, x, 4))
    np.testing.assert_array_equal(d.guided(2, x, 4, 0.0), d.predict(None, x, 4))
    e_c, e_u = d.predict(2, x, 4), d.predict(None, x, 4)
    np.testing.assert_allclose(d.guided(2, x, 4, 3.0), e_u + 3.0 * (e_c - e_u), atol=1e-15)


# ----------------------------------------------------------- denoise loss


class _Exact:
    """Stands in for a denoiser that predicts the true noise."""

    T = 10

    def __init__(self, eps):
        self.eps = eps

    def predict(self, cond, x_t, t, adapters=None, params=None):
        return self.eps


def test_denoise_loss_perfect_and_zero_predictors(small_denoiser):
    rng = np.random.default_rng(3)
    eps = rng.standard_normal((2, 4))
    batch = [(rng.standard_normal(2), 1, 3, eps[:, i]) for i in range(4)]
    assert float(denoise_loss(_Exact(eps), batch)[0, 0]) == 0.0
    zero = _Exact(np.zeros((2, 4)))
    assert float(denoise_loss(zero, batch)[0, 0]) == pytest.approx(np.mean(eps**2), rel=1e-14)
    with pytest.raises(ContractError):
        denoise_loss(small_denoiser, [])


def test_denoise_loss_gradient_matches_finite_differences(small_denoiser):
    d = small_denoiser
    rng = np.random.default_rng(4)
    batch = [(rng.standard_normal(2), c, int(rng.integers(1, 21)), rng.standard_normal(2)) for c in (0, 2)]
    names = ["w_3", "w_o"]
    tape = ad.Tape()
    leaves = {k: (tape.watch(v) if k in names else v) for k, v in d.params.items()}
    grads = ad.gradient(denoise_loss(d, batch, params=leaves), [leaves[k] for k in names])
    for name, g in zip(names, grads):
        w0 = d.params[name]
        for idx in list(np.ndindex(w0.shape))[:20]:
            def f(delta):
                p = dict(d.params)
                w = w0.copy()
                w[idx] += delta
                p[name] = w
                return float(denoise_loss(d, batch, params=p)[0, 0])

            fd = (f(1e-5) - f(-1e-5)) / 2e-5
            assert abs(g[idx] - fd) <= 1e-4 * max(abs(g[idx]), abs(fd), 1e-8) + 1e-10


# ----------------------------------------------------------------- DDIM


def test_ddim_timesteps():
    ts = ddim_timesteps(100, 50)
    assert ts[0] == 100 and ts[-1] == 0 and len(ts) == 51
    assert np.all(np.diff(ts) < 0)
    with pytest.raises(ContractError):
        ddim_timesteps(100, 0)


def test_ddim_deterministic_and_zero_guidance(small_denoiser):
    d = small_denoiser
    a = ddim_sample(d, 1, steps=10, guidance_w=3.0, seed=7)
    np.testing.assert_array_equal(a, ddim_sample(d, 1, steps=10, guidance_w=3.0, seed=7))
    np.testing.assert_array_equal(
        ddim_sample(d, 1, steps=10, guidance_w=0.0, seed=7), ddim_sample(d, None, steps=10, guidance_w=1.0, seed=7)
    )


def test_batch_sampling_matches_single(small_denoiser):
    d = small_denoiser
    batch = ddim_sample_batch(d, 2, initial_noise([3, 4]), steps=8)
    np.testing.assert_allclose(batch[:, 1], ddim_sample(d, 2, steps=8, seed=4), atol=1e-12)


def test_base_quality_gate(world, base):
    """Samples for each concept sit within 3 sigma of the prompted mode."""
    for c in range(world.n_concepts):
        x = ddim_sample_batch(base, c, initial_noise(range(200)))
        hit = np.linalg.norm(x - world.centers[c][:, None], axis=0) <= 3 * world.sigmas[c]
        assert hit.mean() >= 0.9, c


def test_denoiser_round_trip(small_denoiser):
    back = denoiser_from_bytes(denoiser_to_bytes(small_denoiser))
    assert back.frozen and back.T == 20 and back.n_concepts == 4
    for k, v in small_denoiser.params.items():
        np.testing.assert_array_equal(back.params[k], v)


def test_cluster_mix_shares_an_embedding_component():
    w = make_world()
    plain = Denoiser.create(8, np.random.default_rng(0))
    mixed = Denoiser.create(8, np.random.default_rng(0), clusters=w.clusters, cluster_mix=0.5)
    for k in plain.params:
        if k != "embed":
            np.testing.assert_array_equal(plain.params[k], mixed.params[k])
    e = mixed.params["embed"]
    cos = lambda a, b: a @ b / np.linalg.norm(a) / np.linalg.norm(b)
    same = np.mean([cos(e[:, i], e[:, j]) for i in range(4) for j in range(i + 1, 4)])
    diff = np.mean([cos(e[:, i], e[:, j]) for i in range(4) for j in range(4, 8)])
    assert same > diff + 0.2
    np.testing.assert_array_equal(e[:, 8:], plain.params["embed"][:, 8:])
    with pytest.raises(ContractError):
        Denoiser.create(8, np.random.default_rng(0), cluster_mix=0.5)
    with pytest.raises(ContractError):
        Denoiser.create(8, np.random.default_rng(0), clusters=w.clusters, cluster_mix=1.0)
