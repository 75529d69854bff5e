import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowguide import (GmmPolicy, GuidanceChain, GuidanceError, PointRobot, SamplerConfig, SemanticField,
                       sample_guided, sample_unguided, tweedie_clean_estimate)
from flowguide.flow import (StageTimer, clip_gradient, conditional_velocity_target, euler_step,
                            guided_step, select_initial_noise)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def _gauss_policy(shape=(1, 3)):
    return GmmPolicy.from_components([1.0], np.zeros((1, int(np.prod(shape)))), [1.0], shape)


def test_velocity_target_is_difference():
    a0 = np.array([[1.0, 2.0]])
    a1 = np.array([[4.0, -1.0]])
    assert np.array_equal(conditional_velocity_target(a0, a1), [[3.0, -3.0]])
    with pytest.raises(ValueError):
        conditional_velocity_target(a0, np.zeros((2, 2)))


def test_tweedie_identity_at_one():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(tweedie_clean_estimate(a, 1.0, np.ones_like(a)), a)
    # a_tau + (1 - tau) v recovers a1 on a straight path
    a0, a1, tau = np.zeros((2, 3)), np.ones((2, 3)), 0.25
    a_tau = (1 - tau) * a0 + tau * a1
    assert np.allclose(tweedie_clean_estimate(a_tau, tau, a1 - a0), a1)


@pytest.mark.parametrize("tau", [-0.1, 1.5, float("nan")])
def test_tau_out_of_range(tau):
    with pytest.raises(ValueError):
        tweedie_clean_estimate(np.zeros((1, 1)), tau, np.zeros((1, 1)))


def test_euler_step():
    assert np.array_equal(euler_step(np.ones((1, 2)), np.full((1, 2), 2.0), 0.25), np.full((1, 2), 1.5))


@given(arrays(float, (4, 3), elements=finite), st.floats(1e-3, 1e3))
def test_clip_bounds_entries(g, alpha):
    c = clip_gradient(g, alpha)
    assert np.all(np.abs(c) <= alpha)
    inside = np.abs(g) <= alpha
    assert np.array_equal(c[inside], g[inside])


def test_guided_step_zero_weight_matches_euler():
    rng = np.random.default_rng(0)
    a, v, g = rng.normal(size=(3, 4, 2))
    assert np.array_equal(guided_step(a, v, g, 0.0, 1.0, 0.1), a + 0.1 * v)
    with pytest.raises(GuidanceError):
        guided_step(a, v, np.full_like(g, np.nan), 1.0, 1.0, 0.1, field_id="f")


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(num_steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(guidance_weights={"x": -1.0})
    with pytest.raises(ValueError):
        SamplerConfig(tweedie_jacobian="nope")
    cfg = SamplerConfig(num_steps=4)
    assert cfg.schedule() == [0.0, 0.25, 0.5, 0.75]
    assert cfg.delta == 0.25


def test_unguided_deterministic_under_seed():
    pol = _gauss_policy((2, 2))
    a = sample_unguided(pol, None, SamplerConfig(seed=4), n_samples=3)
    b = sample_unguided(pol, None, SamplerConfig(seed=4), n_samples=3)
    c = sample_unguided(pol, None, SamplerConfig(seed=5), n_samples=3)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_zero_weights_bit_identical(seed, candidates):
    pol = _gauss_policy()
    chain = GuidanceChain([SemanticField(target=[1.0, 0.0, 0.0], sigma=1.0)], PointRobot())
    cfg = SamplerConfig(num_steps=8, seed=seed, guidance_weights={"semantic": 0.0},
                        init_candidates=candidates)
    guided, _ = sample_guided(pol, None, chain, cfg)
    plain = sample_unguided(pol, None, SamplerConfig(num_steps=8, seed=seed))
    assert np.array_equal(guided, plain)


def test_guidance_pulls_toward_target():
    pol = _gauss_policy()
    target = np.array([2.0, 0.0, 0.0])
    chain = GuidanceChain([SemanticField(target=target, sigma=1.0)], PointRobot())
    a, diag = sample_guided(pol, None, chain, SamplerConfig(num_steps=32, seed=1), n_samples=2000)
    plain = sample_unguided(pol, None, SamplerConfig(num_steps=32, seed=1), n_samples=2000)
    assert a[:, 0, 0].mean() > plain[:, 0, 0].mean() + 0.5
    assert len(diag.steps) == 32
    assert all(s.grad_maxabs_post <= 50.0 for s in diag.steps)


def test_clip_limits_recorded_gradient():
    pol = _gauss_policy()
    chain = GuidanceChain([SemanticField(target=[100.0, 0.0, 0.0], sigma=0.1)], PointRobot())
    _, diag = sample_guided(pol, None, chain, SamplerConfig(num_steps=4, clip_alpha=1.0))
    assert all(s.grad_maxabs_post <= 1.0 for s in diag.steps)
    assert any(s.grad_maxabs_pre > 1.0 for s in diag.steps)


def test_initial_noise_selection_picks_lowest_energy():
    pol = _gauss_policy()
    chain = GuidanceChain([SemanticField(target=[3.0, 0.0, 0.0], sigma=1.0)], PointRobot())
    a, energies, best = select_initial_noise(pol, None, chain, 6, 2, seed=3, return_energies=True)
    assert best == int(np.argmin(energies))
    assert a.shape == (1, 3)


def test_non_finite_field_raises():
    class Broken(SemanticField):
        def _evaluate(self, traj, with_grad):
            e, gx, gr = super()._evaluate(traj, with_grad)
            return e, None if gx is None else gx * np.nan, gr

    chain = GuidanceChain([Broken(target=[0.0, 0.0, 0.0], field_id="broken")], PointRobot())
    with pytest.raises(GuidanceError) as err:
        sample_guided(_gauss_policy(), None, chain, SamplerConfig(num_steps=2))
    assert err.value.field_id == "broken"


def test_stage_timer_records_chain():
    timer = StageTimer()
    chain = GuidanceChain([SemanticField(target=[1.0, 0.0, 0.0])], PointRobot())
    sample_guided(_gauss_policy(), None, chain, SamplerConfig(num_steps=3), timer=timer)
    assert timer.get("velocity") > 0 and timer.get("chain_gradient") > 0
