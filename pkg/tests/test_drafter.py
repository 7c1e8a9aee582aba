from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specserve import drafter as dr

CANDS = (1, 2, 3, 4, 5, 6, 8, 10)


def _post(**kw) -> dr.GpPosterior:
    return dr.GpPosterior(dr.ContextKey.of(32, 0.5), dr.DrafterConfig(**kw))


def _feed(post: dr.GpPosterior, pairs, a: float = 1.0) -> None:
    """Observe per-token costs directly (acceptance 1 makes J = T / s)."""
    for n, (s, cost) in enumerate(pairs, start=1):
        dr.observe(post, s, cost * (s * a + post.config.epsilon), a, n)


def test_objective_example():
    assert dr.objective(8.0, 4, 0.5) == pytest.approx(8 / (2 + 1e-6), rel=1e-12)
    assert dr.objective(8.0, 4, 0.5) == pytest.approx(3.999998, abs=1e-6)


def test_objective_zero_acceptance_is_finite():
    assert dr.objective(8.0, 4, 0.0) == pytest.approx(8e6)


def test_objective_interior_argmin():
    options = {1: 0.95, 3: 0.8, 6: 0.45}
    costs = {s: dr.objective(2 + 0.5 * s, s, a) for s, a in options.items()}
    assert min(costs, key=costs.get) == 3


def test_objective_rejects_bad_inputs():
    with pytest.raises(ValueError):
        dr.objective(0.0, 2, 0.5)
    with pytest.raises(ValueError):
        dr.objective(1.0, 0, 0.5)


def test_config_validation():
    with pytest.raises(ValueError):
        dr.DrafterConfig(candidates=(3, 2))
    with pytest.raises(ValueError):
        dr.DrafterConfig(candidates=())
    with pytest.raises(ValueError):
        dr.DrafterConfig(epsilon=0.0)


def test_beta_positive_and_non_decreasing():
    cfg = dr.DrafterConfig()
    betas = [cfg.beta(n) for n in range(1, 300)]
    assert betas[0] > 0
    assert all(a <= b for a, b in zip(betas, betas[1:]))
    assert cfg.beta(10) == pytest.approx(2 * math.log(8 * 100 * math.pi**2 / 6))


def test_context_bucketing():
    assert dr.ContextKey.of(30, 0.34) == dr.ContextKey(32, 0.3)
    assert dr.ContextKey.of(5, 0.36) == dr.ContextKey(4, 0.4)
    assert dr.ContextKey.of(1, None) == dr.ContextKey(1, 1.0)
    assert dr.ContextKey.of(200, 0.5) == dr.ContextKey.of(200, 0.5)


def test_prior_selects_smallest_length():
    post = _post(cold_start=False)
    assert dr.select_length(post, 1) == 1


def test_cold_start_sweeps_candidates():
    post = _post()
    assert [dr.select_length(post, n) for n in range(1, 9)] == list(CANDS)


def test_exact_observations_find_true_argmin():
    post = _post(noise_var=1e-9, cold_start=False)
    true = {s: 4.0 + 0.3 * (i - 4) ** 2 for i, s in enumerate(CANDS)}
    _feed(post, [(s, true[s]) for s in CANDS])
    assert dr.select_length(post, 10) == min(true, key=true.get)


def test_unobserved_candidate_is_explored():
    post = _post(cold_start=False, beta_scale=50.0)
    _feed(post, [(s, 50.0) for s in CANDS if s != 10])
    assert dr.select_length(post, 20) == 10


def test_single_observation_interpolates():
    post = _post(noise_var=1e-4)
    prior_sigma = post.sigma.copy()
    _feed(post, [(4, 7.0)])
    k = post.config.index_of(4)
    assert post.mu[k] == pytest.approx(7.0, rel=0.01)
    assert post.sigma[k] < prior_sigma[k]


def test_sigma_shrinks_with_repeated_observations():
    post = _post()
    k = post.config.index_of(3)
    last = post.sigma[k]
    for n in range(1, 6):
        dr.observe(post, 3, 6.0, 1.0, n)
        assert post.sigma[k] < last
        last = post.sigma[k]
    assert all(post.sigma > 0)


def test_window_forgets_oldest():
    post = _post(window=5)
    ref = _post(window=5)
    pairs = [(1, 9.0), (2, 4.0), (3, 5.0), (4, 3.0), (6, 7.0), (8, 8.0)]
    _feed(post, pairs)
    _feed(ref, pairs[1:])
    np.testing.assert_allclose(post.mu, ref.mu, rtol=1e-12)
    np.testing.assert_allclose(post.sigma, ref.sigma, rtol=1e-12)


def test_posterior_matches_closed_form():
    post = _post()
    pairs = [(2, 5.0), (4, 3.5), (4, 3.9), (8, 6.0), (1, 7.0)]
    _feed(post, pairs)
    cfg = post.config
    x = np.array([cfg.index_of(s) for s, _ in pairs], dtype=float)
    y = np.array([c for _, c in pairs])
    g = np.arange(len(CANDS), dtype=float)

    def kern(a, b):
        return cfg.signal_var * np.exp(-0.5 * (np.subtract.outer(a, b) / cfg.length_scale) ** 2)

    m0 = y.mean()
    kxx = kern(x, x) + cfg.noise_var * np.eye(len(x))
    kxg = kern(x, g)
    mu = m0 + kxg.T @ np.linalg.solve(kxx, y - m0)
    var = np.diag(kern(g, g) - kxg.T @ np.linalg.solve(kxx, kxg))
    np.testing.assert_allclose(post.mu, mu, rtol=1e-9)
    np.testing.assert_allclose(post.sigma, np.sqrt(var), rtol=1e-7)


def test_repeated_identical_cost_converges():
    post = _post()
    k = post.config.index_of(4)
    _feed(post, [(2, 9.0)])
    gaps = []
    for n in range(2, 8):
        dr.observe(post, 4, 5.0 * (4 + post.config.epsilon), 1.0, n)
        gaps.append(abs(post.mu[k] - 5.0))
    assert all(a >= b for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 0.5


def test_observe_rejects_bad_inputs():
    post = _post()
    with pytest.raises(ValueError):
        dr.observe(post, 4, 0.0, 0.5, 1)
    with pytest.raises(ValueError):
        dr.observe(post, 4, 1.0, 1.5, 1)
    with pytest.raises(ValueError):
        dr.observe(post, 7, 1.0, 0.5, 1)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.sampled_from(CANDS), st.floats(1.0, 20.0)), min_size=1, max_size=20),
    st.floats(-0.5, 50.0),
    st.integers(9, 300),
)
def test_constant_shift_leaves_selection_unchanged(pairs, shift, n):
    a, b = _post(), _post()
    _feed(a, pairs)
    _feed(b, [(s, c + shift) for s, c in pairs])
    np.testing.assert_allclose(b.mu - a.mu, shift, atol=1e-7 * max(1.0, abs(shift)))
    np.testing.assert_allclose(a.sigma, b.sigma, rtol=1e-9)
    assert dr.select_length(a, n) == dr.select_length(b, n)


def _lcb_posterior(best: int) -> dr.GpPosterior:
    post = _post(noise_var=1e-6)
    k0 = post.config.index_of(best)
    _feed(post, [(s, 5.0 + 0.5 * abs(i - k0)) for i, s in enumerate(CANDS)] * 2)
    return post


def test_requests_with_different_profiles_get_different_lengths():
    post = _lcb_posterior(best=6)
    n = 40
    steep = {s: max(0.0, 0.95 - 0.15 * (s - 1)) for s in CANDS}  # acceptance collapses
    flat = {s: 0.9 for s in CANDS}
    got = dr.assign_lengths([steep, flat], post, n)

    # oracle: exhaustive evaluation of the per-request cost over allowed lengths
    eps = post.config.epsilon
    lcb = np.maximum(post.lcb(n), 0.0)
    cap = int(np.argmin(post.lcb(n)))
    want = []
    for prof in (steep, flat):
        costs = {}
        for k, s in enumerate(CANDS[: cap + 1]):
            ref = s * (steep[s] + flat[s]) / 2 + eps
            costs[s] = lcb[k] * ref / (s * prof[s] + eps)
        want.append(min(costs, key=lambda s: (costs[s], s)))
    assert got == want
    assert got[0] != got[1]
    assert got[1] == 6


def test_identical_requests_get_identical_lengths():
    post = _lcb_posterior(best=4)
    prof = {s: 0.7 for s in CANDS}
    got = dr.assign_lengths([prof] * 5, post, 30)
    assert len(set(got)) == 1


def test_assign_during_cold_start_follows_sweep():
    post = _post()
    assert dr.assign_lengths([lambda s: 0.5, lambda s: 0.9], post, 3) == [3, 3]


def test_assign_rejects_invalid_acceptance():
    post = _lcb_posterior(best=4)
    with pytest.raises(ValueError):
        dr.assign_lengths([lambda s: 1.5], post, 30)


def test_mapping_profiles_inherit_context_acceptance():
    post = _lcb_posterior(best=4)
    # an empty mapping falls back to the context-level estimates for every length
    assert dr.assign_lengths([{}], post, 30) == dr.assign_lengths([lambda s: 1.0], post, 30)


def test_converges_on_stationary_noisy_cost():
    rng = np.random.default_rng(0)
    cost = 30.0 * (1 + 0.1 * (np.arange(len(CANDS)) - 3) ** 2)
    post = _post()
    hits = 0
    for n in range(1, 201):
        s = dr.select_length(post, n)
        t = cost[post.config.index_of(s)] * (s * 0.7 + 1e-6) * (1 + 0.05 * rng.standard_normal())
        dr.observe(post, s, t, 0.7, n)
        dr.end_round(post)
        hits += n >= 150 and s == 4
    assert hits / 51 >= 0.9
    assert post.rounds == 200
