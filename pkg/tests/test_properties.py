"""Structural properties that hold whatever the solver settings."""

import numpy as np
import pytest

from occp import biased_means as bm
from occp import copula as cp
from occp import gp_confound as gc
from occp.divergence import (
    DivergenceError,
    GaussianDist,
    InvGammaDist,
    PolyaGammaDist,
    renyi_gaussian,
    renyi_invgamma,
    renyi_polya_gamma,
)
from occp.sparse_gp import HyperPosterior, psi_cross, psi_quad

ALPHA_GRID = np.array([0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.999, 1.0, 1.5, 2.0, 2.5, 4.0])


# -- divergences --------------------------------------------------------------


def _monotone(values):
    v = np.asarray(values)
    return np.all(np.diff(v) >= -1e-12 * np.maximum(1.0, np.abs(v[1:])))


@pytest.mark.parametrize("seed", range(10))
def test_renyi_nondecreasing_in_alpha(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(2, 2))
    q = GaussianDist.from_cov(rng.normal(size=2), A @ A.T + 0.5 * np.eye(2))
    p = GaussianDist.from_cov(rng.normal(size=2), 6 * (A @ A.T) + 4 * np.eye(2))
    assert _monotone([renyi_gaussian(q, p, a) for a in ALPHA_GRID])
    iq = InvGammaDist(rng.uniform(2, 6), rng.uniform(0.5, 3))
    ip = InvGammaDist(rng.uniform(1, 2), rng.uniform(0.5, 3))
    vals = []
    for a in ALPHA_GRID:
        try:
            vals.append(renyi_invgamma(iq, ip, a))
        except DivergenceError:
            break  # the mixture stops being proper beyond some alpha
    assert len(vals) >= 9 and _monotone(vals)
    pg = PolyaGammaDist(rng.uniform(0.5, 5), rng.uniform(0.1, 4))
    assert _monotone([renyi_polya_gamma(pg, a) for a in ALPHA_GRID])


# -- stick-breaking --------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_stick_breaking_simplex(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(0, 3, rng.integers(1, 400))
    pi = cp.stick_breaking_probs(g)
    assert pi.size == g.size + 1
    assert np.all(pi >= 0)
    assert abs(pi.sum() - 1) < 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_multinomial_equals_sequential_binomial(seed):
    rng = np.random.default_rng(seed)
    p = int(rng.integers(2, 60))
    g = rng.normal(0, 2, p - 1)
    counts = rng.multinomial(int(rng.integers(1, 500)), cp.stick_breaking_probs(g))
    assert abs(cp.multinomial_logpmf(counts, cp.stick_breaking_probs(g)) - cp.sequential_binomial_logpmf(counts, g)) < 1e-10


# -- cut property: stage 1 is bitwise unaffected by stage-2 data ---------------------


def test_cut_property_biased_means():
    rng = np.random.default_rng(0)
    data = bm.simulate(rng, 20, 200)
    other = bm.BiasedMeansData(data.z, rng.normal(-3.0, 2.0, 50))
    for prior in bm.PRIORS.values():
        for a in (0.05, 0.5, 1.0, 5.0):
            s1 = bm.fit_calibrated(data, prior, a).solution.stage1_params
            s2 = bm.fit_calibrated(other, prior, a).solution.stage1_params
            assert np.array_equal(s1, s2)


def test_cut_property_gp():
    data, _ = gc.simulate_kallus([1, 0], 50, 12)
    u = data.unconfounded
    rng = np.random.default_rng(3)
    other = gc.ConfoundingData(data.confounded, gc.Sample(u.X_tilde, u.X_breve, u.T, rng.normal(size=u.n) * 5),
                               data.propensity)
    cfg = gc.Stage1Config(M=3)
    fa = gc.fit_all_alphas(data, (0.05, 1.0, 2.5), config=cfg)
    fb = gc.fit_all_alphas(other, (0.05, 1.0, 2.5), config=cfg)
    for a, b in zip(fa, fb):
        assert np.array_equal(gc.pack_stage1(a.state1), gc.pack_stage1(b.state1))
        assert a.lambda1 == b.lambda1


def test_cut_property_copula():
    rng = np.random.default_rng(4)
    y = np.column_stack([rng.lognormal(1, 1, 60), rng.gamma(7, 1 / 3, 60)])
    shuffled = np.column_stack([y[:, 0], rng.permutation(y[:, 1])])
    cfg = cp.CopulaStudyConfig(alphas=(0.25, 0.999), M=3, mc_samples=100)
    fa = cp.fit_copula_all_alphas(y, cfg.alphas, cfg, 0)
    fb = cp.fit_copula_all_alphas(shuffled, cfg.alphas, cfg, 0)
    for a, b in zip(fa, fb):
        for sa, sb in zip(a["states"], b["states"]):
            assert np.array_equal(cp.pack_marginal(sa), cp.pack_marginal(sb))
        assert a["lambda1"] == b["lambda1"]


# -- coordinate ascent at alpha = 1 ---------------------------------------------------


def _check_sweeps(updates, objective, state, sweeps=5):
    f = objective(state)
    for _ in range(sweeps):
        for upd in updates:
            state = upd(state)
            f_new = objective(state)
            assert f_new <= f + 1e-9 * max(1.0, abs(f))
            f = f_new


def test_cavi_monotone_gp():
    data, _ = gc.simulate_kallus([2, 0], 80, 15)
    state = gc.initial_state(data, gc.GPPriors(), 5)
    _check_sweeps(gc.cavi_updates(data, gc.GPPriors()), lambda s: gc.stage1_objective(s, data, gc.GPPriors()), state)


def test_cavi_monotone_copula():
    rng = np.random.default_rng(5)
    d = cp.discretize(rng.gamma(7, 1 / 3, 200), 30)
    pri = cp.MarginalPriors()
    state = cp.initial_marginal(d, pri, 5)
    _check_sweeps(cp.marginal_cavi_updates(d, pri), lambda s: cp.marginal_objective(s, d, pri), state)


# -- Psi statistics against Monte Carlo -------------------------------------------------


def test_psi_statistics_against_monte_carlo():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(3, 1))
    r = np.linspace(-1.5, 1.5, 3)[:, None]
    h = HyperPosterior(0.9, 0.05, np.array([1.1]), np.array([0.08]))
    w = np.array([0.5, 1.0, 2.0])
    S = 1_000_000
    sig = rng.normal(h.mu_sigma, np.sqrt(h.v_sigma), S)
    ell = rng.normal(h.mu_ell[0], np.sqrt(h.v_ell[0]), S)
    cross_draws = np.empty((S, 3, 3))
    for i in range(3):
        cross_draws[:, i, :] = sig[:, None] * np.exp(-0.5 * (X[i, 0] * ell[:, None] - r[None, :, 0]) ** 2)
    mc = cross_draws.mean(axis=0)
    se = cross_draws.std(axis=0) / np.sqrt(S)
    assert np.all(np.abs(mc - psi_cross(X, r, h)) <= 3 * se)
    # sum_i w_i k(x_i, r_a) k(x_i, r_b) per draw
    quad_draws = np.einsum("i,sia,sib->sab", w, cross_draws, cross_draws)
    mc = quad_draws.mean(axis=0)
    se = quad_draws.std(axis=0) / np.sqrt(S)
    assert np.all(np.abs(mc - psi_quad(X, r, h, weights=w)) <= 3 * se)
