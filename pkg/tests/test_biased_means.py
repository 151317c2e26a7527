import numpy as np
import pytest
from conftest import central_diff, rel_err

from occp.biased_means import (
    PRIORS,
    BiasedMeansData,
    BiasedMeansPrior,
    BivariateVariational,
    Table1Config,
    _coords,
    calibrate,
    contour_grid,
    cut_posterior,
    fit_calibrated,
    fit_occp,
    kl_solution,
    run_table1,
    simulate,
    stage1_divergence,
    stage1_stage_objective,
    stage2_stage_objective,
    true_joint_posterior,
)
from occp.core import LearningRates
from occp.report import _fmt

ALPHAS = [0.05, 0.5, 0.999, 1.0, 5.0]


@pytest.fixture
def data():
    return simulate(np.random.default_rng(7), n1=8, n2=10)


def test_joint_posterior_matches_brute_force(data):
    prior = BiasedMeansPrior(1.0, 4.0, 2.0)
    # precision of (phi, eta) from the Gaussian likelihood and priors
    P = np.array([[data.n1 + data.n2 + 1 / prior.v0, data.n2], [data.n2, data.n2 + 1 / prior.vb]])
    h = np.array([data.z.sum() + data.w.sum() + prior.mu0 / prior.v0, data.w.sum()])
    q = true_joint_posterior(data, prior)
    assert np.allclose(q.cov, np.linalg.inv(P), rtol=1e-12)
    assert np.allclose(q.mean, np.linalg.solve(P, h), rtol=1e-12)


def test_cut_posterior_by_composition(data):
    prior = PRIORS["objective"]
    q = cut_posterior(data, prior)
    rng = np.random.default_rng(0)
    phi = rng.normal(q.mu_phi, np.sqrt(q.v_phi), 400000)
    s2 = data.n2 * prior.vb / (data.n2 * prior.vb + 1)
    eta = rng.normal(s2 * (data.w.mean() - phi), np.sqrt(s2 / data.n2))
    assert np.cov(phi, eta) == pytest.approx(q.cov, rel=2e-2)


@pytest.mark.parametrize("alpha", ALPHAS)
@pytest.mark.parametrize("stage", [1, 2])
def test_stage_gradients(data, alpha, stage):
    prior = PRIORS["objective"]
    x1 = np.array([4.8, np.log(0.05)])
    obj = stage1_stage_objective(data, prior, alpha, 0.7) if stage == 1 else stage2_stage_objective(x1, data, prior, alpha, 0.7)
    x = x1 if stage == 1 else np.array([4.6, np.log(0.1), -0.8])
    _, g = obj.value_and_grad(x)
    assert rel_err(g, central_diff(obj.total, x)) < 1e-4


def test_alpha_one_occp_is_cut_posterior(data):
    prior = PRIORS["subjective"]
    fit = fit_occp(data, prior, 1.0, LearningRates(1.0, 1.0))
    assert np.allclose(fit.q.as_array(), cut_posterior(data, prior).as_array(), atol=1e-4)


def test_calibration_at_kl_is_identity(data):
    r = calibrate(data, PRIORS["objective"], 0.999)
    assert r.lambda1 == pytest.approx(1.0, abs=1e-3)
    r = calibrate(data, PRIORS["objective"], 1.0)
    assert (r.lambda1, r.lambda2) == (1.0, 1.0)


def test_learning_rate_increases_with_alpha(data):
    lam = [calibrate(data, PRIORS["objective"], a).lambda1 for a in (0.05, 0.5, 0.999, 5.0)]
    assert all(b > a for a, b in zip(lam, lam[1:]))


def test_calibrated_fit_is_stationary(data):
    prior = PRIORS["objective"]
    fit = fit_calibrated(data, prior, 0.05)
    sol = fit.solution
    g1 = stage1_stage_objective(data, prior, 0.05, sol.rates.lambda1).value_and_grad(sol.stage1_params)[1]
    assert np.max(np.abs(g1)) < 1e-5


def test_cut_property(data):
    prior = PRIORS["objective"]
    other = BiasedMeansData(data.z, data.w + 3.0)
    a = fit_calibrated(data, prior, 0.5).solution.stage1_params
    b = fit_calibrated(other, prior, 0.5).solution.stage1_params
    assert np.array_equal(a, b)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        BiasedMeansPrior(0.0, -1.0, 1.0)
    with pytest.raises(ValueError):
        BiasedMeansData([], [1.0])
    with pytest.raises(ValueError):
        BivariateVariational(0.0, 1.0, 0.0, 1.0, 2.0)
    with pytest.raises(ValueError):
        stage1_divergence(0.0, 10.0, BiasedMeansPrior(0.0, 1.0, 1.0), 5.0)


def test_small_study_and_threads_invariance():
    cfg = Table1Config(replications=6, alphas=(0.05, 0.999))
    a = run_table1(cfg)
    b = run_table1(Table1Config(replications=6, alphas=(0.05, 0.999), threads=2))
    cells = lambda rep: [[_fmt(r[c]) for c in rep.columns] for r in rep.rows]
    assert cells(a) == cells(b)
    assert len(a.rows) == 2 * 3 * 2
    assert a.value("mean_lr", prior="objective", alpha=0.999, param="phi") == pytest.approx(1.0, abs=1e-3)


def test_contour_grid_shape():
    rep = contour_grid(Table1Config(priors=("objective",), alphas=(0.5,)), grid_size=5)
    assert len(rep.rows) == 3 * 25
    assert {r["method"] for r in rep.rows} == {"true", "cut", "alpha=0.5"}
