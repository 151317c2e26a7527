import csv

import numpy as np
import pytest
from conftest import central_diff, rel_err

from occp.gp_confound import (
    STAR_COLUMNS,
    ConfoundingData,
    GPPriors,
    Sample,
    Stage1Config,
    _chol_coords,
    _stage2_packed,
    cavi_updates,
    fit_all_alphas,
    fit_stage1_kl,
    ingest_star_csv,
    initial_state,
    pack_stage1,
    predict,
    signed_reweight,
    simulate_kallus,
    stage1_objective,
    stage1_packed_objective,
    stage2_closed_form,
    stage2_fit,
    stage2_lambda_base,
    stage2_problem,
    unpack_stage1,
)
from occp.sparse_gp import (
    HyperPosterior,
    SparseGPBlock,
    psi_cross,
    psi_cross_vjp,
    psi_quad,
    psi_quad_vjp,
    regular_inducing,
)


def small_data(seed=3, n1=10, n2=6, p2=1):
    rng = np.random.default_rng(seed)
    xb = lambda n: rng.normal(size=(n, p2))
    conf = Sample(rng.normal(size=n1), xb(n1), rng.integers(0, 2, n1), rng.normal(size=n1))
    unc = Sample(rng.uniform(-1, 1, n2), xb(n2), np.r_[0, 1, rng.integers(0, 2, n2 - 2)], rng.normal(size=n2))
    return ConfoundingData(conf, unc, 0.5)


def perturbed_state(data, M=3, seed=0):
    rng = np.random.default_rng(seed)
    s = initial_state(data, GPPriors(), M)
    for blk in (s.gp_a, s.gp_d):
        blk.mu_u = rng.normal(size=M) * 0.5
        A = rng.normal(size=(M, M)) * 0.2
        blk.cov_u = 0.3 * blk.K + A @ A.T
        blk.mu_sigma, blk.v_sigma = 0.8, 0.05
        blk.mu_ell, blk.v_ell = np.array([1.2]), np.array([0.03])
    s.mu_delta = rng.normal(size=s.mu_delta.size)
    s.cov_delta = np.eye(s.mu_delta.size) * 0.5
    return s


# -- Psi statistics ---------------------------------------------------------


@pytest.fixture
def psi_setup():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(5, 2))
    r = regular_inducing(X, 2)
    return X, r


def _hyper(v):
    return HyperPosterior(v[0], v[1], v[2:4], v[4:6])


def test_psi_cross_vjp(psi_setup):
    X, r = psi_setup
    v0 = np.array([0.9, 0.2, 1.1, 0.7, 0.05, 0.1])
    G = np.random.default_rng(2).normal(size=(X.shape[0], r.shape[0]))
    dms, dmu, dv = psi_cross_vjp(X, r, _hyper(v0), G)
    num = central_diff(lambda v: float(np.sum(G * psi_cross(X, r, _hyper(v)))), v0)
    assert rel_err(np.r_[dms, dmu, dv], np.r_[num[0], num[2:]]) < 1e-6


def test_psi_quad_vjp(psi_setup):
    X, r = psi_setup
    v0 = np.array([0.9, 0.2, 1.1, 0.7, 0.05, 0.1])
    rng = np.random.default_rng(3)
    G = rng.normal(size=(r.shape[0],) * 2)
    w = rng.uniform(0.5, 2, X.shape[0])
    dms, dvs, dmu, dv, dw = psi_quad_vjp(X, r, _hyper(v0), G, w)
    num = central_diff(lambda v: float(np.sum(G * psi_quad(X, r, _hyper(v), w))), v0)
    assert rel_err(np.r_[dms, dvs, dmu, dv], num) < 1e-6
    numw = central_diff(lambda ww: float(np.sum(G * psi_quad(X, r, _hyper(v0), ww))), w)
    assert rel_err(dw, numw) < 1e-6


# -- stage 1 ------------------------------------------------------------------


@pytest.mark.parametrize("alpha", [0.05, 1.0, 2.5])
def test_stage1_packed_gradient(alpha):
    data = small_data()
    s = perturbed_state(data)
    f = stage1_packed_objective(data, GPPriors(), alpha, 0.8, s)
    x = pack_stage1(s)
    _, g = f(x)
    assert rel_err(g, central_diff(lambda t: f(t)[0], x, h=1e-5)) < 1e-4


def test_pack_roundtrip():
    data = small_data()
    s = perturbed_state(data)
    s2 = unpack_stage1(pack_stage1(s), s)
    assert stage1_objective(s2, data, GPPriors()) == pytest.approx(stage1_objective(s, data, GPPriors()), rel=1e-10)


def test_cavi_each_update_does_not_increase():
    data = small_data(n1=20)
    s = perturbed_state(data)
    obj = lambda st: stage1_objective(st, data, GPPriors())
    f = obj(s)
    for _ in range(3):
        for upd in cavi_updates(data, GPPriors()):
            s = upd(s)
            f_new = obj(s)
            assert f_new <= f + 1e-8 * abs(f)
            f = f_new


# -- stage 2 ------------------------------------------------------------------


@pytest.fixture(scope="module")
def fitted():
    data, _ = simulate_kallus([5, 0], 60, 15)
    rep = fit_stage1_kl(data, GPPriors(), Stage1Config(M=4))
    s1 = rep.final_params
    lam = stage2_lambda_base(s1, data)
    return data, s1, stage2_problem(s1, data, lam)


@pytest.mark.parametrize("alpha", [0.01, 1.0, 2.5])
def test_stage2_gradient(fitted, alpha):
    _, _, prob = fitted
    f = _stage2_packed(prob, alpha, 0.7)
    rng = np.random.default_rng(4)
    p = prob.p
    A = rng.normal(size=(p, p)) * 0.1
    x = np.r_[rng.normal(size=p), _chol_coords(A @ A.T + 0.05 * np.eye(p))]
    _, g = f(x)
    assert rel_err(g, central_diff(lambda t: f(t)[0], x)) < 1e-4


def test_stage2_kl_closed_form(fitted):
    _, _, prob = fitted
    a_cf, S_cf = stage2_closed_form(prob)
    p = prob.p
    for solver in ("cd", "bfgs"):
        st, _ = stage2_fit(prob, prob.lambda2_base, 1.0, init=(np.zeros(p), np.eye(p)), solver=solver)
        assert np.allclose(st.a_eta, a_cf, atol=1e-5)
        assert np.allclose(st.Sigma_eta_q, S_cf, atol=1e-5)


def test_stage2_cd_rejects_other_alpha(fitted):
    with pytest.raises(ValueError):
        stage2_fit(fitted[2], 1.0, 0.5, solver="cd")


def test_cut_property_gp():
    data, _ = simulate_kallus([5, 1], 60, 15)
    u = data.unconfounded
    other = ConfoundingData(data.confounded, Sample(u.X_tilde, u.X_breve, u.T, u.Y + 10.0), data.propensity)
    cfg = Stage1Config(M=4)
    fa = fit_all_alphas(data, (0.25, 1.0), config=cfg)
    fb = fit_all_alphas(other, (0.25, 1.0), config=cfg)
    for a, b in zip(fa, fb):
        assert np.array_equal(pack_stage1(a.state1), pack_stage1(b.state1))
        assert a.lambda1 == b.lambda1
    assert not np.allclose(fa[0].state2.a_eta, fb[0].state2.a_eta)


def test_predict_shapes(fitted):
    data, s1, prob = fitted
    st, _ = stage2_fit(prob, prob.lambda2_base, 1.0)
    out = predict(s1, st, data, np.linspace(-1, 1, 4)[:, None], n_draws=50, rng=0, T_star=np.array([0, 1, 0, 1]))
    assert out["tau_draws"].shape == (50, 4)
    assert np.all(out["z_var"] > 0)


# -- data validation and STAR ingest --------------------------------------------


def test_sample_validation():
    with pytest.raises(ValueError):
        Sample(np.zeros(3), None, np.array([0, 1, 2]), np.zeros(3))
    with pytest.raises(ValueError):
        ConfoundingData(Sample(np.zeros(2), None, [0, 1], [0, 0]), Sample(np.zeros(3), None, [0, 1, 1], [0, 0, 0]), 0.5)


def test_signed_reweight_is_unbiased_for_cate():
    rng = np.random.default_rng(0)
    t = rng.binomial(1, 0.3, 400000)
    y = 2.0 + 1.5 * t + rng.normal(size=t.size)
    assert signed_reweight(y, t, 0.3).mean() == pytest.approx(1.5, abs=0.05)


def _write_star(path, n=120, seed=0, blanks=3):
    rng = np.random.default_rng(seed)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STAR_COLUMNS)
        for i in range(n):
            row = [rng.integers(400, 600), rng.integers(400, 600), rng.integers(400, 600), rng.integers(0, 2),
                   round(float(rng.uniform(5, 7)), 2), rng.choice(["f", "m"]), rng.choice(["a", "b", "c"]),
                   rng.integers(0, 2), rng.choice(["t1", "t2"]), int(i % 2)]
            if i < blanks:
                row[4] = ""
            w.writerow(row)


def test_star_ingest(tmp_path):
    path = tmp_path / "star.csv"
    _write_star(path)
    ing = ingest_star_csv(path, 0.5, seed=1)
    d = ing.data
    assert ing.dropped_rows == 3
    assert d.unconfounded.n == round(0.5 * 59)  # complete rural rows
    assert d.heldout.n + d.unconfounded.n == 117
    assert d.confounded.X_breve.shape[1] == len(ing.breve_names) == 1 + 2 + 1 + 1
    assert np.all(np.isin(d.confounded.T, [0, 1]))


def test_star_ingest_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("listening,reading\n1,2\n")
    with pytest.raises(ValueError):
        ingest_star_csv(bad, 0.5, 0)
    ok = tmp_path / "ok.csv"
    _write_star(ok)
    with pytest.raises(ValueError):
        ingest_star_csv(ok, 1.5, 0)
