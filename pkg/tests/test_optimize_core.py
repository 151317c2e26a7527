import warnings

import numpy as np
import pytest

from occp.core import (
    CalibrationError,
    LearningRates,
    StageObjective,
    StageSpec,
    calibrate_learning_rates,
    dispersion_learning_rate,
    expectation_loss_mc,
    fingerprint,
    solve_two_stage,
)
from occp.optimize import (
    AdamState,
    SolverError,
    StopRule,
    Transform,
    TransformKind,
    adam_minimize,
    bfgs_minimize,
    coordinate_descent,
    finite_diff_grad,
)


def quadratic(x):
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    b = np.array([1.0, -1.0])
    return 0.5 * x @ A @ x - b @ x, A @ x - b


QUAD_MIN = np.linalg.solve([[3.0, 1.0], [1.0, 2.0]], [1.0, -1.0])


def test_bfgs_finds_quadratic_minimum():
    rep = bfgs_minimize(quadratic, np.zeros(2))
    assert rep.converged
    assert np.allclose(rep.final_params, QUAD_MIN, atol=1e-8)
    assert rep.objective_trace[0] == 0.0


def test_adam_finds_quadratic_minimum():
    rep = adam_minimize(quadratic, np.zeros(2), AdamState(step_size=0.05), StopRule(max_iter=20000, rel_tol=1e-12))
    assert np.allclose(rep.final_params, QUAD_MIN, atol=1e-4)


def test_adam_keeps_best_before_nonfinite():
    def f(x):
        if x[0] > 0.5:
            return np.nan, np.ones(1)
        return float((x[0] - 1) ** 2), np.array([2 * (x[0] - 1)])

    rep = adam_minimize(f, np.zeros(1), AdamState(step_size=0.1))
    assert rep.error is not None
    assert np.isfinite(rep.final_objective)
    assert rep.final_params[0] <= 0.5


def test_nonfinite_start_raises():
    with pytest.raises(SolverError):
        bfgs_minimize(lambda x: (np.inf, x), np.zeros(1))
    with pytest.raises(SolverError):
        adam_minimize(lambda x: (np.nan, x), np.zeros(1))


def test_coordinate_descent_converges_and_guards_increase():
    # exact block minimisation of the quadratic
    upd = [lambda s: np.array([(1 - s[1]) / 3, s[1]]), lambda s: np.array([s[0], (-1 - s[0]) / 2])]
    rep = coordinate_descent(upd, lambda s: quadratic(s)[0], np.zeros(2))
    assert rep.converged and np.allclose(rep.final_params, QUAD_MIN, atol=1e-5)
    assert all(b <= a + 1e-14 for a, b in zip(rep.objective_trace, rep.objective_trace[1:]))
    with pytest.raises(SolverError):
        coordinate_descent([lambda s: s + 1.0], lambda s: float(s @ s), np.ones(2))


def test_finite_diff_grad():
    g = finite_diff_grad(lambda x: quadratic(x)[0], np.array([0.3, -0.7]))
    assert np.allclose(g, quadratic(np.array([0.3, -0.7]))[1], atol=1e-8)


@pytest.mark.parametrize("kind", list(TransformKind))
def test_transform_roundtrip_and_chain(kind):
    t = Transform(kind, 2)
    value = {TransformKind.IDENTITY: np.array([0.4, -1.0]), TransformKind.LOG_SCALAR: 2.5,
             TransformKind.CHOLESKY_VECH: np.array([[2.0, 0.3], [0.3, 1.0]])}[kind]
    c = t.forward(value)
    assert np.allclose(t.inverse(c), value)
    # chain rule on f(value) = sum(value**2)
    f = lambda cc: float(np.sum(np.asarray(t.inverse(cc)) ** 2))
    g = t.chain(2 * np.asarray(t.inverse(c)), c)
    assert np.allclose(g, finite_diff_grad(f, np.atleast_1d(c).astype(float)).reshape(np.shape(g)), atol=1e-6)


def _linear_stage(center):
    return StageObjective(lambda x: float((x - center) @ (x - center)), lambda x: float(x @ x), 1.0,
                          lambda x: (2 * (x - center), 2 * x))


def test_two_stage_freezes_stage1():
    s1 = StageSpec(_linear_stage(np.array([2.0])), np.zeros(1))
    sol = solve_two_stage(s1, lambda frozen: StageSpec(_linear_stage(frozen * 3), np.zeros(1)))
    assert np.allclose(sol.stage1_params, [1.0], atol=1e-6)
    assert np.allclose(sol.stage2_params, [1.5], atol=1e-6)
    assert sol.stage1_fingerprint == fingerprint(sol.stage1_params)


def test_two_stage_detects_mutation():
    s1 = StageSpec(_linear_stage(np.array([2.0])), np.zeros(1))

    def bad_factory(frozen):
        frozen += 1.0
        return StageSpec(_linear_stage(np.zeros(1)), np.zeros(1))

    with pytest.raises(RuntimeError):
        solve_two_stage(s1, bad_factory)


def test_calibration_identity_and_ratio():
    div = lambda a: 2.0 * a
    r = calibrate_learning_rates(div, div, 0.5, 1.0, 3.0)
    assert r.lambda1 == pytest.approx(0.5) and r.lambda2 == pytest.approx(1.5)
    r1 = calibrate_learning_rates(div, div, 1.0)
    assert (r1.lambda1, r1.lambda2) == (1.0, 1.0)


def test_calibration_zero_kl_warns():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        r = calibrate_learning_rates(lambda a: 0.0, None, 0.5)
    assert r.lambda1 == 1.0 and w


def test_dispersion_learning_rate():
    assert dispersion_learning_rate(np.array([1.0, -1.0, 2.0]), 3, 1) == pytest.approx(2 / 6)
    with pytest.raises(ValueError):
        dispersion_learning_rate(np.ones(3), 3, 3)


def test_expectation_loss_mc():
    est = expectation_loss_mc(lambda x: x**2, lambda rng, n: rng.normal(size=n), 20000, 1)
    assert abs(est.mean - 1.0) < 4 * est.se
    with pytest.raises(RuntimeError):
        expectation_loss_mc(lambda x: np.full(x.shape, np.nan), lambda rng, n: rng.normal(size=n), 100, 1)
