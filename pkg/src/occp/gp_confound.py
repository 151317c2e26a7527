"""Correcting a confounded CATE surface with a small randomised sample.

Stage 1 fits the observational outcome with two sparse GPs,

    z_i = a(x_i) + (2 T_i - 1) d(x_i) + xb_i' delta_{T_i} + eps_i,

so the observational effect surface is omega(x) = 2 d(x) + xb'(delta_1 - delta_0).
Stage 2 regresses the signed-reweighted randomised outcomes w on
omega(x) + X eta, where X eta is a linear confounding correction.

Stage 1 at alpha = 1 is solved by coordinate ascent (closed-form blocks plus
a short numerical search for the lengthscales); other orders start from that
solution and run BFGS on unconstrained coordinates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize as sopt
from scipy import special, stats

from .core import dispersion_learning_rate
from .divergence import (
    DivergenceError,
    GaussianDist,
    InvGammaDist,
    is_kl,
    renyi_gaussian,
    renyi_gaussian_1d,
    renyi_gaussian_grad,
    renyi_invgamma,
    renyi_invgamma_grad,
    unvech,
    vech,
)
from .optimize import AdamState, SolveReport, SolverError, StopRule, adam_minimize, bfgs_minimize, coordinate_descent
from .report import ReplicationReport
from .sparse_gp import (
    SparseGPBlock,
    expected_kernel,
    psi_cross,
    psi_cross_vjp,
    psi_pair_contract,
    psi_quad,
    psi_quad_vjp,
    regular_inducing,
    sample_function,
)

LOG2PI = np.log(2 * np.pi)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    X_tilde: np.ndarray
    X_breve: np.ndarray
    T: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        xt = np.asarray(self.X_tilde, dtype=float)
        if xt.ndim == 1:
            xt = xt[:, None]
        n = xt.shape[0]
        xb = np.asarray(self.X_breve, dtype=float).reshape(n, -1) if self.X_breve is not None else np.zeros((n, 0))
        t = np.asarray(self.T, dtype=float).reshape(-1)
        y = np.asarray(self.Y, dtype=float).reshape(-1)
        if t.shape[0] != n or y.shape[0] != n:
            raise ValueError("X_tilde, T and Y must have the same number of rows")
        if not np.all((t == 0) | (t == 1)):
            raise ValueError("T must be binary")
        for name, v in (("X_tilde", xt), ("X_breve", xb), ("T", t), ("Y", y)):
            object.__setattr__(self, name, v)

    @property
    def n(self):
        return self.Y.shape[0]


@dataclass(frozen=True)
class ConfoundingData:
    """Confounded and unconfounded samples with the randomisation propensity.

    ``X_eta`` is the stage-2 design for the confounding correction; by default
    it is [X_tilde, X_breve] of the unconfounded sample.
    """

    confounded: Sample
    unconfounded: Sample
    propensity: float
    X_eta: np.ndarray | None = None
    heldout: Sample | None = None

    def __post_init__(self):
        n1, n2 = self.confounded.n, self.unconfounded.n
        if not n1 >= n2 >= 1:
            raise ValueError("need n1 >= n2 >= 1")
        if not 0 < self.propensity < 1:
            raise ValueError("propensity must lie in (0, 1)")
        if self.confounded.X_tilde.shape[1] != self.unconfounded.X_tilde.shape[1]:
            raise ValueError("X_tilde widths differ between samples")
        if self.confounded.X_breve.shape[1] != self.unconfounded.X_breve.shape[1]:
            raise ValueError("X_breve widths differ between samples")
        x = self.X_eta
        if x is None:
            x = np.hstack([self.unconfounded.X_tilde, self.unconfounded.X_breve])
        x = np.asarray(x, dtype=float).reshape(n2, -1)
        object.__setattr__(self, "X_eta", x)

    @property
    def z(self):
        return self.confounded.Y

    @property
    def t_sign(self):
        return 2 * self.confounded.T - 1

    @property
    def breve_c(self):
        """n1 x 2 p2 design [(1 - T) xb, T xb] for delta = (delta_0, delta_1)."""
        s = self.confounded
        return np.hstack([(1 - s.T)[:, None] * s.X_breve, s.T[:, None] * s.X_breve])

    @property
    def w(self):
        s = self.unconfounded
        return signed_reweight(s.Y, s.T, self.propensity)


def signed_reweight(y, t, propensity):
    """Unbiased CATE pseudo-outcome y / (e + T - 1)."""
    return np.asarray(y, dtype=float) / (propensity + np.asarray(t, dtype=float) - 1)


@dataclass(frozen=True)
class GPPriors:
    a0: float = 0.1
    b0: float = 0.1
    mu_delta0: float = 0.0
    v_delta0: float = 100.0
    v_sigma0: float = 100.0
    mu_ell0: float = 1.0
    v_ell0: float = 100.0
    mu_eta0: float = 0.0
    v_eta0: float = 100.0


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------


@dataclass
class Stage1State:
    gp_a: SparseGPBlock
    gp_d: SparseGPBlock
    mu_delta: np.ndarray
    cov_delta: np.ndarray
    a_noise: float
    b_noise: float

    @property
    def q_delta(self):
        return GaussianDist.from_cov(self.mu_delta, self.cov_delta) if self.mu_delta.size else None

    @property
    def q_noise(self):
        return InvGammaDist(self.a_noise, self.b_noise)

    def copy(self):
        return Stage1State(self.gp_a.copy(), self.gp_d.copy(), self.mu_delta.copy(), self.cov_delta.copy(),
                           float(self.a_noise), float(self.b_noise))


def initial_state(data: ConfoundingData, priors: GPPriors = GPPriors(), M: int = 10,
                  v_sigma=0.1, v_ell=0.01) -> Stage1State:
    """Starting point for coordinate ascent; inducing inputs on a regular grid."""
    r = regular_inducing(data.confounded.X_tilde, M)
    kw = dict(v_sigma0=priors.v_sigma0, mu_ell0=priors.mu_ell0, v_ell0=priors.v_ell0)
    ga = SparseGPBlock.initial(r, 1.0, v_sigma, priors.mu_ell0, v_ell, **kw)
    gd = SparseGPBlock.initial(r, 1.0, v_sigma, priors.mu_ell0, v_ell, **kw)
    q = data.breve_c.shape[1]
    z = data.z
    return Stage1State(ga, gd, np.full(q, priors.mu_delta0), priors.v_delta0 * np.eye(q),
                       priors.a0 + z.size / 2, priors.b0 + z.size * np.var(z) / 2)


@dataclass
class _Fit:
    psi: dict
    psi1: dict
    mean: dict
    r: np.ndarray
    S: float


def _blocks(state):
    return (("a", state.gp_a), ("d", state.gp_d))


def _fit_parts(state: Stage1State, data: ConfoundingData) -> _Fit:
    X = data.confounded.X_tilde
    n = X.shape[0]
    sign = {"a": 1.0, "d": data.t_sign}
    psi, psi1, mean = {}, {}, {}
    S = 0.0
    for name, blk in _blocks(state):
        h = blk.hyper
        psi[name] = psi_cross(X, blk.inducing, h)
        psi1[name] = psi_quad(X, blk.inducing, h)
        ki = blk.Kinv
        m = sign[name] * (psi[name] @ (ki @ blk.mu_u))
        mean[name] = m
        P = blk.cov_u + np.outer(blk.mu_u, blk.mu_u)
        S += n * h.e_sigma2 - np.sum(ki * psi1[name]) + np.sum((ki @ P @ ki) * psi1[name]) - m @ m
    xb = data.breve_c
    mean["x"] = xb @ state.mu_delta
    r = data.z - mean["a"] - mean["d"] - mean["x"]
    S += r @ r + np.sum((xb.T @ xb) * state.cov_delta)
    return _Fit(psi, psi1, mean, r, float(S))


def expected_sq_error(state, data) -> float:
    """E_q ||z - omega^c||^2."""
    return _fit_parts(state, data).S


def stage1_expected_loss(state: Stage1State, data: ConfoundingData) -> float:
    """E_q of the Gaussian negative log-likelihood of the confounded outcomes."""
    n = data.z.size
    S = expected_sq_error(state, data)
    a, b = state.a_noise, state.b_noise
    return 0.5 * n * LOG2PI + 0.5 * n * (np.log(b) - special.digamma(a)) + a * S / (2 * b)


def _zero_grad(state):
    g = {}
    for name, blk in _blocks(state):
        g[name] = {"mu_u": np.zeros(blk.m), "cov_u": np.zeros((blk.m, blk.m)), "mu_sigma": 0.0,
                   "v_sigma": 0.0, "mu_ell": np.zeros(blk.p), "v_ell": np.zeros(blk.p)}
    g["mu_delta"] = np.zeros_like(state.mu_delta)
    g["cov_delta"] = np.zeros_like(state.cov_delta)
    g["a_noise"] = 0.0
    g["b_noise"] = 0.0
    return g


def stage1_loss_grad(state: Stage1State, data: ConfoundingData) -> dict:
    """Gradient of the expected loss in every variational parameter (covariances symmetric)."""
    X = data.confounded.X_tilde
    n = X.shape[0]
    fit = _fit_parts(state, data)
    a, b = state.a_noise, state.b_noise
    c = a / (2 * b)
    g = _zero_grad(state)
    sign = {"a": 1.0, "d": data.t_sign}
    for name, blk in _blocks(state):
        h = blk.hyper
        ki = blk.Kinv
        kmu = ki @ blk.mu_u
        v = -2.0 * sign[name] * (fit.r + fit.mean[name])
        g_cross = np.outer(v, kmu)
        P = blk.cov_u + np.outer(blk.mu_u, blk.mu_u)
        g_quad = ki @ P @ ki - ki
        gb = g[name]
        kpk = ki @ fit.psi1[name] @ ki
        gb["mu_u"] = c * (ki @ (fit.psi[name].T @ v) + 2 * kpk @ blk.mu_u)
        gb["cov_u"] = c * 0.5 * (kpk + kpk.T)
        ds, dm, dv = psi_cross_vjp(X, blk.inducing, h, g_cross)
        ds2, dvs, dm2, dv2, _ = psi_quad_vjp(X, blk.inducing, h, g_quad)
        gb["mu_sigma"] = c * (ds + ds2 + 2 * n * blk.mu_sigma)
        gb["v_sigma"] = c * (dvs + n)
        gb["mu_ell"] = c * (dm + dm2)
        gb["v_ell"] = c * (dv + dv2)
    xb = data.breve_c
    g["mu_delta"] = c * (-2 * xb.T @ fit.r)
    g["cov_delta"] = c * (xb.T @ xb)
    g["a_noise"] = -0.5 * n * special.polygamma(1, a) + fit.S / (2 * b)
    g["b_noise"] = 0.5 * n / b - a * fit.S / (2 * b * b)
    return g


def _ell_loss_grad(state, data, name):
    """Expected-loss gradient in (mu_ell, v_ell) of one block only."""
    X = data.confounded.X_tilde
    fit = _fit_parts(state, data)
    blk = _get_block(state, name)
    ki = blk.Kinv
    sign = 1.0 if name == "a" else data.t_sign
    g_cross = np.outer(-2.0 * sign * (fit.r + fit.mean[name]), ki @ blk.mu_u)
    g_quad = ki @ (blk.cov_u + np.outer(blk.mu_u, blk.mu_u)) @ ki - ki
    _, dm, dv = psi_cross_vjp(X, blk.inducing, blk.hyper, g_cross)
    _, _, dm2, dv2, _ = psi_quad_vjp(X, blk.inducing, blk.hyper, g_quad)
    c = state.a_noise / (2 * state.b_noise)
    return {"mu_ell": c * (dm + dm2), "v_ell": c * (dv + dv2)}


def _delta_prior(state, priors):
    q = state.mu_delta.size
    return GaussianDist(np.full(q, priors.mu_delta0), np.sqrt(priors.v_delta0) * np.eye(q))


def stage1_divergence(state: Stage1State, priors: GPPriors, alpha: float) -> float:
    """Sum of the block divergences of q(phi) from the prior."""
    total = 0.0
    for _, blk in _blocks(state):
        total += renyi_gaussian(GaussianDist.from_cov(blk.mu_u, blk.cov_u),
                                GaussianDist.from_cov(np.zeros(blk.m), blk.K), alpha)
        total += renyi_gaussian_1d(blk.mu_sigma, blk.v_sigma, 0.0, blk.v_sigma0, alpha)[0]
        total += renyi_gaussian_1d(blk.mu_ell, blk.v_ell, blk.mu_ell0, blk.v_ell0, alpha)[0]
    if state.mu_delta.size:
        total += renyi_gaussian(state.q_delta, _delta_prior(state, priors), alpha)
    total += renyi_invgamma(state.q_noise, InvGammaDist(priors.a0, priors.b0), alpha)
    return float(total)


def stage1_divergence_grad(state: Stage1State, priors: GPPriors, alpha: float) -> dict:
    g = _zero_grad(state)
    for name, blk in _blocks(state):
        gg = renyi_gaussian_grad(GaussianDist.from_cov(blk.mu_u, blk.cov_u),
                                 GaussianDist.from_cov(np.zeros(blk.m), blk.K), alpha)
        g[name]["mu_u"] = gg.mean
        g[name]["cov_u"] = gg.cov
        _, dm, dv = renyi_gaussian_1d(blk.mu_sigma, blk.v_sigma, 0.0, blk.v_sigma0, alpha)
        g[name]["mu_sigma"], g[name]["v_sigma"] = float(dm), float(dv)
        _, dm, dv = renyi_gaussian_1d(blk.mu_ell, blk.v_ell, blk.mu_ell0, blk.v_ell0, alpha)
        g[name]["mu_ell"], g[name]["v_ell"] = dm, dv
    if state.mu_delta.size:
        gg = renyi_gaussian_grad(state.q_delta, _delta_prior(state, priors), alpha)
        g["mu_delta"], g["cov_delta"] = gg.mean, gg.cov
    ga, gb = renyi_invgamma_grad(state.q_noise, InvGammaDist(priors.a0, priors.b0), alpha)
    g["a_noise"], g["b_noise"] = ga, gb
    return g


def stage1_objective(state, data, priors, alpha=1.0, learning_rate=1.0) -> float:
    return learning_rate * stage1_expected_loss(state, data) + stage1_divergence(state, priors, alpha)


# -- unconstrained coordinates ------------------------------------------------
# Covariances are parameterised by Cholesky factors with log-diagonals and
# variances/noise parameters by their logs.


def _chol_coords(cov):
    L = np.linalg.cholesky(cov)
    L[np.diag_indices_from(L)] = np.log(np.diag(L))
    return vech(L)


def _chol_from_coords(v, d):
    L = unvech(v, d)
    L[np.diag_indices(d)] = np.exp(np.diag(L))
    return L


def _chol_chain(g_cov, L):
    d = L.shape[0]
    gl = np.tril(2.0 * (0.5 * (g_cov + g_cov.T)) @ L)
    gl[np.diag_indices(d)] *= np.diag(L)
    return vech(gl)


def _whiten(cov, lk):
    t = np.linalg.solve(lk, cov)
    t = np.linalg.solve(lk, t.T)
    return 0.5 * (t + t.T)


def pack_stage1(state: Stage1State) -> np.ndarray:
    """Unconstrained coordinates; inducing variables are whitened by chol(K_u)."""
    parts = []
    for _, blk in _blocks(state):
        lk = np.linalg.cholesky(blk.K)
        parts += [np.linalg.solve(lk, blk.mu_u), _chol_coords(_whiten(blk.cov_u, lk)), [blk.mu_sigma, np.log(blk.v_sigma)], blk.mu_ell,
                  np.log(blk.v_ell)]
    if state.mu_delta.size:
        parts += [state.mu_delta, _chol_coords(state.cov_delta)]
    parts.append([np.log(state.a_noise), np.log(state.b_noise)])
    return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in parts])


def unpack_stage1(theta: np.ndarray, template: Stage1State) -> Stage1State:
    out = template.copy()
    i = 0

    def take(k):
        nonlocal i
        v = theta[i:i + k]
        i += k
        return v

    for _, blk in _blocks(out):
        m, p = blk.m, blk.p
        lk = np.linalg.cholesky(blk.K)
        blk.mu_u = lk @ take(m)
        L = lk @ _chol_from_coords(take(m * (m + 1) // 2), m)
        blk.cov_u = L @ L.T
        blk.mu_sigma, lv = take(2)
        blk.mu_sigma = float(blk.mu_sigma)
        blk.v_sigma = float(np.exp(lv))
        blk.mu_ell = take(p).copy()
        blk.v_ell = np.exp(take(p))
    q = out.mu_delta.size
    if q:
        out.mu_delta = take(q).copy()
        L = _chol_from_coords(take(q * (q + 1) // 2), q)
        out.cov_delta = L @ L.T
    la, lb = take(2)
    out.a_noise, out.b_noise = float(np.exp(la)), float(np.exp(lb))
    return out


def chain_stage1(g: dict, state: Stage1State) -> np.ndarray:
    """Map a natural-parameter gradient to the packed coordinates."""
    parts = []
    for name, blk in _blocks(state):
        gb = g[name]
        lk = np.linalg.cholesky(blk.K)
        C = np.linalg.cholesky(_whiten(blk.cov_u, lk))
        parts += [lk.T @ gb["mu_u"], _chol_chain(lk.T @ gb["cov_u"] @ lk, C),
                  [gb["mu_sigma"], gb["v_sigma"] * blk.v_sigma],
                  gb["mu_ell"], gb["v_ell"] * blk.v_ell]
    if state.mu_delta.size:
        parts += [g["mu_delta"], _chol_chain(g["cov_delta"], np.linalg.cholesky(state.cov_delta))]
    parts.append([g["a_noise"] * state.a_noise, g["b_noise"] * state.b_noise])
    return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in parts])


def _add(g1, g2, w1=1.0):
    out = {}
    for k, v in g1.items():
        out[k] = _add(v, g2[k], w1) if isinstance(v, dict) else w1 * v + g2[k]
    return out


def stage1_packed_objective(data, priors, alpha, learning_rate, template):
    """(value, gradient) of the stage-1 objective in packed coordinates."""

    def f(theta):
        try:
            st = unpack_stage1(theta, template)
            val = stage1_objective(st, data, priors, alpha, learning_rate)
            g = _add(stage1_loss_grad(st, data), stage1_divergence_grad(st, priors, alpha), learning_rate)
            return val, chain_stage1(g, st)
        except (DivergenceError, np.linalg.LinAlgError, FloatingPointError):
            return np.inf, np.zeros_like(theta)

    return f


# -- coordinate ascent at alpha = 1 ------------------------------------------


def _solve_u(blk: SparseGPBlock, psi, psi1, y, c):
    K = blk.K
    A = K + c * psi1
    A = 0.5 * (A + A.T)
    cf = np.linalg.cholesky(A)
    kak = K @ np.linalg.solve(A, K)
    cov = 0.5 * (kak + kak.T)
    mu = c * K @ np.linalg.solve(cf.T, np.linalg.solve(cf, psi.T @ y))
    return mu, cov


def _residual_for(name, fit, data):
    """Target that block ``name`` must explain, with its sign applied."""
    if name == "a":
        return data.z - fit.mean["d"] - fit.mean["x"]
    if name == "d":
        return data.t_sign * (data.z - fit.mean["a"] - fit.mean["x"])
    return data.z - fit.mean["a"] - fit.mean["d"]


def _get_block(state, name):
    return state.gp_a if name == "a" else state.gp_d


def cavi_updates(data: ConfoundingData, priors: GPPriors, learning_rate: float = 1.0, ell_steps: int = 20):
    """Block updates ``state -> state`` for the alpha = 1 stage-1 objective."""
    lam = learning_rate
    n = data.z.size
    X = data.confounded.X_tilde

    def noise(state):
        st = state.copy()
        S = expected_sq_error(st, data)
        st.a_noise = priors.a0 + lam * n / 2
        st.b_noise = priors.b0 + lam * S / 2
        return st

    def u(name):
        def upd(state):
            st = state.copy()
            fit = _fit_parts(st, data)
            blk = _get_block(st, name)
            c = lam * st.a_noise / st.b_noise
            blk.mu_u, blk.cov_u = _solve_u(blk, fit.psi[name], fit.psi1[name], _residual_for(name, fit, data), c)
            return st
        return upd

    def delta(state):
        st = state.copy()
        if not st.mu_delta.size:
            return st
        fit = _fit_parts(st, data)
        c = lam * st.a_noise / st.b_noise
        xb = data.breve_c
        q = xb.shape[1]
        prec0 = np.eye(q) / priors.v_delta0
        prec = prec0 + c * xb.T @ xb
        cov = np.linalg.inv(prec)
        st.cov_delta = 0.5 * (cov + cov.T)
        st.mu_delta = st.cov_delta @ (prec0 @ np.full(q, priors.mu_delta0) + c * xb.T @ _residual_for("x", fit, data))
        return st

    def sigma(name):
        def upd(state):
            st = state.copy()
            fit = _fit_parts(st, data)
            blk = _get_block(st, name)
            h = blk.hyper
            ki = blk.Kinv
            psib = psi_cross(X, blk.inducing, h, unit_amplitude=True)
            psi1b = psi_quad(X, blk.inducing, h, unit_amplitude=True)
            P = blk.cov_u + np.outer(blk.mu_u, blk.mu_u)
            Q = n + np.sum((ki @ P @ ki - ki) * psi1b)
            hh = _residual_for(name, fit, data) @ (psib @ (ki @ blk.mu_u))
            c = lam * st.a_noise / st.b_noise
            blk.v_sigma = float(1.0 / (c * Q + 1.0 / blk.v_sigma0))
            blk.mu_sigma = float(c * hh * blk.v_sigma)
            return st
        return upd

    def ell(name):
        def upd(state):
            f0 = stage1_objective(state, data, priors, 1.0, lam)
            blk0 = _get_block(state, name)
            p = blk0.p

            def obj(x):
                st = state.copy()
                blk = _get_block(st, name)
                blk.mu_ell = x[:p].copy()
                blk.v_ell = np.exp(x[p:])
                try:
                    val = stage1_objective(st, data, priors, 1.0, lam)
                except (DivergenceError, np.linalg.LinAlgError):
                    return np.inf, np.zeros_like(x)
                gl = _ell_loss_grad(st, data, name)
                _, dm, dv = renyi_gaussian_1d(blk.mu_ell, blk.v_ell, blk.mu_ell0, blk.v_ell0, 1.0)
                g = np.concatenate([lam * gl["mu_ell"] + dm, (lam * gl["v_ell"] + dv) * blk.v_ell])
                return val, g

            x0 = np.concatenate([blk0.mu_ell, np.log(blk0.v_ell)])
            res = sopt.minimize(obj, x0, jac=True, method="L-BFGS-B", options={"maxiter": ell_steps})
            if not (np.isfinite(res.fun) and res.fun < f0):
                return state
            st = state.copy()
            blk = _get_block(st, name)
            blk.mu_ell = res.x[:p].copy()
            blk.v_ell = np.exp(res.x[p:])
            return st
        return upd

    return [noise, u("a"), u("d"), delta, noise, sigma("a"), sigma("d"), ell("a"), ell("d")]


def stage1_cavi_sweep(state: Stage1State, data, priors=GPPriors(), learning_rate=1.0) -> Stage1State:
    """One pass over all block updates (alpha = 1 only)."""
    for upd in cavi_updates(data, priors, learning_rate):
        state = upd(state)
    return state


@dataclass
class Stage1Config:
    M: int = 10
    warm_sweeps: int = 20
    polish_sweeps: int = 50
    sweep_tol: float = 1e-10
    max_iter: int = 3000
    gtol: float = 1e-6
    solver: str = "bfgs"  # "bfgs", "lbfgs" or "adam"
    adam_step: float = 1e-3


def _gradient_solve(data, priors, alpha, learning_rate, init, config):
    f = stage1_packed_objective(data, priors, alpha, learning_rate, init)
    x0 = pack_stage1(init)
    stop = StopRule(max_iter=config.max_iter, rel_tol=1e-12)
    if config.solver == "adam":
        rep = adam_minimize(f, x0, AdamState(step_size=config.adam_step), stop)
    else:
        rep = bfgs_minimize(f, x0, stop, gtol=config.gtol, method="L-BFGS-B" if config.solver == "lbfgs" else "BFGS")
    rep.final_params = unpack_stage1(np.asarray(rep.final_params), init)
    return rep


def fit_stage1_kl(data, priors=GPPriors(), config=Stage1Config(), learning_rate=1.0, init=None) -> SolveReport:
    """Stage-1 fit at alpha = 1.

    Coordinate ascent alone crawls along the ridge between the kernel
    amplitude and the inducing variables, so a few warm-up sweeps are followed
    by a joint quasi-Newton step and then by sweeps to a fixed point of every
    closed-form update.  Each phase can only lower the objective.
    """
    state = init if init is not None else initial_state(data, priors, config.M)
    updates = cavi_updates(data, priors, learning_rate)
    objective = lambda s: stage1_objective(s, data, priors, 1.0, learning_rate)
    warm = coordinate_descent(updates, objective, state,
                              StopRule(max_iter=config.warm_sweeps, rel_tol=config.sweep_tol, patience=1), slack=1e-8)
    mid = _gradient_solve(data, priors, 1.0, learning_rate, warm.final_params, config)
    start = mid.final_params if mid.final_objective <= warm.final_objective else warm.final_params
    final = coordinate_descent(updates, objective, start,
                               StopRule(max_iter=config.polish_sweeps, rel_tol=config.sweep_tol, patience=1),
                               slack=1e-8)
    final.objective_trace = warm.objective_trace + mid.objective_trace + final.objective_trace
    final.iterations_used += warm.iterations_used + mid.iterations_used
    return final


def fit_stage1(data, priors, alpha, learning_rate, init: Stage1State, config=Stage1Config()) -> SolveReport:
    """Gradient-based stage-1 fit for any alpha, started from ``init``."""
    return _gradient_solve(data, priors, alpha, learning_rate, init, config)


# ---------------------------------------------------------------------------
# Moments of omega on the unconfounded inputs
# ---------------------------------------------------------------------------


def _delta_contrast(state: Stage1State):
    """Mean and covariance of delta_1 - delta_0."""
    q = state.mu_delta.size // 2
    if q == 0:
        return np.zeros(0), np.zeros((0, 0))
    D = np.hstack([-np.eye(q), np.eye(q)])
    return D @ state.mu_delta, D @ state.cov_delta @ D.T


def d_moments(X, blk: SparseGPBlock):
    """Mean vector and full covariance of d(X) under q."""
    h = blk.hyper
    ki = blk.Kinv
    psi = psi_cross(X, blk.inducing, h)
    mean = psi @ (ki @ blk.mu_u)
    P = ki @ (blk.cov_u + np.outer(blk.mu_u, blk.mu_u)) @ ki - ki
    cov = expected_kernel(X, X, h) + psi_pair_contract(X, X, blk.inducing, h, P) - np.outer(mean, mean)
    return mean, 0.5 * (cov + cov.T)


def omega_moments(state: Stage1State, X_tilde, X_breve):
    """Mean and covariance of omega(x) = 2 d(x) + xb'(delta_1 - delta_0)."""
    md, vd = d_moments(np.atleast_2d(X_tilde), state.gp_d)
    mdel, vdel = _delta_contrast(state)
    xb = np.asarray(X_breve, dtype=float).reshape(md.size, -1)
    return 2 * md + xb @ mdel, 4 * vd + xb @ vdel @ xb.T


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------


@dataclass
class Stage2Problem:
    """Everything stage 2 needs from the frozen stage-1 fit and the RCT data."""

    X: np.ndarray
    w: np.ndarray
    m: np.ndarray  # E omega^u
    V: np.ndarray  # Cov omega^u
    mu0: np.ndarray
    Sigma0: np.ndarray
    lambda2_base: float
    Sigma_eta: np.ndarray = field(init=False)
    B: np.ndarray = field(init=False)

    def __post_init__(self):
        p = self.X.shape[1]
        prec = self.lambda2_base * self.X.T @ self.X + np.linalg.inv(self.Sigma0)
        se = np.linalg.inv(prec)
        self.Sigma_eta = 0.5 * (se + se.T)
        self.B = self.lambda2_base * self.Sigma_eta @ self.X.T
        if self.mu0.shape != (p,):
            raise ValueError("prior mean has the wrong length")

    @property
    def p(self):
        return self.X.shape[1]


@dataclass
class Stage2State:
    a_eta: np.ndarray
    Sigma_eta_q: np.ndarray
    Sigma_eta: np.ndarray
    B: np.ndarray
    m: np.ndarray
    V: np.ndarray

    def eta_marginal(self):
        """Mean and covariance of eta after integrating over q(phi)."""
        mean = self.a_eta - self.B @ self.m
        cov = self.Sigma_eta_q + self.B @ self.V @ self.B.T
        return mean, 0.5 * (cov + cov.T)


def stage2_problem(state1: Stage1State, data: ConfoundingData, lambda2_base: float,
                   priors: GPPriors = GPPriors()) -> Stage2Problem:
    s = data.unconfounded
    m, V = omega_moments(state1, s.X_tilde, s.X_breve)
    p = data.X_eta.shape[1]
    return Stage2Problem(data.X_eta, data.w, m, V, np.full(p, priors.mu_eta0), priors.v_eta0 * np.eye(p),
                         lambda2_base)


def stage2_loss(prob: Stage2Problem, a, Sq) -> float:
    """E_q ||w - omega^u - X eta||^2 / 2."""
    X = prob.X
    res = prob.w - X @ a
    H = np.eye(X.shape[0]) - X @ prob.B
    Hm = H @ prob.m
    return 0.5 * float(res @ res - 2 * res @ Hm + Hm @ Hm + np.sum((H.T @ H) * prob.V) + np.sum((X.T @ X) * Sq))


def stage2_loss_grad(prob: Stage2Problem, a, Sq):
    X = prob.X
    H = np.eye(X.shape[0]) - X @ prob.B
    ga = X.T @ X @ a - X.T @ prob.w + X.T @ (H @ prob.m)
    return ga, 0.5 * X.T @ X


def _stage2_div_parts(prob, a, Sq, alpha):
    e = a - prob.mu0 - prob.B @ prob.m
    BVB = prob.B @ prob.V @ prob.B.T
    return e, 0.5 * (BVB + BVB.T)


def _logdet(A):
    sign, ld = np.linalg.slogdet(A)
    if sign <= 0:
        raise DivergenceError("matrix is not positive definite")
    return ld


def stage2_divergence(prob: Stage2Problem, a, Sq, alpha) -> float:
    """E_{q(phi)} D_alpha(q(eta | phi) || p(eta))."""
    e, BVB = _stage2_div_parts(prob, a, Sq, alpha)
    S0 = prob.Sigma0
    p = prob.p
    if is_kl(alpha):
        s0i = np.linalg.inv(S0)
        return 0.5 * float(_logdet(S0) - _logdet(Sq) + np.sum(s0i * Sq) - p + e @ s0i @ e + np.sum(s0i * BVB))
    W = alpha * S0 + (1 - alpha) * Sq
    try:
        np.linalg.cholesky(W)
    except np.linalg.LinAlgError as exc:
        raise DivergenceError("alpha*Sigma0 + (1-alpha)*Sigma_q is not positive definite") from exc
    wi = np.linalg.inv(W)
    return float(alpha * _logdet(S0) / (2 * (alpha - 1)) - _logdet(Sq) / 2 + _logdet(W) / (2 * (1 - alpha))
                 + 0.5 * alpha * (e @ wi @ e + np.sum(wi * BVB)))


def stage2_divergence_grad(prob: Stage2Problem, a, Sq, alpha):
    e, BVB = _stage2_div_parts(prob, a, Sq, alpha)
    sqi = np.linalg.inv(Sq)
    if is_kl(alpha):
        s0i = np.linalg.inv(prob.Sigma0)
        return s0i @ e, 0.5 * (s0i - sqi)
    wi = np.linalg.inv(alpha * prob.Sigma0 + (1 - alpha) * Sq)
    gS = 0.5 * (wi - sqi - alpha * (1 - alpha) * wi @ (np.outer(e, e) + BVB) @ wi)
    return alpha * wi @ e, 0.5 * (gS + gS.T)


def stage2_closed_form(prob: Stage2Problem):
    """Exact alpha = 1 optimum at learning rate lambda2_base."""
    s0i = np.linalg.inv(prob.Sigma0)
    a = prob.Sigma_eta @ (s0i @ prob.mu0 + prob.lambda2_base * prob.X.T @ prob.w)
    return a, prob.Sigma_eta.copy()


def _stage2_packed(prob, alpha, lam):
    p = prob.p

    def f(theta):
        a = theta[:p]
        L = _chol_from_coords(theta[p:], p)
        Sq = L @ L.T
        try:
            val = lam * stage2_loss(prob, a, Sq) + stage2_divergence(prob, a, Sq, alpha)
        except (DivergenceError, np.linalg.LinAlgError):
            return np.inf, np.zeros_like(theta)
        la, lS = stage2_loss_grad(prob, a, Sq)
        da, dS = stage2_divergence_grad(prob, a, Sq, alpha)
        return val, np.concatenate([lam * la + da, _chol_chain(lam * lS + dS, L)])

    return f


def stage2_fit(prob: Stage2Problem, lambda2: float, alpha: float, init=None, solver: str = "auto") -> tuple:
    """Minimise lambda2 * E loss + E D_alpha over (a_eta, Sigma_eta_q).

    At alpha = 1 the default solver is coordinate descent with the exact block
    minimisers; otherwise BFGS on (a, log-Cholesky of Sigma_q).
    Returns (Stage2State, SolveReport).
    """
    p = prob.p
    if init is None:
        init = stage2_closed_form(prob)
    if solver == "auto":
        solver = "cd" if is_kl(alpha) else "bfgs"
    if solver == "cd":
        if not is_kl(alpha):
            raise ValueError("coordinate descent is only available at alpha = 1")
        s0i = np.linalg.inv(prob.Sigma0)
        X = prob.X
        H = np.eye(X.shape[0]) - X @ prob.B
        prec = lambda2 * X.T @ X + s0i

        def upd_a(st):
            a, Sq = st
            rhs = lambda2 * (X.T @ prob.w - X.T @ (H @ prob.m)) + s0i @ (prob.mu0 + prob.B @ prob.m)
            return np.linalg.solve(prec, rhs), Sq

        def upd_S(st):
            Sq = np.linalg.inv(prec)
            return st[0], 0.5 * (Sq + Sq.T)

        rep = coordinate_descent(
            [upd_a, upd_S],
            lambda st: lambda2 * stage2_loss(prob, *st) + stage2_divergence(prob, *st, alpha),
            (np.asarray(init[0], dtype=float), np.asarray(init[1], dtype=float)),
            slack=1e-10,
        )
        a, Sq = rep.final_params
    else:
        f = _stage2_packed(prob, alpha, lambda2)
        x0 = np.concatenate([np.asarray(init[0], dtype=float), _chol_coords(np.asarray(init[1], dtype=float))])
        rep = bfgs_minimize(f, x0, StopRule(max_iter=5000), gtol=1e-10,
                            method="BFGS" if solver == "bfgs" else "L-BFGS-B")
        a = rep.final_params[:p]
        L = _chol_from_coords(rep.final_params[p:], p)
        Sq = L @ L.T
    st = Stage2State(np.asarray(a), Sq, prob.Sigma_eta, prob.B, prob.m, prob.V)
    return st, rep


def stage2_lambda_base(state1: Stage1State, data: ConfoundingData, priors: GPPriors = GPPriors()) -> float:
    """Method-of-moments lambda_2 from stage-1 posterior means and penalised least squares."""
    s = data.unconfounded
    m, _ = omega_moments(state1, s.X_tilde, s.X_breve)
    X = data.X_eta
    y = data.w - m
    p = X.shape[1]
    pen = np.eye(p) / priors.v_eta0
    eta = np.linalg.solve(X.T @ X + pen, X.T @ y + pen @ np.full(p, priors.mu_eta0))
    return dispersion_learning_rate(y - X @ eta, y.size, p)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def _block_point_moments(X, blk):
    h = blk.hyper
    ki = blk.Kinv
    psi = psi_cross(X, blk.inducing, h)
    mean = psi @ (ki @ blk.mu_u)
    P = ki @ (blk.cov_u + np.outer(blk.mu_u, blk.mu_u)) @ ki - ki
    var = np.array([h.e_sigma2 + np.sum(psi_quad(X[i:i + 1], blk.inducing, h) * P) for i in range(X.shape[0])])
    return mean, var - mean**2


def predict(state1: Stage1State, state2: Stage2State, data: ConfoundingData, x_star, xb_star=None,
            x_eta_star=None, T_star=None, n_draws: int = 1000, rng=None) -> dict:
    """Predictive summaries of omega, tau = omega + c_f and (optionally) z at new inputs.

    tau draws are joint over (d(x*), d(X^u), delta, eta) so the dependence of
    the eta correction on omega^u is carried through.
    """
    x_star = np.asarray(x_star, dtype=float)
    if x_star.ndim == 1:
        x_star = x_star[:, None]
    ns = x_star.shape[0]
    p2 = data.confounded.X_breve.shape[1]
    xb_star = np.zeros((ns, p2)) if xb_star is None else np.asarray(xb_star, dtype=float).reshape(ns, p2)
    if x_eta_star is None:
        x_eta_star = np.hstack([x_star, xb_star])
    x_eta_star = np.asarray(x_eta_star, dtype=float).reshape(ns, -1)
    mdel, vdel = _delta_contrast(state1)

    md, vd = _block_point_moments(x_star, state1.gp_d)
    omega_mean = 2 * md + xb_star @ mdel
    omega_var = 4 * vd + np.einsum("ij,jk,ik->i", xb_star, vdel, xb_star)
    eta_mean, _ = state2.eta_marginal()
    out = {"omega_mean": omega_mean, "omega_var": omega_var, "tau_mean": omega_mean + x_eta_star @ eta_mean}

    if n_draws:
        rng = np.random.default_rng(rng)
        s = data.unconfounded
        joint = sample_function(np.vstack([x_star, s.X_tilde]), state1.gp_d, n_draws, rng)
        d_star, d_u = joint[:, :ns], joint[:, ns:]
        if mdel.size:
            ddel = rng.multivariate_normal(mdel, vdel, size=n_draws)
        else:
            ddel = np.zeros((n_draws, 0))
        omega_star = 2 * d_star + ddel @ xb_star.T
        omega_u = 2 * d_u + ddel @ s.X_breve.T
        L = np.linalg.cholesky(state2.Sigma_eta_q)
        eta = state2.a_eta[None, :] - omega_u @ state2.B.T + rng.standard_normal((n_draws, L.shape[0])) @ L.T
        out["omega_draws"] = omega_star
        out["eta_draws"] = eta
        out["tau_draws"] = omega_star + eta @ x_eta_star.T

    if T_star is not None:
        if state1.a_noise <= 1:
            raise ValueError("a_noise <= 1: predictive noise variance is undefined")
        T_star = np.asarray(T_star, dtype=float).reshape(ns)
        ma, va = _block_point_moments(x_star, state1.gp_a)
        sg = 2 * T_star - 1
        xbc = np.hstack([(1 - T_star)[:, None] * xb_star, T_star[:, None] * xb_star])
        out["z_mean"] = ma + sg * md + xbc @ state1.mu_delta
        out["z_var"] = (va + vd + np.einsum("ij,jk,ik->i", xbc, state1.cov_delta, xbc)
                        + state1.b_noise / (state1.a_noise - 1))
    return out


# ---------------------------------------------------------------------------
# Simulation study
# ---------------------------------------------------------------------------


def true_tau(x):
    x = np.asarray(x, dtype=float)
    return 1 + 2 * x + 0.75 * x**2


def true_omega(x):
    x = np.asarray(x, dtype=float)
    return 1 + 3 * x + 0.75 * x**2


TRUE_ETA = -1.0


def _outcome(rng, x, t, u):
    return 1 + t + x + 2 * t * x + 0.5 * x**2 + 0.75 * t * x**2 + u + 0.5 * rng.standard_normal(x.size)


def simulate_kallus(seed, n1: int = 1000, n2: int = 100):
    """Confounded and randomised samples from the hidden-confounder design.

    Returns (ConfoundingData, truth) where truth holds callables ``tau`` and
    ``omega`` and the true ``eta``.
    """
    rng = np.random.default_rng(seed)
    t = rng.binomial(1, 0.5, n1).astype(float)
    c = t - 0.5
    z1 = rng.standard_normal(n1)
    z2 = rng.standard_normal(n1)
    x = z1
    u = c * z1 + np.sqrt(1 - c * c) * z2
    y = _outcome(rng, x, t, u)
    tu = rng.binomial(1, 0.5, n2).astype(float)
    xu = rng.uniform(-1, 1, n2)
    uu = rng.standard_normal(n2)
    yu = _outcome(rng, xu, tu, uu)
    data = ConfoundingData(Sample(x[:, None], None, t, y), Sample(xu[:, None], None, tu, yu), 0.5)
    return data, {"tau": true_tau, "omega": true_omega, "eta": TRUE_ETA}


@dataclass
class GPStudyConfig:
    alphas: tuple = (0.01, 0.05, 0.25, 0.999, 2.5)
    replications: int = 50
    n1: int = 1000
    n2: int = 100
    M: int = 10
    seed: int = 2024
    draws: int = 1000
    grid_lo: float = -2.0
    grid_hi: float = 2.0
    grid_n: int = 41
    max_iter: int = 3000
    solver: str = "bfgs"
    threads: int = 1


GP_TABLE_COLUMNS = ["alpha", "lambda1_mean", "lambda1_sd", "lambda2_mean", "lambda2_sd",
                    "eta_mean", "eta_rmse", "eta_coverage", "replications", "failures"]
GP_GRID_COLUMNS = ["alpha", "x", "rmse_omega", "rmse_tau", "cover_omega", "cover_tau"]


@dataclass
class AlphaFit:
    alpha: float
    lambda1: float
    lambda2: float
    state1: Stage1State
    state2: Stage2State
    warnings: list = field(default_factory=list)


def fit_all_alphas(data: ConfoundingData, alphas, priors=GPPriors(), config: Stage1Config = Stage1Config()):
    """KL fit, learning-rate calibration, then the alpha-specific fits for every order.

    Learning rates are matched at the KL solution:
    lambda^alpha = D_alpha(q_KL || p) / KL(q_KL || p) * lambda^1.
    """
    rep_kl = fit_stage1_kl(data, priors, config)
    s1_kl = rep_kl.final_params
    lam2_base = stage2_lambda_base(s1_kl, data, priors)
    prob_kl = stage2_problem(s1_kl, data, lam2_base, priors)
    a_kl, S_kl = stage2_closed_form(prob_kl)
    kl1 = stage1_divergence(s1_kl, priors, 1.0)
    kl2 = stage2_divergence(prob_kl, a_kl, S_kl, 1.0)
    fits = []
    for alpha in alphas:
        notes = []
        lam1 = stage1_divergence(s1_kl, priors, alpha) / kl1
        lam2 = stage2_divergence(prob_kl, a_kl, S_kl, alpha) / kl2 * lam2_base
        if is_kl(alpha):
            s1 = s1_kl
        else:
            rep = fit_stage1(data, priors, alpha, lam1, s1_kl, config)
            if rep.error:
                notes.append(f"stage 1: {rep.error}")
            s1 = rep.final_params
        prob = prob_kl if s1 is s1_kl else stage2_problem(s1, data, lam2_base, priors)
        s2, rep2 = stage2_fit(prob, lam2, alpha, init=(a_kl, S_kl))
        if rep2.error:
            notes.append(f"stage 2: {rep2.error}")
        fits.append(AlphaFit(alpha, lam1, lam2, s1, s2, notes))
    return fits


def _one_replication(args):
    rep, cfg = args
    data, truth = simulate_kallus([cfg.seed, rep], cfg.n1, cfg.n2)
    grid = np.linspace(cfg.grid_lo, cfg.grid_hi, cfg.grid_n)
    s1cfg = Stage1Config(M=cfg.M, max_iter=cfg.max_iter, solver=cfg.solver)
    try:
        fits = fit_all_alphas(data, cfg.alphas, GPPriors(), s1cfg)
    except (SolverError, np.linalg.LinAlgError, DivergenceError, ValueError) as exc:
        return rep, None, str(exc)
    rows = []
    rng = np.random.default_rng([cfg.seed, rep, 1])
    for f in fits:
        pr = predict(f.state1, f.state2, data, grid[:, None], n_draws=cfg.draws, rng=rng)
        eta_mean, _ = f.state2.eta_marginal()
        eta_lo, eta_hi = np.quantile(pr["eta_draws"][:, 0], [0.025, 0.975])
        om_lo, om_hi = np.quantile(pr["omega_draws"], [0.025, 0.975], axis=0)
        tau_lo, tau_hi = np.quantile(pr["tau_draws"], [0.025, 0.975], axis=0)
        om_t, tau_t = truth["omega"](grid), truth["tau"](grid)
        rows.append({
            "alpha": f.alpha, "lambda1": f.lambda1, "lambda2": f.lambda2, "eta_mean": float(eta_mean[0]),
            "eta_cover": bool(eta_lo <= truth["eta"] <= eta_hi),
            "omega_err": pr["omega_mean"] - om_t, "tau_err": pr["tau_mean"] - tau_t,
            "omega_cover": (om_lo <= om_t) & (om_t <= om_hi), "tau_cover": (tau_lo <= tau_t) & (tau_t <= tau_hi),
        })
    return rep, rows, None


def run_gp_study(config: GPStudyConfig = GPStudyConfig()):
    """Simulation study over replications and orders.

    Returns (table, grid) ReplicationReports with GP_TABLE_COLUMNS and
    GP_GRID_COLUMNS.
    """
    jobs = [(r, config) for r in range(config.replications)]
    if config.threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(config.threads) as ex:
            results = list(ex.map(_one_replication, jobs))
    else:
        results = [_one_replication(j) for j in jobs]
    results.sort(key=lambda t: t[0])
    ok = [rows for _, rows, err in results if rows is not None]
    failures = sum(1 for _, rows, _ in results if rows is None)
    cfg_dict = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(config).items()}
    table = ReplicationReport(GP_TABLE_COLUMNS, config=cfg_dict, seed=config.seed)
    grid_rep = ReplicationReport(GP_GRID_COLUMNS, config=cfg_dict, seed=config.seed)
    grid = np.linspace(config.grid_lo, config.grid_hi, config.grid_n)
    for k, alpha in enumerate(config.alphas):
        rs = [rows[k] for rows in ok]
        if not rs:
            table.add(alpha=alpha, replications=0, failures=failures)
            continue
        l1 = np.array([r["lambda1"] for r in rs])
        l2 = np.array([r["lambda2"] for r in rs])
        em = np.array([r["eta_mean"] for r in rs])
        sd = (lambda v: float(v.std(ddof=1)) if v.size > 1 else 0.0)
        table.add(alpha=alpha, lambda1_mean=float(l1.mean()), lambda1_sd=sd(l1), lambda2_mean=float(l2.mean()),
                  lambda2_sd=sd(l2), eta_mean=float(em.mean()), eta_rmse=float(np.sqrt(np.mean((em - TRUE_ETA) ** 2))),
                  eta_coverage=float(np.mean([r["eta_cover"] for r in rs])), replications=len(rs), failures=failures)
        oe = np.array([r["omega_err"] for r in rs])
        te = np.array([r["tau_err"] for r in rs])
        oc = np.array([r["omega_cover"] for r in rs], dtype=float)
        tc = np.array([r["tau_cover"] for r in rs], dtype=float)
        for j, x in enumerate(grid):
            grid_rep.add(alpha=alpha, x=float(x), rmse_omega=float(np.sqrt(np.mean(oe[:, j] ** 2))),
                         rmse_tau=float(np.sqrt(np.mean(te[:, j] ** 2))), cover_omega=float(oc[:, j].mean()),
                         cover_tau=float(tc[:, j].mean()))
    return table, grid_rep


# ---------------------------------------------------------------------------
# STAR-schema ingestion
# ---------------------------------------------------------------------------

STAR_COLUMNS = ("listening", "reading", "math", "small_class", "age", "gender", "race", "free_lunch",
                "teacher_id", "rural")
STAR_CATEGORICAL = ("gender", "race", "free_lunch", "teacher_id")


@dataclass
class StarIngest:
    data: ConfoundingData
    dropped_rows: int
    breve_names: list


def _dummies(values, levels):
    return np.array([[v == lev for lev in levels[1:]] for v in values], dtype=float).reshape(len(values), -1)


def ingest_star_csv(path, gamma: float, seed) -> StarIngest:
    """Build confounded/unconfounded samples from a STAR-style CSV.

    Columns: listening, reading, math (scores summed into the outcome),
    small_class (0/1 treatment), age (continuous), gender, race, free_lunch,
    teacher_id (categorical, dummy coded with the first sorted level dropped)
    and rural (0/1, used only to build the split).  Rows with an empty field
    are dropped and counted.

    A random fraction ``gamma`` of rural students forms the unconfounded
    sample.  The confounded sample holds every remaining control student and
    the remaining treated students whose outcome is below the median of
    remaining treated students in the same (rural or urban) location.  The
    held-out sample is everything outside the unconfounded sample.
    """
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in STAR_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"missing columns: {missing}")
        rows, dropped = [], 0
        for row in reader:
            if any(row[c] is None or row[c].strip() == "" for c in STAR_COLUMNS):
                dropped += 1
                continue
            rows.append({c: row[c].strip() for c in STAR_COLUMNS})
    if not rows:
        raise ValueError("no complete rows")
    y = np.array([float(r["listening"]) + float(r["reading"]) + float(r["math"]) for r in rows])
    t = np.array([float(r["small_class"]) for r in rows])
    age = np.array([float(r["age"]) for r in rows])
    rural = np.array([float(r["rural"]) for r in rows]) == 1
    blocks, names = [], []
    for c in STAR_CATEGORICAL:
        vals = [r[c] for r in rows]
        levels = sorted(set(vals))
        blocks.append(_dummies(vals, levels))
        names += [f"{c}={lev}" for lev in levels[1:]]
    xb = np.hstack(blocks) if blocks else np.zeros((len(rows), 0))

    rng = np.random.default_rng(seed)
    rural_idx = np.flatnonzero(rural)
    k = int(round(gamma * rural_idx.size))
    if k < 1:
        raise ValueError("gamma selects no rural students")
    unc = np.zeros(len(rows), dtype=bool)
    unc[rng.choice(rural_idx, size=k, replace=False)] = True
    conf = (~unc) & (t == 0)
    for loc in (rural, ~rural):
        treated = (~unc) & (t == 1) & loc
        if treated.any():
            conf |= treated & (y < np.median(y[treated]))
    e = float(t.mean())

    def sample(mask):
        return Sample(age[mask][:, None], xb[mask], t[mask], y[mask])

    data = ConfoundingData(sample(conf), sample(unc), e, heldout=sample(~unc))
    return StarIngest(data, dropped, names)


STAR_TABLE_COLUMNS = ["alpha", "lambda1", "lambda2", "tau_rmse", "tau_coverage", "n_confounded",
                      "n_unconfounded", "n_heldout"]


def run_star(data: ConfoundingData, alphas, M=10, draws=1000, seed=0, config: Stage1Config | None = None):
    """Fit every order and score tau predictions against held-out pseudo-outcomes."""
    config = config or Stage1Config(M=M)
    fits = fit_all_alphas(data, alphas, GPPriors(), config)
    h = data.heldout
    target = signed_reweight(h.Y, h.T, data.propensity)
    table = ReplicationReport(STAR_TABLE_COLUMNS, seed=seed)
    rng = np.random.default_rng(seed)
    for f in fits:
        pr = predict(f.state1, f.state2, data, h.X_tilde, h.X_breve, n_draws=draws, rng=rng)
        lo, hi = np.quantile(pr["tau_draws"], [0.025, 0.975], axis=0)
        table.add(alpha=f.alpha, lambda1=f.lambda1, lambda2=f.lambda2,
                  tau_rmse=float(np.sqrt(np.mean((pr["tau_mean"] - target) ** 2))),
                  tau_coverage=float(np.mean((lo <= target) & (target <= hi))),
                  n_confounded=data.confounded.n, n_unconfounded=data.unconfounded.n, n_heldout=h.n)
    return table
