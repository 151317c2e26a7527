"""Sparse GP pieces shared by the confounding and copula models.

The latent function is f(x) = sigma * s(D x) where s is a standardised GP
with kernel k_s(h) = exp(-h'h/2), D = diag(ell), and the inducing variables
u = s(r) have the fixed prior N(0, K_u).  Variational factors are
q(sigma) = N(mu_sigma, v_sigma) and q(ell_k) = N(mu_ell_k, v_ell_k).

Psi statistics are expectations of kernel products under q(sigma) q(ell).
Each has a companion vector-Jacobian product (``*_vjp``) that returns the
gradient of <G, Psi> in the variational hyperparameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

JITTER = 1e-8


def gauss_quad_expect(A, B, C, mu, v):
    """E exp{-(A l^2 - 2 B l + C)/2} for l ~ N(mu, v), elementwise."""
    s = 1.0 + A * v
    return np.exp(-0.5 * (C + (mu * mu * A - B * B * v - 2 * B * mu) / s)) / np.sqrt(s)


def kernel_std(x1, x2):
    d = x1[:, None, :] - x2[None, :, :]
    return np.exp(-0.5 * np.sum(d * d, axis=-1))


def inducing_kernel(r, jitter=JITTER):
    return kernel_std(r, r) + jitter * np.eye(r.shape[0])


def regular_inducing(x, m):
    """m regularly spaced points per dimension over the range of x (a grid for p > 1)."""
    x = np.atleast_2d(x)
    axes = [np.linspace(x[:, k].min(), x[:, k].max(), m) for k in range(x.shape[1])]
    if len(axes) == 1:
        return axes[0][:, None]
    return np.array(np.meshgrid(*axes, indexing="ij")).reshape(len(axes), -1).T


@dataclass
class HyperPosterior:
    """q(sigma) and q(ell) moments."""

    mu_sigma: float
    v_sigma: float
    mu_ell: np.ndarray
    v_ell: np.ndarray

    @property
    def e_sigma2(self):
        return self.mu_sigma**2 + self.v_sigma


@dataclass
class SparseGPBlock:
    """Inducing inputs plus the variational state of one sparse GP."""

    inducing: np.ndarray
    mu_u: np.ndarray
    cov_u: np.ndarray
    mu_sigma: float
    v_sigma: float
    mu_ell: np.ndarray
    v_ell: np.ndarray
    v_sigma0: float = 100.0
    mu_ell0: float = 1.0
    v_ell0: float = 100.0
    jitter: float = JITTER
    _k: np.ndarray | None = field(default=None, repr=False, compare=False)
    _kinv: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def initial(cls, inducing, mu_sigma=1.0, v_sigma=0.1, mu_ell=1.0, v_ell=0.01, **priors):
        inducing = np.atleast_2d(np.asarray(inducing, dtype=float))
        if inducing.shape[0] == 1 and inducing.shape[1] > 1:
            inducing = inducing.T
        m, p = inducing.shape
        k = inducing_kernel(inducing, priors.get("jitter", JITTER))
        return cls(inducing, np.zeros(m), k.copy(), float(mu_sigma), float(v_sigma),
                   np.full(p, float(mu_ell)), np.full(p, float(v_ell)), **priors)

    @property
    def m(self):
        return self.inducing.shape[0]

    @property
    def p(self):
        return self.inducing.shape[1]

    @property
    def K(self):
        if self._k is None:
            self._k = inducing_kernel(self.inducing, self.jitter)
        return self._k

    @property
    def Kinv(self):
        if self._kinv is None:
            self._kinv = np.linalg.inv(self.K)
            self._kinv = 0.5 * (self._kinv + self._kinv.T)
        return self._kinv

    @property
    def hyper(self):
        return HyperPosterior(self.mu_sigma, self.v_sigma, self.mu_ell, self.v_ell)

    def copy(self):
        return SparseGPBlock(
            self.inducing, self.mu_u.copy(), self.cov_u.copy(), self.mu_sigma, self.v_sigma,
            self.mu_ell.copy(), self.v_ell.copy(), self.v_sigma0, self.mu_ell0, self.v_ell0,
            self.jitter, self._k, self._kinv,
        )


# ---------------------------------------------------------------------------
# Psi statistics
# ---------------------------------------------------------------------------


_CACHE: dict = {}
_CACHE_SIZE = 8


def _cached(kind, X, r, mu_ell, v_ell, fn):
    # objective and gradient are evaluated at the same point in a row, so a
    # tiny cache on the exact inputs removes the duplicate work
    key = (kind, X.shape, X.tobytes(), r.tobytes(), np.asarray(mu_ell).tobytes(), np.asarray(v_ell).tobytes())
    hit = _CACHE.get(key)
    if hit is None:
        hit = fn(X, r, mu_ell, v_ell)
        if len(_CACHE) >= _CACHE_SIZE:
            _CACHE.pop(next(iter(_CACHE)))
        _CACHE[key] = hit
    return hit


def _cross_parts(X, r, mu_ell, v_ell):
    return _cached("cross", np.atleast_2d(X), r, mu_ell, v_ell, _cross_parts_raw)


def _cross_parts_raw(X, r, mu_ell, v_ell):
    s = 1.0 + v_ell[None, :] * X * X  # n x p
    diff = X[:, None, :] * mu_ell[None, None, :] - r[None, :, :]  # n x M x p
    e = np.exp(-0.5 * np.sum(diff * diff / s[:, None, :], axis=-1)) / np.prod(np.sqrt(s), axis=1)[:, None]
    return s, diff, e


def psi_cross(X, r, hyper: HyperPosterior, unit_amplitude=False):
    """E_q[K_{f,u}] (n x M); with ``unit_amplitude`` the mu_sigma factor is dropped."""
    _, _, e = _cross_parts(X, r, hyper.mu_ell, hyper.v_ell)
    return e.copy() if unit_amplitude else hyper.mu_sigma * e


def psi_cross_vjp(X, r, hyper: HyperPosterior, G):
    """Gradients of sum(G * Psi_cross) in (mu_sigma, mu_ell, v_ell)."""
    X = np.atleast_2d(X)
    s, diff, e = _cross_parts(X, r, hyper.mu_ell, hyper.v_ell)
    ge = G * e
    d_mu_sigma = float(np.sum(ge))
    ge = hyper.mu_sigma * ge
    # dPsi/dmu_ell_k = Psi (r - X mu) X / s ; dPsi/dv_ell_k = Psi X^2/(2s) ((r - X mu)^2/s - 1)
    xs = X / s
    d_mu = -np.einsum("ij,ijk,ik->k", ge, diff, xs)
    d_v = 0.5 * np.einsum("ij,ijk,ik->k", ge, diff * diff / s[:, None, :] - 1.0, X * xs)
    return d_mu_sigma, d_mu, d_v


def _quad_parts(X, r, mu_ell, v_ell):
    return _cached("quad", np.atleast_2d(X), r, mu_ell, v_ell, _quad_parts_raw)


def _quad_parts_raw(X, r, mu_ell, v_ell):
    t = 1.0 + 2.0 * v_ell[None, :] * X * X  # n x p
    c = 0.5 * (r[:, None, :] + r[None, :, :])  # M x M x p
    dr = r[:, None, :] - r[None, :, :]
    pre = np.exp(-0.25 * np.sum(dr * dr, axis=-1))  # M x M
    diff = X[:, None, None, :] * mu_ell - c[None]  # n x M x M x p
    term = np.exp(-np.sum(diff * diff / t[:, None, None, :], axis=-1)) / np.prod(np.sqrt(t), axis=1)[:, None, None]
    return t, diff, pre, term


def psi_quad(X, r, hyper: HyperPosterior, weights=None, unit_amplitude=False):
    """E_q[K_{u,f} W K_{f,u}] (M x M) with W = diag(weights), default identity."""
    _, _, pre, term = _quad_parts(X, r, hyper.mu_ell, hyper.v_ell)
    w = np.ones(term.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    out = pre * np.einsum("k,kij->ij", w, term)
    return out if unit_amplitude else hyper.e_sigma2 * out


def psi_quad_vjp(X, r, hyper: HyperPosterior, G, weights=None):
    """Gradients of sum(G * Psi_quad) in (mu_sigma, v_sigma, mu_ell, v_ell, weights)."""
    X = np.atleast_2d(X)
    t, diff, pre, term = _quad_parts(X, r, hyper.mu_ell, hyper.v_ell)
    w = np.ones(term.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    gp = G * pre  # M x M
    per_row = np.einsum("ij,kij->k", gp, term)  # derivative in weights / e_sigma2
    base = float(w @ per_row)
    d_mu_sigma = 2 * hyper.mu_sigma * base
    d_v_sigma = base
    es2 = hyper.e_sigma2
    wt = (w[:, None, None] * term) * gp[None]  # n x M x M
    xt = X / t
    d_mu = -2.0 * es2 * np.einsum("kij,kijw,kw->w", wt, diff, xt)
    d_v = es2 * np.einsum("kij,kijw,kw->w", wt, 2 * diff * diff / t[:, None, None, :] - 1.0, X * xt)
    d_w = es2 * per_row
    return d_mu_sigma, d_v_sigma, d_mu, d_v, d_w


def psi_pair_contract(X1, X2, r, hyper: HyperPosterior, P):
    """E_q[K_{x1,u} P K_{u,x2}] for all pairs (n1 x n2) with P an M x M matrix."""
    X1 = np.atleast_2d(X1)
    X2 = np.atleast_2d(X2)
    out = np.full((X1.shape[0], X2.shape[0], r.shape[0], r.shape[0]), hyper.e_sigma2)
    for k in range(r.shape[1]):
        a1 = X1[:, k][:, None, None, None]
        a2 = X2[:, k][None, :, None, None]
        r1 = r[:, k][None, None, :, None]
        r2 = r[:, k][None, None, None, :]
        out = out * gauss_quad_expect(a1 * a1 + a2 * a2, a1 * r1 + a2 * r2, r1 * r1 + r2 * r2,
                                      hyper.mu_ell[k], hyper.v_ell[k])
    return np.einsum("abij,ij->ab", out, P)


def expected_kernel(X1, X2, hyper: HyperPosterior):
    """E_q[sigma^2 k_s(D x1 - D x2)] for all pairs."""
    X1 = np.atleast_2d(X1)
    X2 = np.atleast_2d(X2)
    out = np.full((X1.shape[0], X2.shape[0]), hyper.e_sigma2)
    for k in range(X1.shape[1]):
        h = X1[:, k][:, None] - X2[:, k][None, :]
        out = out * gauss_quad_expect(h * h, 0.0, 0.0, hyper.mu_ell[k], hyper.v_ell[k])
    return out


def predictive_moments(X, block: SparseGPBlock, full_cov=False):
    """Mean and (co)variance of f(X) under p(f | u, sigma, ell) q(u) q(sigma) q(ell)."""
    hyper = block.hyper
    kinv = block.Kinv
    psi = psi_cross(X, block.inducing, hyper)
    mean = psi @ (kinv @ block.mu_u)
    P = kinv @ (block.cov_u + np.outer(block.mu_u, block.mu_u)) @ kinv - kinv
    if full_cov:
        cov = expected_kernel(X, X, hyper) + psi_pair_contract(X, X, block.inducing, hyper, P) - np.outer(mean, mean)
        return mean, 0.5 * (cov + cov.T)
    X = np.atleast_2d(X)
    var = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        q1 = psi_quad(X[i:i + 1], block.inducing, hyper)
        var[i] = hyper.e_sigma2 + np.sum(q1 * P) - mean[i] ** 2
    return mean, var


def sample_function(X, block: SparseGPBlock, n_draws, rng):
    """Joint draws of f(X) from the variational predictive (n_draws x n)."""
    X = np.atleast_2d(X)
    kinv = block.Kinv
    lu = np.linalg.cholesky(block.cov_u + 1e-12 * np.eye(block.m))
    out = np.empty((n_draws, X.shape[0]))
    for t in range(n_draws):
        sig = rng.normal(block.mu_sigma, np.sqrt(block.v_sigma))
        ell = rng.normal(block.mu_ell, np.sqrt(block.v_ell))
        u = block.mu_u + lu @ rng.standard_normal(block.m)
        kx = sig * kernel_std(X * ell, block.inducing)
        kxx = sig * sig * kernel_std(X * ell, X * ell)
        a = kx @ kinv
        cov = kxx - a @ kx.T
        cov = 0.5 * (cov + cov.T) + 1e-10 * np.eye(X.shape[0])
        w, V = np.linalg.eigh(cov)
        z = V @ (np.sqrt(np.clip(w, 0, None)) * rng.standard_normal(X.shape[0]))
        out[t] = a @ u + z
    return out
