"""Closed-form Renyi alpha-divergences and their KL limits.

Every function returns D_alpha(q || p) for a pair of distributions from the
same family.  Orders with ``|alpha - 1| < ALPHA_ONE_TOL`` are routed to the
Kullback-Leibler branch.

Gradients are taken with respect to the parameters of ``q`` only, since the
reference ``p`` is always a fixed prior in the OCCP objectives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, special

ALPHA_ONE_TOL = 1e-9


class DivergenceError(ValueError):
    """Raised when a divergence is undefined for the supplied arguments."""


def is_kl(alpha: float) -> bool:
    return abs(alpha - 1.0) < ALPHA_ONE_TOL


def _check_alpha(alpha: float) -> None:
    if not (np.isfinite(alpha) and alpha > 0):
        raise DivergenceError(f"alpha must be positive and finite, got {alpha}")


def vech(a: np.ndarray) -> np.ndarray:
    """Stack the lower triangle of a square matrix row by row."""
    return a[np.tril_indices(a.shape[0])]


def unvech(v: np.ndarray, d: int) -> np.ndarray:
    out = np.zeros((d, d))
    out[np.tril_indices(d)] = v
    return out


def log_cosh(x):
    """Overflow-free log(cosh(x))."""
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0)


# ---------------------------------------------------------------------------
# Distribution records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianDist:
    """Multivariate normal stored through a lower-triangular covariance factor."""

    mean: np.ndarray
    cov_factor: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        factor = np.atleast_2d(np.asarray(self.cov_factor, dtype=float))
        d = mean.shape[0]
        if d < 1 or factor.shape != (d, d):
            raise DivergenceError("cov_factor must be d x d with d = len(mean)")
        factor = np.tril(factor)
        # a factor with negative diagonal entries gives the same covariance
        signs = np.where(np.diag(factor) < 0, -1.0, 1.0)
        factor = factor * signs[None, :]
        if not np.all(np.diag(factor) > 0):
            raise DivergenceError("covariance factor must have a positive diagonal")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov_factor", factor)

    @classmethod
    def from_cov(cls, mean, cov) -> "GaussianDist":
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        try:
            factor = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise DivergenceError("covariance is not positive definite") from exc
        return cls(mean, factor)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def cov(self) -> np.ndarray:
        return self.cov_factor @ self.cov_factor.T

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.cov_factor))))

    def logpdf(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.dim == 1 and x.shape[0] == 1 and x.shape[1] != 1:
            x = x.T
        r = np.linalg.solve(self.cov_factor, (x - self.mean).T)
        return -0.5 * (np.sum(r * r, axis=0) + self.dim * np.log(2 * np.pi) + self.logdet())


@dataclass(frozen=True)
class InvGammaDist:
    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise DivergenceError("inverse gamma shape and rate must be positive")

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        a, b = self.shape, self.rate
        return a * np.log(b) - special.gammaln(a) - (a + 1) * np.log(x) - b / x


@dataclass(frozen=True)
class PolyaGammaDist:
    shape: float
    tilt: float = 0.0

    def __post_init__(self):
        if not self.shape > 0:
            raise DivergenceError("Polya-Gamma shape must be positive")
        if not self.tilt >= 0:
            raise DivergenceError("Polya-Gamma tilt must be nonnegative")


@dataclass(frozen=True)
class ExpFamSpec:
    natural_params: np.ndarray
    log_partition: Callable[[np.ndarray], float]
    log_partition_grad: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GaussianGrad:
    mean: np.ndarray
    cov_factor: np.ndarray  # gradient in vech(C)
    cov: np.ndarray  # symmetric gradient in Sigma


# ---------------------------------------------------------------------------
# Gaussian
# ---------------------------------------------------------------------------


def _gaussian_parts(q: GaussianDist, p: GaussianDist, alpha: float):
    _check_alpha(alpha)
    if q.dim != p.dim:
        raise DivergenceError(f"dimension mismatch: {q.dim} vs {p.dim}")
    diff = q.mean - p.mean
    if is_kl(alpha):
        return diff, None, None
    w = alpha * p.cov + (1.0 - alpha) * q.cov
    try:
        wf = np.linalg.cholesky(w)
    except np.linalg.LinAlgError as exc:
        raise DivergenceError("W = alpha*Sigma_p + (1-alpha)*Sigma_q is not positive definite") from exc
    return diff, w, wf


def renyi_gaussian(q: GaussianDist, p: GaussianDist, alpha: float) -> float:
    diff, w, wf = _gaussian_parts(q, p, alpha)
    d = q.dim
    if w is None:
        r = np.linalg.solve(p.cov_factor, q.cov_factor)
        m = np.linalg.solve(p.cov_factor, diff)
        val = 0.5 * (p.logdet() - q.logdet() + m @ m + np.sum(r * r) - d)
    else:
        logdet_w = 2.0 * np.sum(np.log(np.diag(wf)))
        m = np.linalg.solve(wf, diff)
        val = (
            alpha * p.logdet() / (2 * (alpha - 1))
            - q.logdet() / 2
            + logdet_w / (2 * (1 - alpha))
            + alpha * (m @ m) / 2
        )
    if not np.isfinite(val):
        raise DivergenceError("non-finite Gaussian divergence")
    return float(max(val, 0.0))


def renyi_gaussian_grad(q: GaussianDist, p: GaussianDist, alpha: float) -> GaussianGrad:
    diff, w, wf = _gaussian_parts(q, p, alpha)
    c = q.cov_factor
    q_inv = np.linalg.inv(q.cov)
    if w is None:
        p_inv = np.linalg.inv(p.cov)
        g_mean = p_inv @ diff
        g_cov = 0.5 * (p_inv - q_inv)
    else:
        w_inv = np.linalg.inv(w)
        wd = w_inv @ diff
        g_mean = alpha * wd
        g_cov = 0.5 * (w_inv - q_inv + alpha * (alpha - 1) * np.outer(wd, wd))
    g_cov = 0.5 * (g_cov + g_cov.T)
    return GaussianGrad(g_mean, vech(2.0 * g_cov @ c), g_cov)


def renyi_gaussian_1d(mu, v, mu0, v0, alpha):
    """Vectorised scalar-Gaussian divergence with gradients in (mu, v).

    Returns (sum of values, d/dmu, d/dv) for independent N(mu, v) || N(mu0, v0).
    """
    _check_alpha(alpha)
    mu, v = np.asarray(mu, dtype=float), np.asarray(v, dtype=float)
    d = mu - mu0
    if is_kl(alpha):
        val = 0.5 * (np.log(v0) - np.log(v) + (d * d + v) / v0 - 1)
        return float(np.sum(val)), d / v0, 0.5 * (1 / v0 - 1 / v)
    w = alpha * v0 + (1 - alpha) * v
    if np.any(w <= 0):
        raise DivergenceError("alpha*v0 + (1-alpha)*v must be positive")
    val = alpha * np.log(v0) / (2 * (alpha - 1)) - np.log(v) / 2 + np.log(w) / (2 * (1 - alpha)) + alpha * d * d / (2 * w)
    gv = 0.5 * (1 / w - 1 / v) - alpha * (1 - alpha) * d * d / (2 * w * w)
    return float(np.sum(val)), alpha * d / w, gv


# ---------------------------------------------------------------------------
# Inverse gamma
# ---------------------------------------------------------------------------


def _ig_log_partition(a, b):
    return special.gammaln(a) - a * np.log(b)


def _ig_mix(q: InvGammaDist, p: InvGammaDist, alpha: float):
    a1 = alpha * q.shape + (1 - alpha) * p.shape
    b1 = alpha * q.rate + (1 - alpha) * p.rate
    if a1 <= 0 or b1 <= 0:
        raise DivergenceError("alpha-mixture of inverse gamma parameters leaves the family")
    return a1, b1


def renyi_invgamma(q: InvGammaDist, p: InvGammaDist, alpha: float) -> float:
    _check_alpha(alpha)
    a, b, a0, b0 = q.shape, q.rate, p.shape, p.rate
    if is_kl(alpha):
        val = (
            a0 * np.log(b / b0)
            + special.gammaln(a0)
            - special.gammaln(a)
            + (a - a0) * special.digamma(a)
            + a * (b0 - b) / b
        )
    else:
        a1, b1 = _ig_mix(q, p, alpha)
        val = (_ig_log_partition(a1, b1) - alpha * _ig_log_partition(a, b)) / (alpha - 1) + _ig_log_partition(a0, b0)
    if not np.isfinite(val):
        raise DivergenceError("non-finite inverse gamma divergence")
    return float(max(val, 0.0))


def renyi_invgamma_grad(q: InvGammaDist, p: InvGammaDist, alpha: float) -> tuple[float, float]:
    """Gradient in (shape, rate) of q."""
    _check_alpha(alpha)
    a, b, a0, b0 = q.shape, q.rate, p.shape, p.rate
    if is_kl(alpha):
        ga = (a - a0) * special.polygamma(1, a) + b0 / b - 1.0
        gb = a0 / b - a * b0 / b**2
    else:
        a1, b1 = _ig_mix(q, p, alpha)
        ga = alpha * (np.log(b) - np.log(b1) + special.digamma(a1) - special.digamma(a)) / (alpha - 1)
        gb = alpha * (a / b - a1 / b1) / (alpha - 1)
    return float(ga), float(gb)


# ---------------------------------------------------------------------------
# Polya-Gamma, PG(b, c) against PG(b, 0)
# ---------------------------------------------------------------------------


def renyi_polya_gamma(dist: PolyaGammaDist, alpha: float) -> float:
    _check_alpha(alpha)
    b, c = dist.shape, dist.tilt
    if is_kl(alpha):
        val = b * log_cosh(c / 2) - b * c / 4 * np.tanh(c / 2)
    else:
        val = b / (alpha - 1) * (alpha * log_cosh(c / 2) - log_cosh(np.sqrt(alpha) * c / 2))
    return float(max(val, 0.0))


def renyi_polya_gamma_grad_tilt(dist: PolyaGammaDist, alpha: float) -> float:
    _check_alpha(alpha)
    b, c = dist.shape, dist.tilt
    if is_kl(alpha):
        return float(b / 4 * np.tanh(c / 2) - b * c / 8 / np.cosh(c / 2) ** 2)
    sa = np.sqrt(alpha)
    return float(b / (2 * (alpha - 1)) * (alpha * np.tanh(c / 2) - sa * np.tanh(sa * c / 2)))


def kl_polya_gamma_vec(b: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise KL{PG(b,c) || PG(b,0)} and its derivative in c."""
    t = np.tanh(c / 2)
    val = b * log_cosh(c / 2) - b * c / 4 * t
    grad = b / 4 * t - b * c / 8 * (1 - t * t)
    return val, grad


# ---------------------------------------------------------------------------
# Exponential families
# ---------------------------------------------------------------------------


def renyi_expfam(q: ExpFamSpec, p: ExpFamSpec, alpha: float) -> tuple[float, np.ndarray]:
    """Value and gradient in q's natural parameters for alpha != 1."""
    _check_alpha(alpha)
    if is_kl(alpha):
        raise DivergenceError("the exponential-family form needs alpha != 1")
    if q.log_partition is not p.log_partition:
        raise DivergenceError("q and p must share a log-partition function")
    lam = np.asarray(q.natural_params, dtype=float)
    lam0 = np.asarray(p.natural_params, dtype=float)
    mix = alpha * lam + (1 - alpha) * lam0
    a_mix = q.log_partition(mix)
    if not np.isfinite(a_mix):
        raise DivergenceError("alpha-mixture lies outside the natural parameter space")
    val = (a_mix - alpha * q.log_partition(lam) - (1 - alpha) * q.log_partition(lam0)) / (alpha - 1)
    grad = alpha * (q.log_partition_grad(mix) - q.log_partition_grad(lam)) / (alpha - 1)
    return float(val), grad


def _gauss_A(d: int):
    def unpack(lam):
        h = lam[:d]
        prec = -2.0 * lam[d:].reshape(d, d)
        return h, 0.5 * (prec + prec.T)

    def A(lam):
        h, prec = unpack(lam)
        try:
            f = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError:
            return np.inf
        m = np.linalg.solve(f, h)
        return 0.5 * (m @ m) - np.sum(np.log(np.diag(f)))

    def dA(lam):
        h, prec = unpack(lam)
        cov = np.linalg.inv(prec)
        mu = cov @ h
        return np.concatenate([mu, (np.outer(mu, mu) + cov).ravel()])

    return A, dA


_GAUSS_CACHE: dict = {}


def gaussian_expfam(dist: GaussianDist) -> ExpFamSpec:
    """Natural parameters (Sigma^-1 mu, -vec(Sigma^-1)/2)."""
    d = dist.dim
    if d not in _GAUSS_CACHE:
        _GAUSS_CACHE[d] = _gauss_A(d)
    A, dA = _GAUSS_CACHE[d]
    prec = np.linalg.inv(dist.cov)
    lam = np.concatenate([prec @ dist.mean, -0.5 * prec.ravel()])
    return ExpFamSpec(lam, A, dA)


def _ig_A(lam):
    a, b = lam
    if a <= 0 or b <= 0:
        return np.inf
    return float(_ig_log_partition(a, b))


def _ig_dA(lam):
    a, b = lam
    return np.array([special.digamma(a) - np.log(b), -a / b])


def invgamma_expfam(dist: InvGammaDist) -> ExpFamSpec:
    """Encoding with parameters (a, b); an affine map of the natural ones."""
    return ExpFamSpec(np.array([dist.shape, dist.rate], dtype=float), _ig_A, _ig_dA)


# ---------------------------------------------------------------------------
# Block sums
# ---------------------------------------------------------------------------


def renyi_block(q, p, family: str, alpha: float) -> float:
    if family == "gaussian":
        return renyi_gaussian(q, p, alpha)
    if family == "invgamma":
        return renyi_invgamma(q, p, alpha)
    if family == "polya_gamma":
        if p is not None and (p.shape != q.shape or p.tilt != 0):
            raise DivergenceError("Polya-Gamma reference must be PG(b, 0) with matching shape")
        return renyi_polya_gamma(q, alpha)
    raise DivergenceError(f"unknown family {family!r}")


def renyi_sum(blocks: Sequence[tuple], alpha: float) -> float:
    """Divergence of a product of independent blocks.

    Conditionals shared by q and p contribute nothing and are simply left out
    of ``blocks``.
    """
    _check_alpha(alpha)
    return float(sum(renyi_block(q, p, fam, alpha) for q, p, fam in blocks))


# ---------------------------------------------------------------------------
# Numerical oracle
# ---------------------------------------------------------------------------


def oracle_renyi_quadrature(
    q_logpdf: Callable[[float], float],
    p_logpdf: Callable[[float], float],
    alpha: float,
    support: tuple[float, float] = (-np.inf, np.inf),
    center: float | None = None,
    epsrel: float = 1e-11,
) -> float:
    """Adaptive-quadrature value of D_alpha(q || p) for 1-D densities.

    ``center`` (a point near the bulk of the integrand) splits the range and
    fixes the log-scale offset, which keeps the integrand O(1).
    """
    _check_alpha(alpha)
    lo, hi = support
    if center is None:
        center = 0.0 if not (np.isfinite(lo) and np.isfinite(hi)) else 0.5 * (lo + hi)
        if np.isfinite(lo) and not np.isfinite(hi):
            center = lo + 1.0
    kl = is_kl(alpha)

    if kl:

        def f(x):
            lq = q_logpdf(x)
            if not np.isfinite(lq):
                return 0.0
            return np.exp(lq) * (lq - p_logpdf(x))

        offset = 0.0
    else:
        offset = alpha * q_logpdf(center) + (1 - alpha) * p_logpdf(center)

        def f(x):
            v = alpha * q_logpdf(x) + (1 - alpha) * p_logpdf(x) - offset
            return np.exp(v) if np.isfinite(v) else 0.0

    total = 0.0
    for a, b in ((lo, center), (center, hi)):
        val, err = integrate.quad(f, a, b, epsabs=0.0, epsrel=epsrel, limit=500)
        if not np.isfinite(val):
            raise DivergenceError("quadrature did not converge")
        total += val
    if kl:
        return float(total)
    return float((np.log(total) + offset) / (alpha - 1))
