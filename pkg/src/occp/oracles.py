"""Quadrature checks of the closed-form divergences.

Gaussian and inverse-gamma pairs go straight through adaptive quadrature.
The Polya-Gamma density is an alternating series that loses all precision in
float64 for large omega, so its integral is split: adaptive quadrature on the
body and, for the tail, a composite Gauss-Legendre rule on a density
evaluated in extended precision (cached per shape).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import integrate, special

from .divergence import (
    DivergenceError,
    GaussianDist,
    InvGammaDist,
    PolyaGammaDist,
    is_kl,
    oracle_renyi_quadrature,
    renyi_gaussian,
    renyi_invgamma,
    renyi_polya_gamma,
)

ORACLE_ALPHAS = (0.05, 0.5, 0.999, 2.5)
PG_SHAPES = (0.5, 1.0, 2.0, 3.5)
PG_BODY_END = 1.5
PG_TAIL_END = 20.0  # the PG(b, 0) tail decays like exp(-pi^2 w / 2)


def pg0_logpdf(w, b, n_terms=200):
    """log density of PG(b, 0) by its alternating series (float64; reliable for w <~ 2)."""
    n = np.arange(n_terms)
    lt = ((b - 1) * np.log(2) - special.gammaln(b) + special.gammaln(n + b) - special.gammaln(n + 1)
          + np.log(2 * n + b) - 0.5 * np.log(2 * np.pi * w**3) - (2 * n + b) ** 2 / (8 * w))
    val, sign = special.logsumexp(lt, b=np.where(n % 2 == 0, 1.0, -1.0), return_sign=True)
    return float(val) if sign > 0 else -np.inf


@lru_cache(maxsize=None)
def _pg_tail_rule(b, panels=48, order=20):
    """Nodes, weights and log p(w | b, 0) on [PG_BODY_END, PG_TAIL_END]."""
    import mpmath as mp

    edges = np.geomspace(PG_BODY_END, PG_TAIL_END, panels + 1)
    gx, gw = np.polynomial.legendre.leggauss(order)
    nodes = ((edges[:-1, None] + edges[1:, None]) / 2 + np.outer(np.diff(edges) / 2, gx)).ravel()
    weights = np.outer(np.diff(edges) / 2, gw).ravel()
    with mp.workdps(90):
        bm = mp.mpf(b)
        lead = (bm - 1) * mp.log(2)  # coef carries Gamma(n + b) / (Gamma(b) n!)
        logp = np.empty(nodes.size)
        for i, w in enumerate(nodes):
            wm = mp.mpf(float(w))
            # the density is ~1e-45 at the far end; stop once terms are ~1e-90
            n_max = int(np.sqrt(8 * w * 210) / 2) + 2
            coef, total = mp.mpf(1), mp.mpf(0)
            for n in range(n_max):
                term = coef * (2 * n + bm) * mp.exp(-(2 * n + bm) ** 2 / (8 * wm))
                total += term if n % 2 == 0 else -term
                coef *= (n + bm) / (n + 1)
            logp[i] = float(lead + mp.log(total) - mp.log(2 * mp.pi * wm**3) / 2)
    return nodes, weights, logp


def pg_oracle(dist: PolyaGammaDist, alpha: float, epsrel: float = 1e-12) -> float:
    """D_alpha(PG(b, c) || PG(b, 0)) by numerical integration against the PG(b, 0) density."""
    b, c = float(dist.shape), float(dist.tilt)
    lc = b * np.log(np.cosh(c / 2))
    # log q - log p = lc - c^2 w / 2
    if is_kl(alpha):
        g = lambda w, lp: np.exp(lp + lc - c * c * w / 2) * (lc - c * c * w / 2)
    else:
        g = lambda w, lp: np.exp(lp + alpha * (lc - c * c * w / 2))
    body, _ = integrate.quad(lambda w: g(w, pg0_logpdf(w, b)) if w > 0 else 0.0, 0.0, PG_BODY_END,
                             epsabs=0.0, epsrel=epsrel, limit=500, points=[0.05, 0.2, 0.5])
    nodes, weights, logp = _pg_tail_rule(b)
    total = body + float(weights @ g(nodes, logp))
    return float(total) if is_kl(alpha) else float(np.log(total) / (alpha - 1))


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def _gaussian_case(rng, alpha):
    while True:
        q = GaussianDist(rng.normal(0, 1, 1), np.sqrt(rng.uniform(0.2, 5.0)) * np.eye(1))
        p = GaussianDist(rng.normal(0, 1, 1), np.sqrt(rng.uniform(0.2, 5.0)) * np.eye(1))
        try:
            closed = renyi_gaussian(q, p, alpha)
        except DivergenceError:
            continue
        if closed < 1e-6:
            continue
        # centre on the mode of q^alpha p^(1 - alpha)
        vq, vp = q.cov_factor[0, 0] ** 2, p.cov_factor[0, 0] ** 2
        prec = alpha / vq + (1 - alpha) / vp
        centre = (alpha * q.mean[0] / vq + (1 - alpha) * p.mean[0] / vp) / prec
        oracle = oracle_renyi_quadrature(lambda x: float(q.logpdf(x)[0]), lambda x: float(p.logpdf(x)[0]), alpha,
                                         center=float(centre))
        return closed, oracle


def _invgamma_case(rng, alpha):
    while True:
        q = InvGammaDist(rng.uniform(1.0, 6.0), rng.uniform(0.5, 4.0))
        p = InvGammaDist(rng.uniform(1.0, 6.0), rng.uniform(0.5, 4.0))
        try:
            closed = renyi_invgamma(q, p, alpha)
        except DivergenceError:
            continue
        if closed < 1e-6:
            continue
        shape = alpha * q.shape + (1 - alpha) * p.shape
        mode = (alpha * q.rate + (1 - alpha) * p.rate) / (shape + 1)
        oracle = oracle_renyi_quadrature(lambda x: float(q.logpdf(x)), lambda x: float(p.logpdf(x)), alpha,
                                         support=(0.0, np.inf), center=mode)
        return closed, oracle


def _pg_case(rng, alpha):
    dist = PolyaGammaDist(float(rng.choice(PG_SHAPES)), float(rng.uniform(0.3, 4.0)))
    return renyi_polya_gamma(dist, alpha), pg_oracle(dist, alpha)


FAMILIES = {"gaussian": _gaussian_case, "inverse_gamma": _invgamma_case, "polya_gamma": _pg_case}


def divergence_oracle_suite(n_instances: int = 50, alphas=ORACLE_ALPHAS, seed: int = 0) -> dict:
    """Max relative error of each closed form against its oracle, per family and alpha."""
    out = {}
    for k, (name, case) in enumerate(FAMILIES.items()):
        rng = np.random.default_rng([seed, k])
        for alpha in alphas:
            errs = [_rel(*case(rng, alpha)) for _ in range(n_instances)]
            out[(name, alpha)] = max(errs)
    return out
