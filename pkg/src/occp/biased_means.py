"""Biased normal means: two data sources sharing a mean, one with a bias.

Reliable data z_i ~ N(phi, 1), biased data w_j ~ N(phi + eta, 1), priors
phi ~ N(mu0, v0) and eta ~ N(0, vb).  Both the exact joint posterior and the
cut posterior are Gaussian, and so is every OCCP in the bivariate family
q(phi) q(eta | phi).
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import LearningRates, OccpSolution, StageObjective, StageSpec, calibrate_learning_rates, solve_two_stage
from .divergence import is_kl
from .optimize import SolveReport, StopRule
from .report import ReplicationReport

LOG2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class BiasedMeansData:
    z: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z", np.atleast_1d(np.asarray(self.z, dtype=float)))
        object.__setattr__(self, "w", np.atleast_1d(np.asarray(self.w, dtype=float)))
        if self.z.size < 1 or self.w.size < 1:
            raise ValueError("both data sources need at least one observation")

    @property
    def n1(self):
        return self.z.size

    @property
    def n2(self):
        return self.w.size


@dataclass(frozen=True)
class BiasedMeansPrior:
    mu0: float = 0.0
    v0: float = 100.0
    vb: float = 1.0

    def __post_init__(self):
        if not (self.v0 > 0 and self.vb > 0):
            raise ValueError("prior variances must be positive")


@dataclass(frozen=True)
class BivariateVariational:
    mu_phi: float
    v_phi: float
    mu_eta: float
    v_eta: float
    v_phi_eta: float

    def __post_init__(self):
        if not self.v_phi > 0:
            raise ValueError("v_phi must be positive")
        if not self.v_eta - self.v_phi_eta**2 / self.v_phi > 0:
            raise ValueError("conditional variance of eta must be positive")

    @property
    def mean(self):
        return np.array([self.mu_phi, self.mu_eta])

    @property
    def cov(self):
        return np.array([[self.v_phi, self.v_phi_eta], [self.v_phi_eta, self.v_eta]])

    def as_array(self):
        return np.array([self.mu_phi, self.v_phi, self.mu_eta, self.v_eta, self.v_phi_eta])

    def interval(self, param: str, level: float = 0.95):
        m, v = (self.mu_phi, self.v_phi) if param == "phi" else (self.mu_eta, self.v_eta)
        h = stats.norm.ppf(0.5 + level / 2) * np.sqrt(v)
        return m - h, m + h


def simulate(rng, n1=20, n2=1000, phi=5.0, eta=5.0) -> BiasedMeansData:
    z = rng.normal(phi, 1.0, n1)
    w = rng.normal(phi + eta, 1.0, n2)
    return BiasedMeansData(z, w)


def true_joint_posterior(data: BiasedMeansData, prior: BiasedMeansPrior) -> BivariateVariational:
    n1, n2 = data.n1, data.n2
    zb, wb = data.z.mean(), data.w.mean()
    mu0, v0, vb = prior.mu0, prior.v0, prior.vb
    c = (n2 * vb + 1) * (n1 + 1 / v0) + n2
    m_phi = ((n1 * zb + mu0 / v0) * (n2 * vb + 1) + n2 * wb) / c
    m_eta = n2 * vb * (n1 * (wb - zb) + (wb - mu0) / v0) / c
    return BivariateVariational(m_phi, (n2 * vb + 1) / c, m_eta, (n1 + n2 + 1 / v0) * vb / c, -n2 * vb / c)


def cut_posterior(data: BiasedMeansData, prior: BiasedMeansPrior) -> BivariateVariational:
    n1, n2 = data.n1, data.n2
    zb, wb = data.z.mean(), data.w.mean()
    s1 = n1 * prior.v0 / (n1 * prior.v0 + 1)
    s2 = n2 * prior.vb / (n2 * prior.vb + 1)
    m_phi = s1 * zb + (1 - s1) * prior.mu0
    return BivariateVariational(
        m_phi, s1 / n1, s2 * (wb - m_phi), s2 / n2 + s2**2 * s1 / n1, -s1 * s2 / n1
    )


# ---------------------------------------------------------------------------
# Stage 1: q(phi) = N(mu_phi, v_phi), coordinates x = (mu_phi, log v_phi)
# ---------------------------------------------------------------------------


def stage1_loss(mu, v, data):
    n1 = data.n1
    return n1 / 2 * LOG2PI + 0.5 * data.z @ data.z - n1 * data.z.mean() * mu + n1 / 2 * (mu * mu + v)


def stage1_divergence(mu, v, prior, alpha):
    d2 = (mu - prior.mu0) ** 2
    v0 = prior.v0
    if is_kl(alpha):
        return 0.5 * (np.log(v0) - np.log(v) + (d2 + v) / v0 - 1)
    w = alpha * v0 + (1 - alpha) * v
    if w <= 0:
        raise ValueError("alpha*v0 + (1-alpha)*v_phi must be positive")
    return alpha * np.log(v0) / (2 * (alpha - 1)) - np.log(v) / 2 + np.log(w) / (2 * (1 - alpha)) + alpha * d2 / (2 * w)


def stage1_objective(params, data, prior, alpha, lambda1) -> float:
    """lambda1 * expected loss + divergence, at (mu_phi, v_phi)."""
    mu, v = params
    return lambda1 * stage1_loss(mu, v, data) + stage1_divergence(mu, v, prior, alpha)


def _stage1_grads(x, data, prior, alpha):
    mu, v = x[0], np.exp(x[1])
    n1 = data.n1
    gl = np.array([n1 * (mu - data.z.mean()), n1 / 2 * v])
    d = mu - prior.mu0
    if is_kl(alpha):
        gd = np.array([d / prior.v0, (-1 / (2 * v) + 1 / (2 * prior.v0)) * v])
    else:
        w = alpha * prior.v0 + (1 - alpha) * v
        gd = np.array([alpha * d / w, (-1 / (2 * v) + 1 / (2 * w) - alpha * (1 - alpha) * d * d / (2 * w * w)) * v])
    return gl, gd


def stage1_stage_objective(data, prior, alpha, lambda1) -> StageObjective:
    return StageObjective(
        expected_loss=lambda x: stage1_loss(x[0], np.exp(x[1]), data),
        divergence=lambda x: stage1_divergence(x[0], np.exp(x[1]), prior, alpha),
        learning_rate=lambda1,
        gradient=lambda x: _stage1_grads(x, data, prior, alpha),
    )


# ---------------------------------------------------------------------------
# Stage 2: q(eta | phi) = N(mu_eta + k (phi - mu_phi), s)
# coordinates x = (mu_eta, log s, k) with k = v_phi_eta / v_phi
# ---------------------------------------------------------------------------


def _unpack2(x, v_phi):
    mu_eta, s, k = x[0], np.exp(x[1]), x[2]
    return mu_eta, s, k, k * v_phi, s + k * k * v_phi


def stage2_loss(mu_eta, v_eta, v_phi_eta, mu_phi, v_phi, data):
    n2 = data.n2
    m = mu_phi + mu_eta
    return n2 / 2 * LOG2PI + 0.5 * data.w @ data.w - n2 * data.w.mean() * m + n2 / 2 * (m * m + v_phi + 2 * v_phi_eta + v_eta)


def stage2_divergence(mu_eta, v_eta, v_phi_eta, v_phi, prior, alpha):
    """E over q(phi) of D_alpha(q(eta|phi) || p(eta))."""
    return _stage2_divergence_cond(mu_eta, v_eta - v_phi_eta**2 / v_phi, v_phi_eta / v_phi, v_phi, prior, alpha)


def _stage2_divergence_cond(mu_eta, s, k, v_phi, prior, alpha):
    # in terms of the conditional variance s and slope k; forming s from
    # v_eta - v_phi_eta^2 / v_phi cancels badly when k^2 v_phi >> s
    vb = prior.vb
    if not s > 0:
        raise ValueError("conditional variance must be positive")
    m2 = mu_eta**2 + k * k * v_phi
    if is_kl(alpha):
        return 0.5 * (np.log(vb) - np.log(s) - 1 + (m2 + s) / vb)
    tau = alpha * vb + (1 - alpha) * s
    if tau <= 0:
        raise ValueError("alpha*vb + (1-alpha)*v_eta|phi must be positive")
    return alpha * np.log(vb) / (2 * (alpha - 1)) - np.log(s) / 2 + np.log(tau) / (2 * (1 - alpha)) + alpha * m2 / (2 * tau)


def stage2_objective(params, stage1, data, prior, alpha, lambda2) -> float:
    """Objective at (mu_eta, v_eta, v_phi_eta) with stage 1 = (mu_phi, v_phi)."""
    mu_eta, v_eta, v_pe = params
    mu_phi, v_phi = stage1
    return lambda2 * stage2_loss(mu_eta, v_eta, v_pe, mu_phi, v_phi, data) + stage2_divergence(
        mu_eta, v_eta, v_pe, v_phi, prior, alpha
    )


def _stage2_grads(x, mu_phi, v_phi, data, prior, alpha):
    mu_eta, s, k, v_pe, v_eta = _unpack2(x, v_phi)
    n2 = data.n2
    gl = np.array([n2 * (mu_phi + mu_eta - data.w.mean()), n2 / 2 * s, n2 * v_phi * (1 + k)])
    vb = prior.vb
    if is_kl(alpha):
        gd = np.array([mu_eta / vb, (-1 / (2 * s) + 1 / (2 * vb)) * s, k * v_phi / vb])
    else:
        tau = alpha * vb + (1 - alpha) * s
        m2 = mu_eta**2 + k * k * v_phi
        ds = -1 / (2 * s) + 1 / (2 * tau) - alpha * (1 - alpha) * m2 / (2 * tau * tau)
        gd = np.array([alpha * mu_eta / tau, ds * s, alpha * k * v_phi / tau])
    return gl, gd


def stage2_stage_objective(stage1_x, data, prior, alpha, lambda2) -> StageObjective:
    mu_phi, v_phi = stage1_x[0], np.exp(stage1_x[1])

    def loss(x):
        mu_eta, s, k, v_pe, v_eta = _unpack2(x, v_phi)
        return stage2_loss(mu_eta, v_eta, v_pe, mu_phi, v_phi, data)

    def div(x):
        mu_eta, s, k, _, _ = _unpack2(x, v_phi)
        return _stage2_divergence_cond(mu_eta, s, k, v_phi, prior, alpha)

    return StageObjective(loss, div, lambda2, lambda x: _stage2_grads(x, mu_phi, v_phi, data, prior, alpha))


def _to_variational(x1, x2) -> BivariateVariational:
    v_phi = float(np.exp(x1[1]))
    mu_eta, s, k, v_pe, v_eta = _unpack2(x2, v_phi)
    return BivariateVariational(float(x1[0]), v_phi, float(mu_eta), float(v_eta), float(v_pe))


def _coords(q: BivariateVariational):
    k = q.v_phi_eta / q.v_phi
    s = q.v_eta - q.v_phi_eta**2 / q.v_phi
    return np.array([q.mu_phi, np.log(q.v_phi)]), np.array([q.mu_eta, np.log(s), k])


@dataclass
class BiasedMeansFit:
    q: BivariateVariational
    solution: OccpSolution


def fit_occp(
    data: BiasedMeansData,
    prior: BiasedMeansPrior,
    alpha: float,
    rates: LearningRates | None = None,
    solver: str = "bfgs",
    init: BivariateVariational | None = None,
    stop: StopRule | None = None,
) -> BiasedMeansFit:
    """Two-stage OCCP for given learning rates (default: both 1)."""
    rates = rates or LearningRates(1.0, 1.0, alpha=alpha)
    if init is None:
        init = BivariateVariational(prior.mu0, prior.v0, 0.0, prior.vb, 0.0)
    x1, x2 = _coords(init)
    s1 = StageSpec(stage1_stage_objective(data, prior, alpha, rates.lambda1), x1, solver, stop)

    def factory(frozen):
        return StageSpec(stage2_stage_objective(frozen, data, prior, alpha, rates.lambda2), x2, solver, stop)

    sol = solve_two_stage(s1, factory, rates)
    return BiasedMeansFit(_to_variational(sol.stage1_params, sol.stage2_params), sol)


def kl_solution(data, prior) -> BiasedMeansFit:
    """The alpha = 1, lambda = 1 OCCP, which is the cut posterior."""
    q = cut_posterior(data, prior)
    x1, x2 = _coords(q)
    rep1 = SolveReport(x1, float(stage1_stage_objective(data, prior, 1.0, 1.0).total(x1)), 0, [], True)
    rep2 = SolveReport(x2, float(stage2_stage_objective(x1, data, prior, 1.0, 1.0).total(x2)), 0, [], True)
    return BiasedMeansFit(q, OccpSolution(x1, x2, LearningRates(1.0, 1.0), rep1, rep2))


def calibrate(data, prior, alpha, kl: BiasedMeansFit | None = None) -> LearningRates:
    q = (kl or kl_solution(data, prior)).q
    return calibrate_learning_rates(
        lambda a: stage1_divergence(q.mu_phi, q.v_phi, prior, a),
        lambda a: stage2_divergence(q.mu_eta, q.v_eta, q.v_phi_eta, q.v_phi, prior, a),
        alpha,
    )


def fit_calibrated(data, prior, alpha, solver="bfgs") -> BiasedMeansFit:
    """OCCP at ``alpha`` with calibrated learning rates, started at the KL solution."""
    kl = kl_solution(data, prior)
    if is_kl(alpha):
        return kl
    rates = calibrate(data, prior, alpha, kl)
    return fit_occp(data, prior, alpha, rates, solver=solver, init=kl.q)


# ---------------------------------------------------------------------------
# Replication study
# ---------------------------------------------------------------------------

PRIORS = {"objective": BiasedMeansPrior(0.0, 100.0, 1.0), "subjective": BiasedMeansPrior(10.0, 1.0, 1.0)}
TABLE1_COLUMNS = ["prior", "alpha", "param", "bias", "rmse", "coverage", "mean_lr"]


@dataclass
class Table1Config:
    n1: int = 20
    n2: int = 1000
    phi: float = 5.0
    eta: float = 5.0
    vb: float = 1.0
    priors: tuple = ("objective", "subjective")
    alphas: tuple = (0.05, 0.5, 0.999, 5.0)
    replications: int = 1000
    seed: int = 0
    threads: int = 1
    solver: str = "bfgs"
    extra: dict = field(default_factory=dict)


def _one_replication(args):
    cfg, rep = args
    rng = np.random.default_rng([cfg.seed, rep])
    data = simulate(rng, cfg.n1, cfg.n2, cfg.phi, cfg.eta)
    out = {}
    failures = 0
    for pname in cfg.priors:
        base = PRIORS[pname]
        prior = BiasedMeansPrior(base.mu0, base.v0, cfg.vb)
        out[(pname, "true")] = (true_joint_posterior(data, prior), (np.nan, np.nan))
        kl = kl_solution(data, prior)
        for a in cfg.alphas:
            try:
                if is_kl(a):
                    fit, rates = kl, LearningRates(1.0, 1.0)
                else:
                    rates = calibrate(data, prior, a, kl)
                    fit = fit_occp(data, prior, a, rates, solver=cfg.solver, init=kl.q)
                out[(pname, a)] = (fit.q, (rates.lambda1, rates.lambda2))
            except (ValueError, RuntimeError):
                failures += 1
    return out, failures


def run_table1(cfg: Table1Config) -> ReplicationReport:
    jobs = [(cfg, r) for r in range(cfg.replications)]
    if cfg.threads > 1:
        with ProcessPoolExecutor(cfg.threads) as ex:
            results = list(ex.map(_one_replication, jobs, chunksize=max(1, len(jobs) // (4 * cfg.threads))))
    else:
        results = [_one_replication(j) for j in jobs]
    n_fail = sum(f for _, f in results)
    n_fits = cfg.replications * len(cfg.priors) * len(cfg.alphas)
    if n_fail > 0.05 * n_fits:
        raise RuntimeError(f"{n_fail} of {n_fits} OCCP fits failed")
    truth = {"phi": cfg.phi, "eta": cfg.eta}
    report = ReplicationReport(TABLE1_COLUMNS, config=_cfg_dict(cfg), seed=cfg.seed)
    for pname in cfg.priors:
        for a in ("true",) + tuple(cfg.alphas):
            fits = [res[(pname, a)] for res, _ in results if (pname, a) in res]
            for j, param in enumerate(("phi", "eta")):
                means = np.array([getattr(q, "mu_" + param) for q, _ in fits])
                err = means - truth[param]
                cover = np.mean([lo <= truth[param] <= hi for lo, hi in (q.interval(param) for q, _ in fits)])
                lr = float(np.mean([r[j] for _, r in fits])) if a != "true" else float("nan")
                report.add(
                    prior=pname, alpha=a, param=param, bias=float(err.mean()),
                    rmse=float(np.sqrt(np.mean(err**2))), coverage=float(cover), mean_lr=lr,
                )
    return report


def _cfg_dict(cfg):
    d = dict(vars(cfg))
    d["priors"] = list(cfg.priors)
    d["alphas"] = list(cfg.alphas)
    return d


CONTOUR_COLUMNS = ["prior", "method", "phi", "eta", "density"]


def contour_grid(cfg: Table1Config, grid_size: int = 60, rep: int = 0) -> ReplicationReport:
    """Joint density values on a grid for one simulated dataset."""
    rng = np.random.default_rng([cfg.seed, rep])
    data = simulate(rng, cfg.n1, cfg.n2, cfg.phi, cfg.eta)
    report = ReplicationReport(CONTOUR_COLUMNS, config=_cfg_dict(cfg), seed=cfg.seed)
    for pname in cfg.priors:
        base = PRIORS[pname]
        prior = BiasedMeansPrior(base.mu0, base.v0, cfg.vb)
        fits = {"true": true_joint_posterior(data, prior), "cut": cut_posterior(data, prior)}
        for a in cfg.alphas:
            fits[f"alpha={a:g}"] = fit_calibrated(data, prior, a, cfg.solver).q
        centre = fits["cut"].mean
        sd = np.sqrt(np.diag(fits["cut"].cov))
        g_phi = np.linspace(centre[0] - 4 * sd[0], centre[0] + 4 * sd[0], grid_size)
        g_eta = np.linspace(centre[1] - 4 * sd[1], centre[1] + 4 * sd[1], grid_size)
        pts = np.array(np.meshgrid(g_phi, g_eta, indexing="ij")).reshape(2, -1).T
        for name, q in fits.items():
            dens = stats.multivariate_normal(q.mean, q.cov).pdf(pts)
            for (ph, et), d in zip(pts, dens):
                report.add(prior=pname, method=name, phi=float(ph), eta=float(et), density=float(d))
    return report
