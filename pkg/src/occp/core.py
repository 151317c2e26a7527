"""Two-stage OCCP driver and learning-rate calibration."""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .divergence import is_kl
from .optimize import SolveReport, StopRule, adam_minimize, bfgs_minimize, AdamState

KL_FLOOR = 1e-12


class CalibrationError(ValueError):
    pass


@dataclass
class StageObjective:
    """``learning_rate * expected_loss(x) + divergence(x)``.

    ``gradient`` (optional) maps x to the pair (loss gradient, divergence
    gradient), so the learning rate can be applied here.
    """

    expected_loss: Callable[[np.ndarray], float]
    divergence: Callable[[np.ndarray], float]
    learning_rate: float = 1.0
    gradient: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None

    def total(self, x) -> float:
        return self.learning_rate * self.expected_loss(x) + self.divergence(x)

    def value_and_grad(self, x) -> tuple[float, np.ndarray]:
        if self.gradient is None:
            raise ValueError("no gradient supplied")
        gl, gd = self.gradient(x)
        return self.total(x), self.learning_rate * np.asarray(gl) + np.asarray(gd)


@dataclass
class StageSpec:
    """A stage objective together with its starting point and solver.

    ``solver`` is "bfgs", "adam", or a callable ``(objective, init) ->
    SolveReport`` (used for coordinate-ascent schemes).
    """

    objective: StageObjective
    init: object
    solver: str | Callable = "bfgs"
    stop: StopRule | None = None
    adam: AdamState | None = None


@dataclass
class LearningRates:
    lambda1: float
    lambda2: float
    base_lambda1: float = 1.0
    base_lambda2: float = 1.0
    alpha: float = 1.0


@dataclass
class OccpSolution:
    stage1_params: object
    stage2_params: object
    rates: LearningRates
    stage1_report: SolveReport
    stage2_report: SolveReport
    stage1_fingerprint: str = ""
    warnings: list = field(default_factory=list)


def fingerprint(params) -> str:
    """Hash of a parameter state, used to certify that stage 1 was frozen."""
    h = hashlib.sha256()

    def feed(obj):
        if isinstance(obj, dict):
            for k in sorted(obj):
                h.update(str(k).encode())
                feed(obj[k])
        elif isinstance(obj, (list, tuple)):
            for o in obj:
                feed(o)
        elif hasattr(obj, "__dict__") and not isinstance(obj, np.ndarray):
            feed(vars(obj))
        else:
            h.update(np.ascontiguousarray(np.asarray(obj, dtype=float)).tobytes())

    feed(params)
    return h.hexdigest()


def run_stage(spec: StageSpec) -> SolveReport:
    if callable(spec.solver):
        return spec.solver(spec.objective, spec.init)
    if spec.solver == "bfgs":
        return bfgs_minimize(spec.objective.value_and_grad, spec.init, spec.stop)
    if spec.solver == "adam":
        return adam_minimize(spec.objective.value_and_grad, spec.init, spec.adam or AdamState(), spec.stop)
    raise ValueError(f"unknown solver {spec.solver!r}")


def solve_two_stage(
    stage1: StageSpec,
    stage2_factory: Callable[[object], StageSpec],
    rates: LearningRates | None = None,
) -> OccpSolution:
    """Solve stage 1, freeze it, then solve stage 2 built from the frozen state."""
    rates = rates or LearningRates(stage1.objective.learning_rate, 1.0)
    notes = []
    rep1 = run_stage(stage1)
    if rep1.error or not rep1.converged:
        notes.append(f"stage 1: {rep1.error or 'not converged'}")
    frozen = rep1.final_params
    fp = fingerprint(frozen)
    spec2 = stage2_factory(frozen)
    rep2 = run_stage(spec2)
    if rep2.error or not rep2.converged:
        notes.append(f"stage 2: {rep2.error or 'not converged'}")
    if fingerprint(frozen) != fp:
        raise RuntimeError("stage-1 parameters were modified during stage 2")
    return OccpSolution(frozen, rep2.final_params, rates, rep1, rep2, fp, notes)


def calibrate_learning_rates(
    div1: Callable[[float], float],
    div2: Callable[[float], float],
    target_alpha: float,
    base_lambda1: float = 1.0,
    base_lambda2: float = 1.0,
) -> LearningRates:
    """Match the alpha-penalty to the KL penalty at the KL optimum.

    ``div1(alpha)`` must return D_alpha of the stage-1 KL solution from the
    prior; ``div2(alpha)`` the q(phi)-averaged stage-2 analogue.
    """
    if is_kl(target_alpha):
        return LearningRates(base_lambda1, base_lambda2, base_lambda1, base_lambda2, target_alpha)
    out = []
    for div, base in ((div1, base_lambda1), (div2, base_lambda2)):
        if div is None:
            out.append(base)
            continue
        kl = div(1.0)
        if kl < KL_FLOOR:
            warnings.warn("KL divergence at the optimum is ~0; keeping the base learning rate")
            out.append(base)
            continue
        out.append(div(target_alpha) / kl * base)
    return LearningRates(out[0], out[1], base_lambda1, base_lambda2, target_alpha)


def dispersion_learning_rate(residuals, n: int, p: int) -> float:
    """Inverse residual mean square with an n - p denominator."""
    r = np.asarray(residuals, dtype=float)
    if n <= p:
        raise ValueError("need n > p")
    if r.shape[0] != n:
        raise ValueError("residual length must equal n")
    ss = float(r @ r)
    if ss <= 0:
        raise ValueError("zero residual sum of squares")
    return (n - p) / ss


@dataclass
class MCEstimate:
    mean: float
    se: float
    n_bad: int = 0


def expectation_loss_mc(loss: Callable, sampler: Callable, n_samples: int, seed) -> MCEstimate:
    """Monte-Carlo mean and standard error of ``loss(sampler(rng, n))``.

    ``loss`` is vectorised over the leading axis of the draws.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    vals = np.asarray(loss(sampler(rng, n_samples)), dtype=float)
    ok = np.isfinite(vals)
    n_bad = int((~ok).sum())
    if n_bad > 0.01 * n_samples:
        raise RuntimeError(f"{n_bad} of {n_samples} loss draws were not finite")
    vals = vals[ok]
    return MCEstimate(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size)), n_bad)
