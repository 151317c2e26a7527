"""Solvers shared by every OCCP stage: Adam, coordinate descent, BFGS.

All solvers return a :class:`SolveReport`.  A non-finite objective halts the
run and the report carries the best parameters seen before the failure.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize as sopt

from .divergence import unvech, vech


class SolverError(RuntimeError):
    pass


@dataclass
class StopRule:
    max_iter: int = 10_000
    rel_tol: float = 1e-8
    patience: int = 50


@dataclass
class SolveReport:
    final_params: object
    final_objective: float
    iterations_used: int
    objective_trace: list = field(default_factory=list)
    converged: bool = False
    error: str | None = None


@dataclass
class AdamState:
    step_size: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None
    iteration: int = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        if self.first_moment is None:
            self.first_moment = np.zeros_like(grad)
            self.second_moment = np.zeros_like(grad)
        self.iteration += 1
        self.first_moment = self.beta1 * self.first_moment + (1 - self.beta1) * grad
        self.second_moment = self.beta2 * self.second_moment + (1 - self.beta2) * grad * grad
        m = self.first_moment / (1 - self.beta1**self.iteration)
        v = self.second_moment / (1 - self.beta2**self.iteration)
        return -self.step_size * m / (np.sqrt(v) + self.epsilon)


def _stalled(trace: list, rule: StopRule) -> bool:
    if len(trace) <= rule.patience:
        return False
    old, new = trace[-rule.patience - 1], trace[-1]
    return abs(old - new) <= rule.rel_tol * max(abs(new), 1e-12)


def adam_minimize(
    objective_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    init: np.ndarray,
    state: AdamState | None = None,
    stop: StopRule | None = None,
) -> SolveReport:
    state = state or AdamState()
    stop = stop or StopRule()
    x = np.array(init, dtype=float)
    f, g = objective_and_grad(x)
    if not np.isfinite(f):
        raise SolverError("objective is not finite at the initial point")
    best_x, best_f = x.copy(), f
    trace = [float(f)]
    report = SolveReport(best_x, best_f, 0, trace)
    for it in range(1, stop.max_iter + 1):
        if not np.all(np.isfinite(g)):
            report.error = f"non-finite gradient at iteration {it - 1}"
            break
        x = x + state.step(g)
        f, g = objective_and_grad(x)
        if not np.isfinite(f):
            report.error = f"non-finite objective at iteration {it}"
            break
        trace.append(float(f))
        report.iterations_used = it
        if f < best_f:
            best_x, best_f = x.copy(), f
        if _stalled(trace, stop):
            report.converged = True
            break
    report.final_params = best_x
    report.final_objective = float(best_f)
    return report


def coordinate_descent(
    updates: Sequence[Callable],
    objective: Callable,
    init,
    stop: StopRule | None = None,
    slack: float = 1e-10,
    check_monotone: bool = True,
) -> SolveReport:
    """Cycle block updates ``state -> state`` until the objective settles.

    With ``check_monotone`` an increase beyond ``slack`` (relative) after a
    sweep raises :class:`SolverError`, which flags a wrong closed-form update.
    """
    stop = stop or StopRule(max_iter=500, rel_tol=1e-10, patience=1)
    state = init
    f = float(objective(state))
    trace = [f]
    if not updates:
        return SolveReport(state, f, 0, trace, converged=True)
    converged = False
    it = 0
    for it in range(1, stop.max_iter + 1):
        for upd in updates:
            state = upd(state)
        f_new = float(objective(state))
        if not np.isfinite(f_new):
            return SolveReport(state, f, it, trace, False, f"non-finite objective at sweep {it}")
        if check_monotone and f_new > f + slack * max(1.0, abs(f)):
            raise SolverError(f"objective increased at sweep {it}: {f!r} -> {f_new!r}")
        trace.append(f_new)
        done = abs(f - f_new) <= stop.rel_tol * max(abs(f_new), 1e-12)
        f = f_new
        if done:
            converged = True
            break
    return SolveReport(state, f, it, trace, converged)


def bfgs_minimize(
    objective_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    init: np.ndarray,
    stop: StopRule | None = None,
    gtol: float = 1e-9,
    method: str = "BFGS",
) -> SolveReport:
    """Quasi-Newton minimisation (scipy's BFGS or L-BFGS-B) with a recorded trace."""
    stop = stop or StopRule(max_iter=1000)
    x0 = np.array(init, dtype=float)
    f0, _ = objective_and_grad(x0)
    if not np.isfinite(f0):
        raise SolverError("objective is not finite at the initial point")
    trace = [float(f0)]
    best = {"x": x0.copy(), "f": float(f0)}

    def fun(x):
        f, g = objective_and_grad(x)
        if not np.isfinite(f):
            return np.inf, np.zeros_like(x)
        if f < best["f"]:
            best["x"], best["f"] = x.copy(), float(f)
        return f, g

    def cb(xk):
        trace.append(best["f"])

    res = sopt.minimize(
        fun, x0, jac=True, method=method, callback=cb,
        options=_options(method, stop, gtol),
    )
    x = res.x if np.isfinite(res.fun) and res.fun <= best["f"] else best["x"]
    f = float(min(res.fun, best["f"]))
    ok = bool(res.success)
    # a line-search stall with a tiny gradient is a converged run in practice
    if not ok and res.status == 2 and np.all(np.isfinite(res.jac)):
        ok = float(np.max(np.abs(res.jac))) <= 1e-6 * max(1.0, abs(f))
    return SolveReport(x, f, int(res.nit), trace, ok, None if ok else str(res.message))


def _options(method, stop, gtol):
    if method == "L-BFGS-B":
        return {"maxiter": stop.max_iter, "gtol": gtol, "ftol": stop.rel_tol, "maxcor": 20}
    return {"maxiter": stop.max_iter, "gtol": gtol}


def finite_diff_grad(objective: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = objective(x)
        flat[i] = orig - step
        fm = objective(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise SolverError(f"non-finite objective near coordinate {i}")
        gf[i] = (fp - fm) / (2 * step)
    return g


class TransformKind(enum.Enum):
    IDENTITY = "identity"
    LOG_SCALAR = "log_scalar"
    CHOLESKY_VECH = "cholesky_vech"


@dataclass(frozen=True)
class Transform:
    """Map between a constrained value and its unconstrained coordinates."""

    kind: TransformKind
    dim: int = 1

    def forward(self, value):
        if self.kind is TransformKind.LOG_SCALAR:
            return np.log(value)
        if self.kind is TransformKind.CHOLESKY_VECH:
            return vech(np.linalg.cholesky(np.atleast_2d(value)))
        return np.asarray(value, dtype=float)

    def inverse(self, coords):
        if self.kind is TransformKind.LOG_SCALAR:
            return np.exp(coords)
        if self.kind is TransformKind.CHOLESKY_VECH:
            c = unvech(np.asarray(coords, dtype=float), self.dim)
            return c @ c.T
        return np.asarray(coords, dtype=float)

    def chain(self, grad_value, coords):
        """Gradient in the unconstrained coordinates given the gradient in value."""
        if self.kind is TransformKind.LOG_SCALAR:
            return np.asarray(grad_value) * np.exp(coords)
        if self.kind is TransformKind.CHOLESKY_VECH:
            c = unvech(np.asarray(coords, dtype=float), self.dim)
            gs = np.atleast_2d(grad_value)
            gs = 0.5 * (gs + gs.T)
            return vech(2.0 * gs @ c)
        return np.asarray(grad_value, dtype=float)
