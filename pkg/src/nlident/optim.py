"""Nonlinear least squares: Levenberg-Marquardt, finite differences and
recursive simulation Jacobians.

The Levenberg-Marquardt engine uses Marquardt's diagonal scaling, so that
multiplying every weight by the same constant leaves the iterate sequence
unchanged, and solves each damped step with an SVD based least-squares
solver (minimum-norm in rank deficient directions).
"""

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .exceptions import BudgetExceeded, DivergenceError, UnstableModelError

_REJECTABLE = (DivergenceError, UnstableModelError, FloatingPointError,
               OverflowError, np.linalg.LinAlgError)


@dataclass
class LsqProblem:
    """Weighted least-squares problem ``min sum_i w_i r_i(theta)**2``.

    ``jacobian`` may be omitted, in which case central finite differences
    are used.
    """
    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    n_params: Optional[int] = None
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if np.any(~(self.weights > 0)):
                raise ValueError("weights must be strictly positive")


@dataclass
class LmOptions:
    max_iterations: int = 200
    damping: float = 1e-3
    increase: float = 10.0
    decrease: float = 0.1
    gtol: float = 1e-10
    xtol: float = 1e-10
    ftol: float = 1e-10
    max_damping: float = 1e16
    deadline: Optional[float] = None  # time.monotonic() value

    def __post_init__(self):
        for name in ("max_iterations", "damping", "gtol", "xtol", "ftol",
                     "max_damping"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.increase > 1 > self.decrease > 0:
            raise ValueError("need increase > 1 > decrease > 0")


@dataclass
class LmIterate:
    iteration: int
    cost: float
    damping: float
    gradient_norm: float


@dataclass
class LmResult:
    x: np.ndarray
    cost: float
    initial_cost: float
    status: str
    iterations: int
    nfev: int
    njev: int
    trace: list = field(default_factory=list)

    @property
    def costs(self):
        return np.array([it.cost for it in self.trace])

    def write_trace(self, path):
        """Write the accepted-iterate trace as CSV."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "cost", "damping", "gradient_norm"])
            for it in self.trace:
                w.writerow([it.iteration, repr(it.cost), repr(it.damping),
                            repr(it.gradient_norm)])


def _check_deadline(deadline):
    if deadline is not None and time.monotonic() > deadline:
        raise BudgetExceeded("time budget exhausted during optimization")


def _damped_step(J, r, damping, scale):
    n = J.shape[1]
    A = np.vstack([J, np.sqrt(damping) * np.diag(scale)])
    b = np.concatenate([-r, np.zeros(n)])
    step, *_ = scipy.linalg.lstsq(A, b, lapack_driver="gelsd",
                                  check_finite=False)
    return step


def levenberg_marquardt(problem, theta0, opts=None):
    """Minimize a weighted sum of squared residuals.

    Steps are accepted only when the weighted cost strictly decreases; a
    trial point whose residual evaluation raises a divergence error or
    returns non-finite values is rejected and the damping is increased.
    The step and cost tolerances are only tested on iterations whose first
    trial step was accepted, so a step shortened by heavy damping is not
    mistaken for convergence.

    Parameters
    ----------
    problem : LsqProblem
    theta0 : array_like
        Starting point; the residual must be finite there.
    opts : LmOptions, optional

    Returns
    -------
    LmResult
        ``status`` is one of ``'gtol'``, ``'xtol'``, ``'ftol'``,
        ``'max_iterations'`` or ``'max_damping'``.
    """
    opts = opts or LmOptions()
    theta = np.array(theta0, dtype=float).ravel()
    sw = None if problem.weights is None else np.sqrt(problem.weights)

    def wres(th):
        r = np.asarray(problem.residual(th), dtype=float).ravel()
        return r if sw is None else sw * r

    def wjac(th):
        if problem.jacobian is None:
            J = finite_difference_jacobian(problem.residual, th)
        else:
            J = np.asarray(problem.jacobian(th), dtype=float)
        J = J.reshape(-1, theta.size)
        return J if sw is None else sw[:, None] * J

    r = wres(theta)
    if not np.all(np.isfinite(r)):
        raise ValueError("residual is not finite at the initial point")
    cost = float(r @ r)
    initial_cost = cost
    J = wjac(theta)
    nfev, njev = 1, 1
    damping = opts.damping
    trace = []
    status = "max_iterations"
    it = 0
    while True:
        g = J.T @ r
        colnorm = np.sqrt(np.einsum("ij,ij->j", J, J))
        rnorm = np.sqrt(cost)
        trace.append(LmIterate(it, cost, damping, float(np.max(np.abs(g), initial=0.0))))
        with np.errstate(divide="ignore", invalid="ignore"):
            cosines = np.where(colnorm > 0, np.abs(g) / (colnorm * rnorm), 0.0)
        if rnorm == 0 or np.max(cosines, initial=0.0) <= opts.gtol:
            status = "gtol"
            break
        if it >= opts.max_iterations:
            break
        it += 1
        diag = colnorm ** 2
        dmax = diag.max() if diag.size else 0.0
        scale = np.sqrt(np.maximum(diag, 1e-12 * dmax if dmax > 0 else 1.0))
        accepted = False
        first_trial = True
        while True:
            _check_deadline(opts.deadline)
            step = _damped_step(J, r, damping, scale)
            trial = theta + step
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    r_t = wres(trial)
                nfev += 1
                ok = bool(np.all(np.isfinite(r_t)))
            except _REJECTABLE:
                nfev += 1
                ok = False
            if ok:
                cost_t = float(r_t @ r_t)
                if cost_t < cost:
                    accepted = True
                    break
            first_trial = False
            damping *= opts.increase
            if damping > opts.max_damping:
                break
        if not accepted:
            status = "max_damping"
            break
        decrease = cost - cost_t
        small_step = (np.linalg.norm(step)
                      <= opts.xtol * (np.linalg.norm(theta) + opts.xtol))
        theta, r, cost = trial, r_t, cost_t
        damping = max(damping * opts.decrease, 1e-300)
        # steps shortened by rejections say nothing about convergence
        if first_trial and (decrease <= opts.ftol * (cost + decrease) or small_step):
            trace.append(LmIterate(it, cost, damping, float("nan")))
            status = "xtol" if small_step else "ftol"
            break
        _check_deadline(opts.deadline)
        J = wjac(theta)
        njev += 1
    return LmResult(theta, cost, initial_cost, status, it, nfev, njev, trace)


def finite_difference_jacobian(fun, theta, eps=None):
    """Central-difference Jacobian of a vector valued function.

    The step for parameter ``i`` is ``eps**(1/3) * max(|theta_i|, 1)``
    with ``eps`` the machine precision by default.
    """
    theta = np.asarray(theta, dtype=float).ravel()
    eps = np.finfo(float).eps if eps is None else eps
    cols = []
    for i in range(theta.size):
        h = eps ** (1 / 3) * max(abs(theta[i]), 1.0)
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fp = np.asarray(fun(tp), dtype=float).ravel()
        fm = np.asarray(fun(tm), dtype=float).ravel()
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise ValueError(f"non-finite evaluation perturbing parameter {i}")
        cols.append((fp - fm) / (tp[i] - tm[i]))
    return np.stack(cols, axis=1)


def jacobian_mismatch(J, J_ref):
    """Max-norm relative discrepancy between two Jacobians."""
    J, J_ref = np.asarray(J), np.asarray(J_ref)
    return float(np.max(np.abs(J - J_ref)) / max(np.max(np.abs(J_ref)), 1e-300))


def recursive_ss_jacobian(model, record, **kwargs):
    """Simulated output of a state-space model and its exact derivative with
    respect to every model parameter, by forward sensitivity recursion.

    Works for any model exposing ``simulate_sensitivity`` (PNLSS and
    NN-NLSS models).  Returns ``(y, dy_dtheta)`` with shapes ``(T,)`` and
    ``(T, n_params)``.
    """
    u = record.samples if hasattr(record, "samples") else np.asarray(record)
    return model.simulate_sensitivity(u, **kwargs)
