"""Nonlinear state-space models.

Two families share a linear core ``(A, B, C, D)`` in standardized signal
units::

    x(t+1) = A x(t) + B u(t) + f(x(t), u(t))
    y(t)   = C x(t) + D u(t) + g(x(t), u(t))

In a PNLSS model ``f = E zeta`` and ``g = F eta`` are linear combinations
of monomials in ``(x, u)``; in an NN-NLSS model they are one-hidden-layer
tanh networks.  Raw signals are mapped by ``u_s = (u - u_center) /
u_scale`` and ``y = y_center + y_scale y_s``; these constants are fixed at
fit time and are not parameters.

Simulation-error fitting uses forward sensitivities: the derivative of the
state with respect to every parameter is propagated along the simulation,
batched over operating points.
"""

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .basis import eval_monomial_rows, monomial_exponents, monomial_gradient
from .blocknl import SigmoidNet, ZeroNet, fit_static_net
from .exceptions import BudgetExceeded, DivergenceError, RankDeficientError, SpecError
from .freqid import LinearSs, estimate_bla, realize_state_space
from .optim import LmOptions, LsqProblem, levenberg_marquardt
from .signals import output_weights

SCHEMA_VERSION = 1


# ------------------------------------------------------------------ monomials

class MonomialBasis:
    """Monomials in ``(x_1..x_n, u)`` with total degree in ``degrees``,
    graded lexicographic order."""

    def __init__(self, n_states, degrees):
        self.n_states = int(n_states)
        self.degrees = tuple(sorted(set(int(d) for d in degrees)))
        self.exponents = monomial_exponents(self.n_states + 1, self.degrees)

    def __len__(self):
        return self.exponents.shape[0]

    def __eq__(self, other):
        return (isinstance(other, MonomialBasis) and self.n_states == other.n_states
                and np.array_equal(self.exponents, other.exponents))

    def __call__(self, z):
        return eval_monomial_rows(z, self.exponents)

    def gradient(self, z):
        return monomial_gradient(z, self.exponents)


def eval_monomials(basis, x, u):
    """Monomial vector at state ``x`` and input ``u``."""
    z = np.concatenate([np.atleast_1d(np.asarray(x, dtype=float)), [float(u)]])
    return basis(z)


# ------------------------------------------------------------------ common core

@dataclass(frozen=True)
class Standardization:
    u_center: float = 0.0
    u_scale: float = 1.0
    y_center: float = 0.0
    y_scale: float = 1.0

    def __post_init__(self):
        if not (self.u_scale > 0 and self.y_scale > 0):
            raise SpecError("standardization scales must be positive")

    @classmethod
    def from_data(cls, U, Y):
        su, sy = float(np.std(U)), float(np.std(Y))
        return cls(float(np.mean(U)), su if su > 0 else 1.0,
                   float(np.mean(Y)), sy if sy > 0 else 1.0)

    def to_dict(self):
        return {"u_center": self.u_center, "u_scale": self.u_scale,
                "y_center": self.y_center, "y_scale": self.y_scale}


class _NlssBase:
    """Shared simulation and sensitivity recursion."""

    def _split_linear(self, theta):
        n = self.n
        i = 0
        A = theta[i:i + n * n].reshape(n, n); i += n * n
        B = theta[i:i + n]; i += n
        C = theta[i:i + n]; i += n
        D = theta[i]
        return A, B, C, D, theta[n * n + 2 * n + 1:]

    @property
    def n_linear(self):
        return self.n * self.n + 2 * self.n + 1

    def linear_params(self):
        return np.concatenate([self.A.ravel(), self.B, self.C, [self.D]])

    def params(self):
        return np.concatenate([self.linear_params(), self.nonlinear_params()])

    @property
    def n_params(self):
        return self.params().size

    @property
    def linear(self):
        return LinearSs(self.A, self.B, self.C, [[self.D]], check_stable=False)

    def equilibrium_state(self, us_mean):
        """Fixed point of the linear part for constant standardized inputs,
        shape ``(batch, n)``."""
        us_mean = np.atleast_1d(np.asarray(us_mean, dtype=float))
        M = np.eye(self.n) - self.A
        return np.linalg.solve(M, np.outer(self.B, us_mean)).T

    def _direct(self, x, u, dfth):
        """Explicit derivative of the state update with respect to the
        parameters at ``(x, u)``, shape ``(batch, n, p)``."""
        nb, n = x.shape
        Dm = np.zeros((nb, n, self.n_params))
        nA = n * n
        Dm[:, np.repeat(np.arange(n), n), np.arange(nA)] = x[:, np.tile(np.arange(n), n)]
        Dm[:, np.arange(n), nA + np.arange(n)] = u[:, None]
        Dm[:, :, self.n_linear:self.n_linear + self.n_f_params] = dfth
        return Dm

    def fixed_point(self, us_mean, sensitivity=False, max_iter=50, tol=1e-10):
        """Fixed point of the full state update for constant standardized
        inputs, by Newton's method from the linear part's fixed point.

        With ``sensitivity`` also returns its parameter derivative from
        the implicit function theorem, shape ``(batch, n, p)``.
        """
        u = np.atleast_1d(np.asarray(us_mean, dtype=float))
        n = self.n
        eye = np.eye(n)
        try:
            x = self.equilibrium_state(u)
            for _ in range(max_iter):
                z = np.concatenate([x, u[:, None]], axis=1)
                fz, dfz, dfth, _, _, _ = self._terms(z, True)
                r = x @ self.A.T + self.B * u[:, None] + fz - x
                if not np.all(np.isfinite(r)):
                    break
                if np.max(np.abs(r)) <= tol * max(1.0, np.max(np.abs(x))):
                    break
                Jx = self.A + dfz[:, :, :n] - eye
                x = x - np.linalg.solve(Jx, r[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise DivergenceError(f"singular fixed-point system: {exc}") from exc
        if not (np.all(np.isfinite(r)) and np.max(np.abs(r)) <= tol * max(1.0, np.max(np.abs(x)))):
            raise DivergenceError("fixed-point iteration did not converge")
        if not sensitivity:
            return x
        Jx = self.A + dfz[:, :, :n] - eye
        S0 = -np.linalg.solve(Jx, self._direct(x, u, dfth))
        return x, S0

    def _initial_state(self, us, x0, sensitivity=False):
        nb = us.shape[0]
        S0 = None
        if x0 is None:
            x = np.zeros((nb, self.n))
        elif isinstance(x0, str):
            if x0 == "equilibrium":
                um = us.mean(axis=1)
                x = self.equilibrium_state(um)
                if sensitivity:
                    # (I - A) x = B u: only the linear block enters
                    dfth = np.zeros((nb, self.n, self.n_f_params))
                    S0 = np.linalg.solve(np.eye(self.n) - self.A, self._direct(x, um, dfth))
            elif x0 == "fixed_point":
                out = self.fixed_point(us.mean(axis=1), sensitivity)
                x, S0 = out if sensitivity else (out, None)
            else:
                raise SpecError(f"unknown initial state {x0!r}")
        else:
            x = np.broadcast_to(np.asarray(x0, dtype=float), (nb, self.n)).copy()
        if sensitivity and S0 is None:
            S0 = np.zeros((nb, self.n, self.n_params))
        return x, S0

    def simulate_standardized(self, us, sensitivity=False, bound=None, deadline=None,
                              x0=None):
        """Recursion for standardized inputs ``us`` of shape ``(batch, T)``.

        ``x0`` is zero by default, an array, ``'equilibrium'`` for the fixed
        point of the linear part at each row's mean input, or
        ``'fixed_point'`` for the fixed point of the full model found by
        Newton's method from there.  The derivatives of the last two with
        respect to the parameters enter the sensitivities.
        Returns ``ys`` ``(batch, T)``, states ``(batch, T, n)`` and, if
        requested, ``dys/dtheta`` ``(batch, T, p)``.
        """
        us = np.atleast_2d(np.asarray(us, dtype=float))
        nb, T = us.shape
        n = self.n
        A, Bv, C, D = self.A, self.B, self.C, self.D
        x, S = self._initial_state(us, x0, sensitivity)
        ys = np.empty((nb, T))
        X = np.empty((nb, T, n))
        if sensitivity:
            dY = np.empty((nb, T, self.n_params))
            iC = n * n + n + np.arange(n)
            iD = n * n + 2 * n
            i_g = self.n_linear + self.n_f_params + np.arange(self.n_g_params)
        for t in range(T):
            if deadline is not None and t % 256 == 0 and time.monotonic() > deadline:
                raise BudgetExceeded("time budget exhausted during simulation")
            u = us[:, t]
            z = np.concatenate([x, u[:, None]], axis=1)
            fz, dfz, dfth, gz, dgz, dgth = self._terms(z, sensitivity)
            X[:, t] = x
            ys[:, t] = x @ C + D * u + gz
            if sensitivity:
                dy = np.einsum("bi,bip->bp", C + dgz[:, :n], S)
                dy[:, iC] += x
                dy[:, iD] += u
                dy[:, i_g] += dgth
                dY[:, t] = dy
                S = (A + dfz[:, :, :n]) @ S + self._direct(x, u, dfth)
            x = x @ A.T + Bv * u[:, None] + fz
            if not np.all(np.isfinite(x)) or (bound is not None and np.max(np.abs(x)) > bound):
                raise DivergenceError(f"state diverged at time index {t}", t)
        if bound is not None and np.max(np.abs(ys)) > bound:
            raise DivergenceError("output exceeded the divergence bound")
        return (ys, X, dY) if sensitivity else (ys, X, None)

    def _std_input(self, u):
        s = self.standardization
        return (np.asarray(u, dtype=float) - s.u_center) / s.u_scale

    def simulate(self, u, warmup_periods=0, period_length=None, bound=None, x0=None):
        """Raw-unit output for raw input ``u`` (1-D).

        With ``warmup_periods`` the periodic input is preceded by that many
        copies of its last period and the corresponding output is dropped.
        ``x0`` as in ``simulate_standardized``.
        """
        u = np.asarray(u, dtype=float)
        T = u.size
        if warmup_periods:
            N = period_length or T
            u = np.concatenate([np.tile(u[-N:], warmup_periods), u])
        ys, _, _ = self.simulate_standardized(self._std_input(u)[None, :], bound=bound,
                                              x0=x0)
        s = self.standardization
        return s.y_center + s.y_scale * ys[0, -T:]

    def simulate_from_rest(self, u):
        return self.simulate(u)

    def simulate_sensitivity(self, u, warmup_periods=0, period_length=None, deadline=None,
                             x0=None):
        """Raw-unit output and its derivatives with respect to all
        parameters, ``(y, dy/dtheta)`` with shapes ``(T,)`` and ``(T, p)``."""
        u = np.asarray(u, dtype=float)
        T = u.size
        if warmup_periods:
            N = period_length or T
            u = np.concatenate([np.tile(u[-N:], warmup_periods), u])
        ys, _, dY = self.simulate_standardized(self._std_input(u)[None, :], True,
                                               deadline=deadline, x0=x0)
        s = self.standardization
        return s.y_center + s.y_scale * ys[0, -T:], s.y_scale * dY[0, -T:]


# ------------------------------------------------------------------ PNLSS

class PnlssModel(_NlssBase):
    """Polynomial nonlinear state-space model.

    ``E`` is ``(n, M)`` and ``F`` is ``(M,)`` over the same monomial basis;
    optional boolean masks select the active entries (inactive ones stay
    zero and are not parameters).  The output equation also has a constant
    term ``F0`` (degree zero of the output polynomial, present only when
    the basis is nonempty): output standardization removes the pooled
    output mean, which the model cannot otherwise reproduce when the
    nonlinear terms shift the mean of the output.
    """

    def __init__(self, A, B, C, D, E=None, F=None, degrees=(2, 3), mask_e=None,
                 mask_f=None, standardization=None, F0=0.0):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        n = self.A.shape[0]
        self.n = n
        self.B = np.asarray(B, dtype=float).reshape(n)
        self.C = np.asarray(C, dtype=float).reshape(n)
        self.D = float(np.asarray(D).ravel()[0])
        self.basis = MonomialBasis(n, degrees)
        M = len(self.basis)
        self.mask_e = np.ones((n, M), bool) if mask_e is None else np.asarray(mask_e, bool).reshape(n, M)
        self.mask_f = np.ones(M, bool) if mask_f is None else np.asarray(mask_f, bool).reshape(M)
        self.E = np.zeros((n, M)) if E is None else np.asarray(E, dtype=float).reshape(n, M)
        self.F = np.zeros(M) if F is None else np.asarray(F, dtype=float).reshape(M)
        self.E = np.where(self.mask_e, self.E, 0.0)
        self.F = np.where(self.mask_f, self.F, 0.0)
        self.F0 = float(F0) if M else 0.0
        self.standardization = standardization or Standardization()
        self._rows_e, self._cols_e = np.nonzero(self.mask_e)
        self._cols_f = np.nonzero(self.mask_f)[0]
        self.fit_info = {}

    @classmethod
    def from_matrices(cls, A, B, C, D, E, F, degrees):
        return cls(A, B, C, D, E, F, degrees)

    @property
    def degrees(self):
        return self.basis.degrees

    @property
    def n_f_params(self):
        return self._rows_e.size

    @property
    def n_g_params(self):
        return self._cols_f.size + (len(self.basis) > 0)

    def nonlinear_params(self):
        f0 = [self.F0] if len(self.basis) else []
        return np.concatenate([self.E[self.mask_e], self.F[self.mask_f], f0])

    def with_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        A, B, C, D, rest = self._split_linear(theta)
        E = np.zeros_like(self.E)
        E[self.mask_e] = rest[:self.n_f_params]
        F = np.zeros_like(self.F)
        F[self.mask_f] = rest[self.n_f_params:self.n_f_params + self._cols_f.size]
        F0 = rest[-1] if len(self.basis) else 0.0
        return PnlssModel(A, B, C, D, E, F, self.degrees, self.mask_e, self.mask_f,
                          self.standardization, F0)

    def _terms(self, z, sensitivity):
        nb = z.shape[0]
        n = self.n
        if len(self.basis) == 0:
            zero = np.zeros((nb, n))
            return (zero, np.zeros((nb, n, n + 1)), np.zeros((nb, n, 0)),
                    np.zeros(nb), np.zeros((nb, n + 1)), np.zeros((nb, 0)))
        zeta = self.basis(z)
        fz = zeta @ self.E.T
        gz = zeta @ self.F + self.F0
        if not sensitivity:
            return fz, None, None, gz, None, None
        dzeta = self.basis.gradient(z)                      # (nb, M, n+1)
        dfz = np.einsum("im,bmk->bik", self.E, dzeta)
        dgz = np.einsum("m,bmk->bk", self.F, dzeta)
        dfth = np.zeros((nb, n, self.n_f_params))
        dfth[:, self._rows_e, np.arange(self.n_f_params)] = zeta[:, self._cols_e]
        dgth = np.concatenate([zeta[:, self._cols_f], np.ones((nb, 1))], axis=1)
        return fz, dfz, dfth, gz, dgz, dgth

    def to_dict(self):
        n = self.n
        return {"schema_version": SCHEMA_VERSION, "kind": "pnlss", "n": n,
                "degrees": list(self.degrees),
                "exponents": self.basis.exponents.tolist(),
                "A": self.A.ravel().tolist(), "B": self.B.tolist(),
                "C": self.C.tolist(), "D": self.D,
                "E": self.E.ravel().tolist(), "F": self.F.tolist(), "F0": self.F0,
                "mask_e": self.mask_e.ravel().astype(int).tolist(),
                "mask_f": self.mask_f.astype(int).tolist(),
                "standardization": self.standardization.to_dict()}

    @classmethod
    def from_dict(cls, d):
        n = d["n"]
        model = cls(np.reshape(d["A"], (n, n)), d["B"], d["C"], d["D"], d["E"], d["F"],
                    d["degrees"], d.get("mask_e"), d.get("mask_f"),
                    Standardization(**d["standardization"]), d.get("F0", 0.0))
        if model.basis.exponents.tolist() != d["exponents"]:
            raise SpecError("monomial ordering in file does not match this version")
        return model


# ------------------------------------------------------------------ NN-NLSS

class NnNlssModel(_NlssBase):
    """State-space model with tanh-network nonlinear terms ``f_NL``
    (``n + 1 -> n``) and ``g_NL`` (``n + 1 -> 1``)."""

    def __init__(self, A, B, C, D, f_nl=None, g_nl=None, standardization=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        n = self.A.shape[0]
        self.n = n
        self.B = np.asarray(B, dtype=float).reshape(n)
        self.C = np.asarray(C, dtype=float).reshape(n)
        self.D = float(np.asarray(D).ravel()[0])
        self.f_nl = f_nl if f_nl is not None else ZeroNet(n + 1, n)
        self.g_nl = g_nl if g_nl is not None else ZeroNet(n + 1, 1)
        if (self.f_nl.n_in, self.f_nl.n_out, self.g_nl.n_in, self.g_nl.n_out) != (n + 1, n, n + 1, 1):
            raise SpecError("network dimensions do not match the state dimension")
        self.standardization = standardization or Standardization()
        self.fit_info = {}

    @property
    def n_f_params(self):
        return self.f_nl.n_params

    @property
    def n_g_params(self):
        return self.g_nl.n_params

    def nonlinear_params(self):
        return np.concatenate([self.f_nl.params(), self.g_nl.params()])

    def with_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        A, B, C, D, rest = self._split_linear(theta)
        pf = self.n_f_params
        return NnNlssModel(A, B, C, D, self.f_nl.with_params(rest[:pf]),
                           self.g_nl.with_params(rest[pf:]), self.standardization)

    def _terms(self, z, sensitivity):
        if not sensitivity:
            return self.f_nl(z), None, None, self.g_nl(z)[:, 0], None, None
        fz, fJ, fdx = self.f_nl.jacobian(z)
        gz, gJ, gdx = self.g_nl.jacobian(z)
        return fz, fdx, fJ, gz[:, 0], gdx[:, 0], gJ[:, 0]

    def to_dict(self):
        n = self.n
        return {"schema_version": SCHEMA_VERSION, "kind": "nnlss", "n": n,
                "A": self.A.ravel().tolist(), "B": self.B.tolist(),
                "C": self.C.tolist(), "D": self.D,
                "f_nl": self.f_nl.to_dict(), "g_nl": self.g_nl.to_dict(),
                "standardization": self.standardization.to_dict()}

    @classmethod
    def from_dict(cls, d):
        n = d["n"]
        return cls(np.reshape(d["A"], (n, n)), d["B"], d["C"], d["D"],
                   SigmoidNet.from_dict(d["f_nl"]), SigmoidNet.from_dict(d["g_nl"]),
                   Standardization(**d["standardization"]))


def simulate_nlss(model, input, x0=None, warmup_periods=0):
    """Forward simulation of a PNLSS or NN-NLSS model for a ``SampledRecord``.

    ``x0`` (standardized state units) defaults to zero; ``'equilibrium'``
    and ``'fixed_point'`` start from the fixed point of the linear part or
    of the full model at the record's mean input.  With ``warmup_periods`` the record is preceded by copies of its
    last period, approximating the periodic steady state.
    """
    y = model.simulate(input.samples, warmup_periods=warmup_periods,
                       period_length=input.period_length, x0=x0)
    return input.with_samples(y, offset=float(np.mean(y)))


# ------------------------------------------------------------------ pooled fitting

class _PooledProblem:
    """Weighted simulation error of a state-space model over all operating
    points.  Each is simulated over warm-up periods plus one period of the
    period-averaged data, from each initial state in ``start`` (see
    ``simulate_standardized``); the residuals of the starts are stacked."""

    def __init__(self, template, U, Y, warmup_periods=1, bound_factor=1e6,
                 deadline=None, start="equilibrium"):
        self.template = template
        self.starts = tuple(start) if isinstance(start, (list, tuple)) else (start,)
        N = U.shape[1]
        self.N = N
        s = template.standardization
        us = (U - s.u_center) / s.u_scale
        self.us = np.concatenate([us] * warmup_periods + [us], axis=1)
        self.ys = (Y - s.y_center) / s.y_scale
        self.sw = np.sqrt(output_weights(Y))[:, None]
        self.bound = bound_factor * max(float(np.sqrt(np.mean(self.ys ** 2))), 1.0)
        self.deadline = deadline

    def residual(self, theta):
        m = self.template.with_params(theta)
        out = []
        for x0 in self.starts:
            ys, _, _ = m.simulate_standardized(self.us, bound=self.bound,
                                               deadline=self.deadline, x0=x0)
            out.append((self.sw * (ys[:, -self.N:] - self.ys)).ravel())
        return np.concatenate(out)

    def jacobian(self, theta):
        m = self.template.with_params(theta)
        out = []
        for x0 in self.starts:
            _, _, dY = m.simulate_standardized(self.us, True, bound=self.bound,
                                               deadline=self.deadline, x0=x0)
            out.append((self.sw[:, :, None] * dY[:, -self.N:]).reshape(-1, theta.size))
        return np.concatenate(out)

    def cost(self, theta):
        r = self.residual(theta)
        return float(r @ r)

    def optimize(self, theta0, opts):
        return levenberg_marquardt(LsqProblem(self.residual, self.jacobian), theta0, opts)


def _lm_options(lm_options, deadline):
    opts = lm_options or LmOptions(max_iterations=200)
    if deadline is not None:
        opts = LmOptions(**{**opts.__dict__, "deadline": deadline})
    return opts


def fit_linear_ss(dataset, n, bla_operating_point=None, warmup_periods=1,
                  lm_options=None, deadline=None):
    """Steps 1-3 of the state-space pipelines: BLA at one operating point,
    canonical realization in standardized units, then Levenberg-Marquardt
    on the pooled simulation error of the linear model.

    The realization is rescaled so that every state has unit rms on the
    pooled data, which keeps the monomials or network inputs well scaled.
    Returns a ``PnlssModel`` without nonlinear terms.
    """
    U, Y = dataset.period_means()
    std = Standardization.from_data(U, Y)
    k = len(dataset) // 2 if bla_operating_point is None else bla_operating_point
    _, tf = estimate_bla(dataset, k, n, n)
    ss = realize_state_space(tf.scaled(std.u_scale / std.y_scale))
    lin = PnlssModel(ss.A, ss.B, ss.C, ss.D, degrees=(), standardization=std)
    lin = _balance_states(lin, U, warmup_periods)
    prob = _PooledProblem(lin, U, Y, warmup_periods, deadline=deadline)
    res = prob.optimize(lin.params(), _lm_options(lm_options, deadline))
    lin = _balance_states(lin.with_params(res.x), U, warmup_periods)
    lin.fit_info = {"initial_cost": res.initial_cost, "cost": prob.cost(lin.params()),
                    "status": res.status}
    return lin


def _balance_states(model, U, warmup_periods, start="equilibrium"):
    s = model.standardization
    us = (U - s.u_center) / s.u_scale
    us = np.concatenate([us] * (warmup_periods + 1), axis=1)
    _, X, _ = model.simulate_standardized(us, x0=start)
    rms = np.sqrt(np.mean(X[:, -U.shape[1]:] ** 2, axis=(0, 1)))
    rms = np.where(rms > 0, rms, 1.0)
    T = np.diag(1.0 / rms)
    Ti = np.diag(rms)
    return PnlssModel(T @ model.A @ Ti, T @ model.B, model.C @ Ti, model.D,
                      degrees=model.degrees, standardization=s, F0=model.F0)


def fit_pnlss(dataset, n, degrees=(2, 3), mask_e=None, mask_f=None,
              bla_operating_point=None, warmup_periods=1, lm_options=None,
              linear=None, deadline=None, start=(None, "equilibrium")):
    """Four-step PNLSS identification.

    Steps 1-3 give the optimized linear model (``fit_linear_ss``); step 4
    adds the monomial terms with ``E = F = 0`` and refines all parameters
    by Levenberg-Marquardt on the pooled simulation error, with exact
    recursive Jacobians.  Trial points whose simulation diverges are
    rejected by the optimizer.

    ``start`` is the initial state (or a tuple of them, whose costs are
    summed) of the training simulations.  Fitting from both rest and the
    linear equilibrium keeps the fitted orbit reachable from either, which
    guards against spurious attractors of the polynomial terms.
    """
    if n < 1:
        raise SpecError("state dimension must be at least one")
    if linear is None:
        linear = fit_linear_ss(dataset, n, bla_operating_point, warmup_periods,
                               lm_options, deadline)
    U, Y = dataset.period_means()
    model = PnlssModel(linear.A, linear.B, linear.C, linear.D, degrees=degrees,
                       mask_e=mask_e, mask_f=mask_f,
                       standardization=linear.standardization, F0=linear.F0)
    prob = _PooledProblem(model, U, Y, warmup_periods, deadline=deadline, start=start)
    theta0 = model.params()
    try:
        prob.residual(theta0)
    except DivergenceError as exc:
        raise DivergenceError(f"linear initialization diverges: {exc}") from exc
    if len(model.basis) == 0:
        out = model.with_params(theta0)
        out.fit_info = dict(linear.fit_info, linear_cost=linear.fit_info["cost"])
        return out
    res = prob.optimize(theta0, _lm_options(lm_options, deadline))
    out = model.with_params(res.x)
    out.fit_info = {"linear_cost": res.initial_cost, "initial_cost": res.initial_cost,
                    "cost": res.cost, "status": res.status, "iterations": res.iterations}
    return out


# ------------------------------------------------------------------ NN-NLSS pipeline

@dataclass(frozen=True, eq=False)
class StateEstimate:
    states: np.ndarray
    lam: float
    data_cost: float = float("nan")
    model_cost: float = float("nan")

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.states, dtype=float))
        object.__setattr__(self, "states", X)
        if not np.all(np.isfinite(X)):
            raise SpecError("state estimate is not finite")
        if not self.lam > 0:
            raise SpecError("lambda must be positive")


def _state_ls_system(linear, u, y, lam):
    A, B, C, D = linear.A, linear.B[:, 0], linear.C[0], linear.D[0, 0]
    n = A.shape[0]
    T = u.size
    I_T = scipy.sparse.identity(T, format="csr")
    data = scipy.sparse.kron(I_T, scipy.sparse.csr_matrix(C[None, :]), format="csr")
    shift = scipy.sparse.eye(T - 1, T, k=1, format="csr")
    keep = scipy.sparse.eye(T - 1, T, k=0, format="csr")
    model = (scipy.sparse.kron(shift, scipy.sparse.identity(n)) -
             scipy.sparse.kron(keep, scipy.sparse.csr_matrix(A)))
    M = scipy.sparse.vstack([data, np.sqrt(lam) * model], format="csr")
    rhs = np.concatenate([y - D * u, np.sqrt(lam) * np.kron(u[:-1], B)])
    return M, rhs


def estimate_states(linear, u, y, lam):
    """State sequence minimizing
    ``sum (y - C x - D u)**2 + lam * sum |x(t+1) - A x(t) - B u(t)|**2``.

    Solved as one sparse linear least-squares problem; its normal matrix is
    block tridiagonal.  ``linear`` is a ``LinearSs`` in the units of ``u``
    and ``y``.
    """
    if not lam > 0:
        raise SpecError("lambda must be positive")
    u = np.asarray(u, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y))):
        raise SpecError("record must be finite")
    n = linear.n
    M, rhs = _state_ls_system(linear, u, y, lam)
    N = (M.T @ M).tocsc()
    b = M.T @ rhs
    singular = RankDeficientError(
        f"state estimation system is singular for lambda={lam}; try a larger lambda")
    try:
        lu = scipy.sparse.linalg.splu(N)
    except RuntimeError as exc:
        raise singular from exc
    piv = np.abs(lu.U.diagonal())
    if not piv.min() > 1e-13 * piv.max():
        raise singular
    x = lu.solve(b)
    if not np.all(np.isfinite(x)) or \
            np.linalg.norm(N @ x - b) > 1e-8 * max(np.linalg.norm(b), 1e-300):
        raise singular
    X = x.reshape(u.size, n)
    e_data = y - X @ linear.C[0] - linear.D[0, 0] * u
    e_model = X[1:] - X[:-1] @ linear.A.T - np.outer(u[:-1], linear.B[:, 0])
    return StateEstimate(X, lam, float(e_data @ e_data), float(np.sum(e_model ** 2)))


def fit_static_networks(states, u, y, linear, n_f, n_g, weights=None, restarts=5,
                        seed=0, lm_options=None):
    """Fit ``f_NL`` and ``g_NL`` to the residuals of the linear model along
    estimated state sequences.

    ``states`` is one ``StateEstimate`` (or a list, one per operating
    point, with matching lists ``u``, ``y`` and optional per-record
    ``weights``).  Returns ``(f_nl, g_nl)``.
    """
    if isinstance(states, StateEstimate):
        states, u, y = [states], [u], [y]
        weights = None if weights is None else [weights]
    A, B, C, D = linear.A, linear.B[:, 0], linear.C[0], linear.D[0, 0]
    n = A.shape[0]
    Zf, Tf, Zg, Tg, Wf, Wg = [], [], [], [], [], []
    for j, (st, uj, yj) in enumerate(zip(states, u, y)):
        X = st.states
        uj, yj = np.ravel(uj), np.ravel(yj)
        if X.shape[0] != uj.size:
            raise SpecError("state estimate length does not match the record")
        wj = 1.0 if weights is None else float(weights[j])
        Z = np.concatenate([X, uj[:, None]], axis=1)
        Zf.append(Z[:-1])
        Tf.append(X[1:] - X[:-1] @ A.T - np.outer(uj[:-1], B))
        Zg.append(Z)
        Tg.append(yj - X @ C - D * uj)
        Wf.append(np.full(uj.size - 1, wj))
        Wg.append(np.full(uj.size, wj))
    Zf, Tf, Zg, Tg = map(np.concatenate, (Zf, Tf, Zg, Tg))
    Wf, Wg = np.concatenate(Wf), np.concatenate(Wg)
    if weights is None:
        Wf = Wg = None
    f_nl = fit_static_net(Zf, Tf, n_f, Wf, restarts, seed, lm_options) \
        if n_f else ZeroNet(n + 1, n)
    g_nl = fit_static_net(Zg, Tg[:, None], n_g, Wg, restarts, seed + 1, lm_options) \
        if n_g else ZeroNet(n + 1, 1)
    return f_nl, g_nl


def fit_nnlss(dataset, n, n_f, n_g, lam=None, restarts=3, seed=0,
              lam_grid=(1e-2, 1e-1, 1.0, 1e1, 1e2), static_restarts=5,
              bla_operating_point=None, warmup_periods=1, lm_options=None,
              linear=None, deadline=None, start="equilibrium"):
    """Four-step NN-NLSS identification.

    1-2. Optimized linear model (``fit_linear_ss``).
    2.   State sequences per operating point by the ``lam`` trade-off; when
         ``lam`` is None every value of ``lam_grid`` is tried and the one
         whose initialized model simulates best on the estimation data is
         kept.
    3.   Static networks fitted on the linear-model residuals.
    4.   All parameters refined by Levenberg-Marquardt on the pooled
         simulation error.

    Steps 3-4 are repeated for ``restarts`` seeds; the model with the
    lowest estimation cost is returned.
    """
    if n < 1:
        raise SpecError("state dimension must be at least one")
    if linear is None:
        linear = fit_linear_ss(dataset, n, bla_operating_point, warmup_periods,
                               lm_options, deadline)
    U, Y = dataset.period_means()
    std = linear.standardization
    us = (U - std.u_center) / std.u_scale
    ys = (Y - std.y_center) / std.y_scale
    wts = output_weights(Y)
    wts = wts / wts.mean()
    ss = linear.linear
    base = NnNlssModel(linear.A, linear.B, linear.C, linear.D, standardization=std)
    base_prob = _PooledProblem(base, U, Y, warmup_periods, deadline=deadline, start=start)
    linear_cost = base_prob.cost(base.params())

    def states_for(lam_):
        # tile so that the estimate covers a full steady-state period
        out = []
        for uj, yj in zip(us, ys):
            st = estimate_states(ss, np.tile(uj, 2), np.tile(yj, 2), lam_)
            out.append(StateEstimate(st.states[-uj.size:], lam_))
        return out

    def initialized(lam_, seed_):
        st = states_for(lam_)
        f_nl, g_nl = fit_static_networks(st, list(us), list(ys), ss, n_f, n_g,
                                         wts, static_restarts, seed_, opts)
        return NnNlssModel(linear.A, linear.B, linear.C, linear.D, f_nl, g_nl, std)

    def init_cost(model):
        prob = _PooledProblem(model, U, Y, warmup_periods, deadline=deadline, start=start)
        try:
            return prob.cost(model.params())
        except DivergenceError:
            return np.inf

    if n_f == 0 and n_g == 0:
        out = base
        out.fit_info = {"linear_cost": linear_cost, "cost": linear_cost, "lam": None}
        return out
    opts = _lm_options(lm_options, deadline)
    if lam is None:
        scores = []
        for lam_ in lam_grid:
            try:
                scores.append(init_cost(initialized(lam_, seed)))
            except RankDeficientError:
                scores.append(np.inf)
        lam = float(lam_grid[int(np.argmin(scores))])
    best = None
    for k in range(max(int(restarts), 1)):
        model0 = initialized(lam, seed + 1000 * k)
        prob = _PooledProblem(model0, U, Y, warmup_periods, deadline=deadline, start=start)
        theta0 = model0.params()
        c0 = init_cost(model0)
        if not np.isfinite(c0) or c0 > linear_cost:
            # networks that destabilize the simulation restart from silent
            # output layers, which reproduce the linear model exactly
            model0 = _silenced(model0, linear.F0)
            theta0 = model0.params()
        res = prob.optimize(theta0, opts)
        if best is None or res.cost < best[1].cost:
            best = (model0, res)
    model0, res = best
    out = model0.with_params(res.x)
    out.fit_info = {"linear_cost": linear_cost, "initial_cost": res.initial_cost,
                    "cost": res.cost, "status": res.status, "lam": lam,
                    "iterations": res.iterations}
    return out


def _silenced(model, bias=0.0):
    """Copy with zero network outputs; ``g_NL`` keeps the constant ``bias``."""
    def silent(net, c):
        if net.n_params == 0:
            return net
        return SigmoidNet(net.V, net.w, np.zeros_like(net.G), np.full_like(net.c, c),
                          net.in_center, net.in_scale)
    return NnNlssModel(model.A, model.B, model.C, model.D, silent(model.f_nl, 0.0),
                       silent(model.g_nl, bias), model.standardization)
