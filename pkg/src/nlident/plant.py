"""Benchmark data generators.

A Bergman-type minimal model of the insulin-glucose loop stands in for the
full glucoregulatory simulator; its parameter values are configuration, not
physiology.  Exactly known Wiener and polynomial state-space systems serve
as recovery oracles for the identification routines.

Surrogate plant (time in minutes, ``u`` insulin infusion in pmol/min)::

    dG/dt = -p1 (G - Gb) - X G
    dX/dt = -p2 X + p3 (I - Ib)
    dI/dt = -n I + (u / Vi) (1 + s) / (1 + s u / u_b),   u_b = n Ib Vi

The saturating infusion term equals ``u / Vi`` at the basal rate ``u_b`` so
``(Gb, 0, Ib)`` is the equilibrium for ``u = u_b``, and it makes the
static gain and the dynamics depend on the operating point.
"""

from dataclasses import dataclass, asdict

import numpy as np
import scipy.signal

from .basis import eval_monomial_rows, monomial_exponents
from .exceptions import DivergenceError, SpecError
from .freqid import RationalTf
from .signals import Dataset, OperatingPoint, SampledRecord


@dataclass(frozen=True)
class MinimalModelParams:
    p1: float = 0.03       # 1/min, glucose effectiveness
    p2: float = 0.025      # 1/min, remote insulin decay
    p3: float = 2.5e-6     # 1/min per pmol/L, insulin action gain
    Gb: float = 120.0      # mg/dL
    Ib: float = 156.25     # pmol/L
    n_clear: float = 0.16  # 1/min
    Vi: float = 12.0       # L
    saturation: float = 1.0

    def __post_init__(self):
        for name in ("p1", "p2", "p3", "n_clear", "Vi", "Gb", "Ib"):
            if not getattr(self, name) > 0:
                raise SpecError(f"{name} must be strictly positive")
        if self.saturation < 0:
            raise SpecError("saturation must be nonnegative")

    @property
    def basal_rate(self):
        """Infusion rate that sustains ``Ib`` (pmol/min)."""
        return self.n_clear * self.Ib * self.Vi

    def infusion(self, u):
        s = self.saturation
        return (u / self.Vi) * (1.0 + s) / (1.0 + s * u / self.basal_rate)

    def to_dict(self):
        return asdict(self)


def _vector_field(p, x, u):
    G, X, I = x[..., 0], x[..., 1], x[..., 2]
    dG = -p.p1 * (G - p.Gb) - X * G
    dX = -p.p2 * X + p.p3 * (I - p.Ib)
    dI = -p.n_clear * I + p.infusion(u)
    return np.stack([dG, dX, dI], axis=-1)


def equilibrium(params, basal_insulin):
    """Steady state ``[G, X, I]`` for a constant infusion rate."""
    if not basal_insulin > 0:
        raise SpecError("basal insulin must be positive")
    I = params.infusion(basal_insulin) / params.n_clear
    X = params.p3 / params.p2 * (I - params.Ib)
    if params.p1 + X <= 0:
        raise SpecError(f"no positive-glucose equilibrium for infusion {basal_insulin}")
    G = params.p1 * params.Gb / (params.p1 + X)
    return np.array([G, X, I])


def integrate_plant(params, U, Ts, x0, substeps=10):
    """Fixed-step RK4 with zero-order-hold input.

    ``U`` has shape ``(T,)`` or ``(T, batch)``; ``x0`` matching
    ``(3,)``/``(batch, 3)``.  Returns the state at every sample instant,
    shape ``(T, [batch,] 3)``.
    """
    U = np.asarray(U, dtype=float)
    x = np.array(x0, dtype=float)
    h = Ts / substeps
    out = np.empty(U.shape + (3,))
    for t in range(U.shape[0]):
        out[t] = x
        u = U[t]
        for _ in range(substeps):
            k1 = _vector_field(params, x, u)
            k2 = _vector_field(params, x + 0.5 * h * k1, u)
            k3 = _vector_field(params, x + 0.5 * h * k2, u)
            k4 = _vector_field(params, x + h * k3, u)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"plant state became non-finite at sample {t}", t)
    return out


def simulate_plant(params, insulin, init=None, substeps=10):
    """Glucose response of the surrogate plant to an insulin record.

    Starts from the equilibrium for ``insulin.offset`` unless ``init`` is
    given.  The output is sampled at the input's sampling period.
    """
    u = insulin.samples
    if np.any(u < 0):
        raise SpecError("insulin infusion must be nonnegative")
    x0 = equilibrium(params, insulin.offset) if init is None else init
    X = integrate_plant(params, u, insulin.sampling_period, x0, substeps)
    G = X[:, 0]
    g_eq = equilibrium(params, insulin.offset)[0] if insulin.offset > 0 else float(G.mean())
    return insulin.with_samples(G, offset=g_eq)


# ------------------------------------------------------------------ oracles

@dataclass(frozen=True, eq=False)
class SyntheticWienerSpec:
    """LTI block followed by ``sum_k beta_k r**k``."""
    lti: RationalTf
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        if self.lti.poles.size and np.max(np.abs(self.lti.poles)) >= 1:
            raise SpecError("Wiener LTI block must be stable")

    def to_model(self):
        from .blocknl import PolyNl, WienerModel
        return WienerModel(self.lti, PolyNl(self.beta))


@dataclass(frozen=True, eq=False)
class SyntheticPnlssSpec:
    """Polynomial state-space generator, monomials in ``(x_1..x_n, u)``."""
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    F: np.ndarray
    degrees: tuple = (2,)
    bound: float = 1e8

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", np.asarray(self.B, dtype=float).reshape(n))
        object.__setattr__(self, "C", np.asarray(self.C, dtype=float).reshape(n))
        object.__setattr__(self, "D", float(np.asarray(self.D).ravel()[0]))
        m = monomial_exponents(n + 1, self.degrees).shape[0]
        object.__setattr__(self, "E", np.asarray(self.E, dtype=float).reshape(n, m))
        object.__setattr__(self, "F", np.asarray(self.F, dtype=float).reshape(m))
        object.__setattr__(self, "degrees", tuple(int(d) for d in self.degrees))
        if n and np.max(np.abs(np.linalg.eigvals(A))) >= 1:
            raise SpecError("spectral radius of A must be below one")

    def to_model(self):
        from .nlss import PnlssModel
        return PnlssModel.from_matrices(self.A, self.B, self.C, self.D, self.E,
                                        self.F, self.degrees)


def simulate_synthetic(spec, input, bound=None):
    """Exact discrete-time simulation of an oracle system from rest."""
    u = input.samples
    if isinstance(spec, SyntheticWienerSpec):
        r = scipy.signal.lfilter(spec.lti.b, spec.lti.a, u)
        y = np.polynomial.polynomial.polyval(r, spec.beta)
    elif isinstance(spec, SyntheticPnlssSpec):
        bound = spec.bound if bound is None else bound
        n = spec.A.shape[0]
        expo = monomial_exponents(n + 1, spec.degrees)
        x = np.zeros(n)
        y = np.empty(u.size)
        for t in range(u.size):
            z = np.append(x, u[t])
            zeta = eval_monomial_rows(z, expo)
            y[t] = spec.C @ x + spec.D * u[t] + spec.F @ zeta
            x = spec.A @ x + spec.B * u[t] + spec.E @ zeta
            if not (np.all(np.isfinite(x)) and np.max(np.abs(x)) < bound):
                raise DivergenceError(f"synthetic PNLSS diverged at sample {t}", t)
    elif hasattr(spec, "simulate_from_rest"):
        y = spec.simulate_from_rest(u)
    else:
        raise TypeError(f"unsupported synthetic system {type(spec).__name__}")
    if bound is not None and np.max(np.abs(y)) > bound:
        raise DivergenceError("synthetic output exceeded its bound")
    return input.with_samples(y, offset=float(np.mean(y)))


# ------------------------------------------------------------------ datasets

def generate_dataset(system, excitation, offsets, periods, role="estimation",
                     noise_std=0.0, seed=0, substeps=10, meta=None):
    """Simulate ``system`` at each operating point and keep the steady state.

    ``excitation`` is one period of the zero-mean excitation (a
    ``SampledRecord``, or one per operating point).  Each operating point
    is simulated for ``periods + 1`` periods and the first is discarded.
    ``system`` is ``MinimalModelParams`` or a synthetic oracle spec.
    """
    excitations = excitation if isinstance(excitation, (list, tuple)) else [excitation] * len(offsets)
    offsets = [float(o) for o in offsets]
    rng = np.random.Generator(np.random.Philox(int(seed)))
    N = excitations[0].period_length
    Ts = excitations[0].sampling_period
    base = np.stack([np.tile(exc.samples[-N:], periods + 1) + off
                     for off, exc in zip(offsets, excitations)], axis=1)
    if isinstance(system, MinimalModelParams):
        if np.any(base < 0):
            raise SpecError("insulin infusion must be nonnegative")
        x0 = np.stack([equilibrium(system, off) for off in offsets])
        Y = integrate_plant(system, base, Ts, x0, substeps)[..., 0]
    else:
        Y = np.stack([simulate_synthetic(system, SampledRecord(base[:, j], Ts, N, periods + 1, off)).samples
                      for j, off in enumerate(offsets)], axis=1)
    ops = []
    for j, off in enumerate(offsets):
        y = Y[N:, j]
        if noise_std > 0:
            y = y + noise_std * rng.standard_normal(y.size)
        u_rec = SampledRecord(base[N:, j], Ts, N, periods, off)
        y_rec = SampledRecord(y, Ts, N, periods, float(np.mean(y)))
        ops.append(OperatingPoint(off, u_rec, y_rec))
    return Dataset(tuple(ops), role, dict(meta or {}))
