"""Block-oriented models.

Single-branch Wiener models (an LTI block followed by a static polynomial
or a one-hidden-layer tanh network) identified in three steps, and
Wiener-Schetzen models: a bank of orthonormal basis filters built from the
BLA poles followed by a multivariate polynomial, which is linear in its
parameters.

All fitting routines pool the operating points of a dataset into one model.
The input keeps its operating-point offset and the simulation is the
periodic steady state, computed exactly on the DFT grid.  The pooled cost
weights every operating point by the inverse variance of its output, so it
is the sum of squared relative errors.
"""

import re
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.signal

from .basis import eval_monomial_rows, monomial_exponents
from .exceptions import SpecError, UnstableModelError
from .freqid import RationalTf, periodic_filter
from .optim import LmOptions, LsqProblem, levenberg_marquardt
from .signals import SampledRecord, output_weights

SCHEMA_VERSION = 1


# ------------------------------------------------------------------ static maps

@dataclass(frozen=True, eq=False)
class PolyNl:
    """``y = sum_k beta_k s**k`` with ``s = (r - center) / scale``."""
    beta: np.ndarray
    center: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        if not self.scale > 0:
            raise SpecError("scale must be positive")

    @property
    def degree(self):
        return self.beta.size - 1

    @property
    def n_params(self):
        return self.beta.size

    def params(self):
        return self.beta.copy()

    def with_params(self, theta):
        return PolyNl(theta, self.center, self.scale)

    def __call__(self, r):
        s = (np.asarray(r, dtype=float) - self.center) / self.scale
        return np.polynomial.polynomial.polyval(s, self.beta)

    def jacobian(self, r):
        """Returns ``(y, dy/dparams, dy/dr)``."""
        s = (np.asarray(r, dtype=float) - self.center) / self.scale
        V = s[..., None] ** np.arange(self.beta.size)
        y = V @ self.beta
        dbeta = np.arange(1, self.beta.size) * self.beta[1:]
        dr = np.polynomial.polynomial.polyval(s, dbeta) / self.scale if dbeta.size else np.zeros_like(s)
        return y, V, dr

    def to_dict(self):
        return {"kind": "poly", "beta": self.beta.tolist(),
                "center": float(self.center), "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["beta"], d.get("center", 0.0), d.get("scale", 1.0))


@dataclass(frozen=True, eq=False)
class SigmoidNet:
    """One-hidden-layer tanh network ``c + G tanh(V s + w)``.

    ``s = (x - in_center) / in_scale`` elementwise.  Shapes: ``V`` is
    ``(h, n_in)``, ``w`` is ``(h,)``, ``G`` is ``(n_out, h)`` and ``c`` is
    ``(n_out,)``.  A network without hidden units is identically zero and
    has no parameters.
    """
    V: np.ndarray
    w: np.ndarray
    G: np.ndarray
    c: np.ndarray
    in_center: np.ndarray = None
    in_scale: np.ndarray = None

    def __post_init__(self):
        V = np.atleast_2d(np.asarray(self.V, dtype=float))
        h = np.asarray(self.w).size
        if V.size == 0:
            raise SpecError("use SigmoidNet.zero for a network without hidden units")
        n_in = V.shape[1]
        G = np.asarray(self.G, dtype=float).reshape(-1, h)
        c = np.asarray(self.c, dtype=float).reshape(G.shape[0])
        object.__setattr__(self, "V", V.reshape(h, n_in))
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).reshape(h))
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "c", c)
        mu = np.zeros(n_in) if self.in_center is None else np.asarray(self.in_center, dtype=float).reshape(n_in)
        sd = np.ones(n_in) if self.in_scale is None else np.asarray(self.in_scale, dtype=float).reshape(n_in)
        if np.any(~(sd > 0)):
            raise SpecError("input scales must be positive")
        object.__setattr__(self, "in_center", mu)
        object.__setattr__(self, "in_scale", sd)
        for k in ("V", "w", "G", "c"):
            if not np.all(np.isfinite(getattr(self, k))):
                raise SpecError("network weights must be finite")

    @classmethod
    def scalar(cls, v, w, gamma, c, center=0.0, scale=1.0):
        """Scalar-input, scalar-output network from per-unit weights."""
        v = np.atleast_1d(np.asarray(v, dtype=float))
        return cls(v[:, None], w, np.atleast_1d(gamma)[None, :], [c], [center], [scale])

    @staticmethod
    def zero(n_in, n_out):
        return ZeroNet(n_in, n_out)

    @property
    def n_hidden(self):
        return self.w.size

    @property
    def n_in(self):
        return self.V.shape[1]

    @property
    def n_out(self):
        return self.G.shape[0]

    @property
    def n_params(self):
        h, n_in, n_out = self.n_hidden, self.n_in, self.n_out
        return h * n_in + h + n_out * h + n_out

    def params(self):
        return np.concatenate([self.V.ravel(), self.w, self.G.ravel(), self.c])

    def with_params(self, theta):
        h, n_in, n_out = self.n_hidden, self.n_in, self.n_out
        theta = np.asarray(theta, dtype=float)
        i = 0
        V = theta[i:i + h * n_in].reshape(h, n_in); i += h * n_in
        w = theta[i:i + h]; i += h
        G = theta[i:i + n_out * h].reshape(n_out, h); i += n_out * h
        c = theta[i:i + n_out]
        return SigmoidNet(V, w, G, c, self.in_center, self.in_scale)

    def hidden(self, x):
        s = (np.asarray(x, dtype=float) - self.in_center) / self.in_scale
        return s, np.tanh(s @ self.V.T + self.w)

    def __call__(self, x):
        """``x`` has shape ``(..., n_in)``; returns ``(..., n_out)``."""
        _, Z = self.hidden(x)
        return Z @ self.G.T + self.c

    def jacobian(self, x):
        """Returns ``(y, dy/dparams, dy/dx)`` with shapes ``(..., n_out)``,
        ``(..., n_out, n_params)`` and ``(..., n_out, n_in)``."""
        s, Z = self.hidden(x)
        S = 1.0 - Z ** 2
        y = Z @ self.G.T + self.c
        lead = Z.shape[:-1]
        h, n_in, n_out = self.n_hidden, self.n_in, self.n_out
        GS = self.G * S[..., None, :]                      # (..., n_out, h)
        dV = GS[..., :, :, None] * s[..., None, None, :]   # (..., n_out, h, n_in)
        dG = np.zeros(lead + (n_out, n_out, h))
        idx = np.arange(n_out)
        dG[..., idx, idx, :] = Z[..., None, :]
        dc = np.broadcast_to(np.eye(n_out), lead + (n_out, n_out))
        J = np.concatenate([dV.reshape(lead + (n_out, h * n_in)), GS,
                            dG.reshape(lead + (n_out, n_out * h)), dc], axis=-1)
        dx = (GS @ self.V) / self.in_scale
        return y, J, dx

    def to_dict(self):
        return {"kind": "net", "n_hidden": self.n_hidden, "n_in": self.n_in,
                "n_out": self.n_out, "V": self.V.ravel().tolist(),
                "w": self.w.tolist(), "G": self.G.ravel().tolist(),
                "c": self.c.tolist(), "in_center": self.in_center.tolist(),
                "in_scale": self.in_scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        if d["n_hidden"] == 0:
            return ZeroNet(d["n_in"], d["n_out"])
        return cls(np.reshape(d["V"], (d["n_hidden"], d["n_in"])), d["w"],
                   np.reshape(d["G"], (d["n_out"], d["n_hidden"])), d["c"],
                   d["in_center"], d["in_scale"])


@dataclass(frozen=True)
class ZeroNet:
    """Network with no hidden units: identically zero, no parameters."""
    n_in: int
    n_out: int
    n_hidden = 0
    n_params = 0

    def params(self):
        return np.zeros(0)

    def with_params(self, theta):
        return self

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (self.n_out,))

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        return (np.zeros(lead + (self.n_out,)), np.zeros(lead + (self.n_out, 0)),
                np.zeros(lead + (self.n_out, self.n_in)))

    def to_dict(self):
        return {"kind": "net", "n_hidden": 0, "n_in": self.n_in, "n_out": self.n_out}


def eval_static_nl(nl, r):
    """Evaluate a scalar static nonlinearity pointwise."""
    r = np.asarray(r, dtype=float)
    if isinstance(nl, PolyNl):
        return nl(r)
    return nl(r[..., None])[..., 0]


def _static_jacobian(nl, r):
    if isinstance(nl, PolyNl):
        return nl.jacobian(r)
    y, J, dx = nl.jacobian(r[..., None])
    return y[..., 0], J[..., 0, :], dx[..., 0, 0]


def static_nl_from_dict(d):
    return PolyNl.from_dict(d) if d["kind"] == "poly" else SigmoidNet.from_dict(d)


# ------------------------------------------------------------------ Wiener model

@dataclass(frozen=True, eq=False)
class WienerModel:
    lti: RationalTf
    nl: object
    fit_info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.lti.poles.size and np.max(np.abs(self.lti.poles)) >= 1:
            raise UnstableModelError("Wiener LTI block must be stable")

    @property
    def n_params(self):
        return self.lti.n_params + self.nl.n_params

    def simulate(self, u, periodic=True):
        """Steady-state response to the periodic extension of ``u``, or the
        response from rest when ``periodic`` is false."""
        r = self.lti.periodic_filter(u) if periodic else self.lti.lfilter(u)
        return eval_static_nl(self.nl, r)

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, "kind": "wiener",
                "lti": self.lti.to_dict(), "nl": self.nl.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(RationalTf.from_dict(d["lti"]), static_nl_from_dict(d["nl"]))


def _lti_response_and_jacobian(theta_lti, n_a, n_b, Uf, N, want_jac=True):
    """Periodic output of ``B/A`` for the rows of ``Uf`` (rfft of inputs)
    and its derivatives with respect to ``[a_1..a_na, b_0..b_nb]``."""
    a = np.concatenate([[1.0], theta_lti[:n_a]])
    b = theta_lti[n_a:n_a + n_b + 1]
    if n_a and np.max(np.abs(np.roots(a))) >= 1:
        raise UnstableModelError("trial LTI block unstable")
    z1 = np.exp(-2j * np.pi * np.arange(Uf.shape[-1]) / N)
    A = np.polyval(a[::-1], z1)
    B = np.polyval(b[::-1], z1)
    R = np.fft.irfft(B / A * Uf, n=N, axis=-1)
    if not want_jac:
        return R, None
    cols = [-(z1 ** i) * B / A ** 2 for i in range(1, n_a + 1)]
    cols += [z1 ** k / A for k in range(n_b + 1)]
    dR = np.fft.irfft(np.stack(cols, axis=-1) * Uf[..., None], n=N, axis=-2)
    return R, dR


def _wiener_problem(U, Y, wts, n_a, n_b, nl):
    """Weighted pooled simulation-error problem over ``[lti, nl]``."""
    N = U.shape[-1]
    Uf = np.fft.rfft(U, axis=-1)
    sw = np.sqrt(wts)[:, None]
    n_lti = n_a + n_b + 1

    def split(theta):
        return theta[:n_lti], nl.with_params(theta[n_lti:])

    def residual(theta):
        tl, f = split(theta)
        R, _ = _lti_response_and_jacobian(tl, n_a, n_b, Uf, N, want_jac=False)
        return (sw * (eval_static_nl(f, R) - Y)).ravel()

    def jacobian(theta):
        tl, f = split(theta)
        R, dR = _lti_response_and_jacobian(tl, n_a, n_b, Uf, N)
        _, Jnl, dr = _static_jacobian(f, R)
        J = np.concatenate([dr[..., None] * dR, Jnl], axis=-1)
        return (sw[..., None] * J).reshape(-1, theta.size)

    return residual, jacobian


def parse_nl_kind(kind):
    """``'poly(3)'`` -> ``('poly', 3)``; tuples pass through."""
    if isinstance(kind, str):
        m = re.fullmatch(r"\s*(poly|net)\s*\(\s*(\d+)\s*\)\s*", kind)
        if not m:
            raise SpecError(f"unknown nonlinearity {kind!r}; expected poly(d) or net(n)")
        kind = (m.group(1), int(m.group(2)))
    name, size = kind
    if name not in ("poly", "net") or int(size) < (0 if name == "poly" else 1):
        raise SpecError(f"invalid nonlinearity {kind!r}")
    return name, int(size)


def fit_poly_nl(r, y, degree, weights=None, center=None, scale=None):
    """Weighted linear least-squares fit of ``PolyNl`` on standardized ``r``."""
    r, y = np.ravel(r), np.ravel(y)
    center = float(np.mean(r)) if center is None else center
    scale = float(np.std(r)) if scale is None else scale
    if not scale > 0:
        raise SpecError("intermediate signal r(t) has zero variance")
    sw = np.ones_like(r) if weights is None else np.sqrt(np.ravel(weights))
    s = (r - center) / scale
    V = s[:, None] ** np.arange(degree + 1)
    beta = scipy.linalg.lstsq(V * sw[:, None], y * sw, lapack_driver="gelsd")[0]
    return PolyNl(beta, center, scale)


def fit_static_net(x, y, n_hidden, weights=None, restarts=5, seed=0,
                   lm_options=None, center=None, scale=None):
    """Fit a tanh network to a static regression ``x -> y``.

    ``x`` is ``(T, n_in)`` (or ``(T,)``), ``y`` is ``(T, n_out)`` (or
    ``(T,)``).  Each restart draws input weights uniformly, scaled by the
    inverse range of the standardized inputs, sets the output layer by
    linear least squares and refines everything by Levenberg-Marquardt.
    Returns the network with the lowest cost; ``.fit_info`` holds costs.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x2 = x.reshape(x.shape[0], -1)
    y2 = y.reshape(y.shape[0], -1)
    T, n_in = x2.shape
    n_out = y2.shape[1]
    mu = x2.mean(axis=0) if center is None else np.broadcast_to(center, (n_in,)).astype(float)
    sd = x2.std(axis=0) if scale is None else np.broadcast_to(scale, (n_in,)).astype(float)
    sd = np.where(sd > 0, sd, 1.0)
    s = (x2 - mu) / sd
    rng_ = np.ptp(s, axis=0)
    rng_ = np.where(rng_ > 0, rng_, 1.0)
    sw = np.ones(T) if weights is None else np.sqrt(np.ravel(weights))
    zero_cost = float(np.sum((sw[:, None] * y2) ** 2))
    if n_hidden == 0:
        return ZeroNet(n_in, n_out)
    gen = np.random.Generator(np.random.Philox(int(seed)))
    opts = lm_options or LmOptions(max_iterations=300)
    best, best_cost = None, np.inf
    for _ in range(max(int(restarts), 1)):
        V = gen.uniform(-2.0, 2.0, (n_hidden, n_in)) / rng_
        w = gen.uniform(-1.0, 1.0, n_hidden)
        Z = np.tanh(s @ V.T + w)
        H = np.concatenate([Z, np.ones((T, 1))], axis=1) * sw[:, None]
        out = scipy.linalg.lstsq(H, y2 * sw[:, None], lapack_driver="gelsd")[0]
        net0 = SigmoidNet(V, w, out[:-1].T, out[-1], mu, sd)

        def residual(theta, net0=net0):
            return (sw[:, None] * (net0.with_params(theta)(x2) - y2)).ravel()

        def jacobian(theta, net0=net0):
            _, J, _ = net0.with_params(theta).jacobian(x2)
            return (sw[:, None, None] * J).reshape(-1, theta.size)

        res = levenberg_marquardt(LsqProblem(residual, jacobian), net0.params(), opts)
        if res.cost < best_cost:
            best, best_cost = net0.with_params(res.x), res.cost
    if best_cost > zero_cost:
        warnings.warn("static network fit is worse than the zero network; returning zero output weights")
        best = best.with_params(np.concatenate([best.V.ravel(), best.w,
                                                np.zeros(best.G.size), np.zeros(n_out)]))
        best_cost = zero_cost
    object.__setattr__(best, "fit_info", {"cost": best_cost, "zero_cost": zero_cost})
    return best


def _affine_net(beta, center, scale, n_hidden, eps=1e-5):
    """A tanh network reproducing ``beta_0 + beta_1 s`` up to ``O(eps**2)``."""
    V = np.zeros((n_hidden, 1))
    V[:, 0] = eps
    G = np.zeros((1, n_hidden))
    G[0, 0] = beta[1] / eps
    return SigmoidNet(V, np.zeros(n_hidden), G, [beta[0]], [center], [scale])


def fit_wiener(dataset, bla, nl="poly(3)", restarts=5, seed=0, lm_options=None):
    """Three-step Wiener identification on all operating points of a dataset.

    1. The BLA is taken as the LTI block.
    2. ``r(t)`` is simulated through it and the static nonlinearity is
       fitted: a polynomial by linear least squares, a network by
       Levenberg-Marquardt from ``restarts`` seeded initializations.
    3. All LTI and nonlinearity parameters are refined jointly by
       Levenberg-Marquardt on the weighted pooled simulation error.

    For a network the joint refinement is also started from the fitted
    affine model embedded in a network, and the better of the two results
    is kept, so a network never ends up worse than the affine fit.
    """
    kind, size = parse_nl_kind(nl)
    U, Y = dataset.period_means()
    wts = output_weights(Y)
    N = U.shape[1]
    n_a, n_b = bla.n_a, bla.n_b
    r = bla.periodic_filter(U.T).T
    if not np.std(r) > 0:
        raise SpecError("intermediate signal r(t) has zero variance")
    W = np.repeat(wts[:, None], N, axis=1)
    if kind == "poly":
        starts = [(bla, fit_poly_nl(r, Y, size, W))]
    else:
        starts = [(bla, fit_static_net(r.ravel(), Y.ravel(), size, W.ravel(), restarts,
                                      seed, lm_options))]
        lin = fit_wiener(dataset, bla, ("poly", 1), lm_options=lm_options)
        starts.append((lin.lti, _affine_net(lin.nl.beta, lin.nl.center, lin.nl.scale, size)))
    opts = lm_options or LmOptions(max_iterations=200)
    best = None
    for lti, nl0 in starts:
        residual, jacobian = _wiener_problem(U, Y, wts, n_a, n_b, nl0)
        theta0 = np.concatenate([lti.theta(), nl0.params()])
        info = {"warning": None}
        try:
            res = levenberg_marquardt(LsqProblem(residual, jacobian), theta0, opts)
            theta, cost, init_cost, status = res.x, res.cost, res.initial_cost, res.status
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            theta = theta0
            cost = init_cost = float(np.sum(residual(theta0) ** 2))
            status, info["warning"] = "failed", f"joint optimization failed: {exc}"
            warnings.warn(info["warning"])
        info.update(initial_cost=init_cost, cost=cost, status=status)
        if best is None or cost < best[1]["cost"]:
            best = (theta, info, nl0)
    theta, info, nl0 = best
    n_lti = n_a + n_b + 1
    lti = RationalTf.from_theta(theta[:n_lti], n_a, n_b)
    return WienerModel(lti, nl0.with_params(theta[n_lti:]), info)


def wiener_cost_functions(dataset, model):
    """Residual and analytic Jacobian of the pooled weighted simulation error
    of a Wiener model, as functions of ``[a, b, nl params]``."""
    U, Y = dataset.period_means()
    residual, jacobian = _wiener_problem(U, Y, output_weights(Y), model.lti.n_a,
                                         model.lti.n_b, model.nl)
    return residual, jacobian, np.concatenate([model.lti.theta(), model.nl.params()])


# ------------------------------------------------------------------ OBF

def _conjugate_sections(poles):
    """Group a conjugate-closed pole list into real poles and pairs, in order
    of first appearance."""
    poles = [complex(p) for p in np.atleast_1d(poles)]
    for p in poles:
        if not abs(p) < 1:
            raise SpecError(f"basis pole {p} is not strictly inside the unit circle")
    tol = 1e-10
    remaining = list(poles)
    sections = []
    while remaining:
        p = remaining.pop(0)
        if abs(p.imag) <= tol * max(1.0, abs(p)):
            sections.append(("real", p.real))
            continue
        match = [i for i, q in enumerate(remaining) if abs(q - p.conjugate()) <= 1e-8 * max(1.0, abs(p))]
        if not match:
            raise SpecError(f"pole {p} has no conjugate partner")
        remaining.pop(match[0])
        sections.append(("pair", p if p.imag > 0 else p.conjugate()))
    return sections


def _section_filters(kind, p):
    """``(list of (b, a) basis filters, (b, a) all-pass)`` in ``q^-1``."""
    if kind == "real":
        k = np.sqrt(1.0 - p * p)
        a = np.array([1.0, -p])
        return [(np.array([0.0, k]), a)], (np.array([-p, 1.0]), a)
    mod2 = abs(p) ** 2
    b = 2 * p.real / (1 + mod2)
    c = -mod2
    beta = b * (c - 1)
    a = np.array([1.0, beta, -c])
    k1 = np.sqrt(1 - c * c)
    k2 = np.sqrt((1 - c * c) * (1 - b * b))
    return ([(np.array([0.0, k1, -k1 * b]), a), (np.array([0.0, 0.0, k2]), a)],
            (np.array([-c, beta, 1.0]), a))


class ObfBasis:
    """Real Takenaka-Malmquist orthonormal basis.

    A real pole ``p`` contributes ``sqrt(1 - p**2) / (q - p)``; a pair of
    complex conjugate poles contributes the two real second-order (Kautz)
    functions spanning the same space as the two complex functions.  Each
    section is preceded by the all-pass factors of all earlier sections.
    """

    def __init__(self, poles):
        self.sections = _conjugate_sections(poles)
        self.filters = []
        self.allpasses = []
        for kind, p in self.sections:
            f, ap = _section_filters(kind, p)
            self.filters.append(f)
            self.allpasses.append(ap)
        self.poles = np.array([p for kind, p in self.sections
                               for p in ((p,) if kind == "real" else (p, np.conj(p)))],
                              dtype=complex)

    @property
    def size(self):
        return sum(len(f) for f in self.filters)

    def lfilter(self, u):
        """Responses from rest, shape ``(T, m)``."""
        x = np.asarray(u, dtype=float)
        out = []
        for fs, (bp, ap) in zip(self.filters, self.allpasses):
            out += [scipy.signal.lfilter(b, a, x) for b, a in fs]
            x = scipy.signal.lfilter(bp, ap, x)
        return np.stack(out, axis=-1) if out else np.zeros((x.size, 0))

    def freqresp(self, omega):
        """Frequency responses, shape ``(len(omega), m)``."""
        z1 = np.exp(-1j * np.asarray(omega, dtype=float))
        prefix = np.ones_like(z1)
        out = []
        for fs, (bp, ap) in zip(self.filters, self.allpasses):
            for b, a in fs:
                out.append(prefix * np.polyval(b[::-1], z1) / np.polyval(a[::-1], z1))
            prefix = prefix * np.polyval(bp[::-1], z1) / np.polyval(ap[::-1], z1)
        return np.stack(out, axis=-1) if out else np.zeros(z1.shape + (0,), dtype=complex)

    def periodic_filter(self, u):
        """Steady-state responses to the periodic extension of ``u`` along its
        last axis; shape ``u.shape + (m,)``."""
        u = np.asarray(u, dtype=float)
        N = u.shape[-1]
        H = self.freqresp(2 * np.pi * np.arange(N // 2 + 1) / N)
        return np.fft.irfft(np.fft.rfft(u, axis=-1)[..., None] * H, n=N, axis=-2)

    def impulse_responses(self, length):
        d = np.zeros(length)
        d[0] = 1.0
        return self.lfilter(d)


def build_obf(poles):
    """Orthonormal basis filters for a conjugate-closed set of stable poles."""
    return ObfBasis(poles)


def order_poles(poles):
    """Conjugate-closed ordering: real poles, then pairs (upper half first),
    each group sorted by modulus."""
    poles = np.asarray(poles, dtype=complex)
    real = sorted([p.real for p in poles if abs(p.imag) <= 1e-10 * max(1, abs(p))], key=abs)
    upper = sorted([p for p in poles if p.imag > 1e-10 * max(1, abs(p))], key=abs)
    out = [complex(p) for p in real]
    for p in upper:
        out += [p, p.conjugate()]
    return np.array(out, dtype=complex)


# ------------------------------------------------------------------ Wiener-Schetzen

@dataclass(frozen=True, eq=False)
class WienerSchetzenModel:
    """Orthonormal filter bank followed by multivariate polynomials.

    ``coefficients`` has one row per submodel; the output is
    ``sum_s weights[s] * (phi(r) @ coefficients[s])`` where ``phi`` are the
    monomials (``exponents``) of the standardized filter outputs.
    """
    poles: np.ndarray
    exponents: np.ndarray
    coefficients: np.ndarray
    centers: np.ndarray
    scales: np.ndarray
    weights: np.ndarray = None
    fit_info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        poles = np.asarray(self.poles, dtype=complex).ravel()
        basis = ObfBasis(poles)
        m = basis.size
        expo = np.asarray(self.exponents, dtype=int).reshape(-1, m)
        coef = np.atleast_2d(np.asarray(self.coefficients, dtype=float))
        if coef.shape[1] != expo.shape[0]:
            raise SpecError("coefficient count does not match the monomial basis")
        wts = np.ones(coef.shape[0]) if self.weights is None else np.asarray(self.weights, dtype=float)
        if wts.shape != (coef.shape[0],):
            raise SpecError("one combination weight per submodel required")
        object.__setattr__(self, "poles", poles)
        object.__setattr__(self, "exponents", expo)
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "centers", np.asarray(self.centers, dtype=float).reshape(m))
        object.__setattr__(self, "scales", np.asarray(self.scales, dtype=float).reshape(m))
        object.__setattr__(self, "weights", wts)
        object.__setattr__(self, "_basis", basis)

    @property
    def basis(self):
        return self._basis

    @property
    def n_basis(self):
        return self._basis.size

    @property
    def n_submodels(self):
        return self.coefficients.shape[0]

    @property
    def n_params(self):
        n = self.coefficients.size
        return n + (self.n_submodels if self.n_submodels > 1 else 0)

    def regressors(self, u, periodic=True):
        R = self._basis.periodic_filter(u) if periodic else self._basis.lfilter(u)
        return eval_monomial_rows((R - self.centers) / self.scales, self.exponents)

    def simulate(self, u, periodic=True):
        Phi = self.regressors(u, periodic)
        return (Phi @ self.coefficients.T) @ self.weights

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, "kind": "wiener_schetzen",
                "poles": [[p.real, p.imag] for p in self.poles],
                "exponents": self.exponents.tolist(),
                "coefficients": self.coefficients.tolist(),
                "centers": self.centers.tolist(), "scales": self.scales.tolist(),
                "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d):
        poles = [complex(re_, im) for re_, im in d["poles"]]
        return cls(poles, d["exponents"], d["coefficients"], d["centers"],
                   d["scales"], d["weights"])


def _solve_ls(Phi, y, cond_threshold):
    """Least squares via SVD, truncating singular values below
    ``smax / cond_threshold``.  Returns ``(x, truncated)``."""
    Uu, s, Vt = np.linalg.svd(Phi, full_matrices=False)
    keep = s > s[0] / cond_threshold if s.size else s.astype(bool)
    x = Vt[keep].T @ ((Uu[:, keep].T @ y) / s[keep])
    return x, bool(np.any(~keep))


def fit_wiener_schetzen(dataset, bla, repetitions=1, degree=3, submodels=1,
                        max_basis=12, cond_threshold=1e12):
    """Wiener-Schetzen model from the BLA poles, by linear least squares.

    The basis poles are the BLA poles repeated ``repetitions`` times, so
    the basis for ``k`` repetitions is a prefix of the one for ``k + 1``.
    With ``submodels > 1`` the operating points are split into contiguous
    groups, one polynomial is fitted per group and the submodel outputs are
    combined with weights fitted on all operating points.
    """
    poles = order_poles(bla.poles)
    if poles.size == 0:
        raise SpecError("BLA has no poles to build a basis from")
    poles = np.tile(poles, int(repetitions))
    if poles.size > max_basis:
        raise SpecError(f"{poles.size} basis functions exceed the cap of {max_basis}")
    basis = ObfBasis(poles)
    m = basis.size
    expo = monomial_exponents(m, range(int(degree) + 1))
    U, Y = dataset.period_means()
    n_ops, N = U.shape
    if expo.shape[0] > n_ops * N:
        raise SpecError("more monomials than samples")
    R = basis.periodic_filter(U)                      # (n_ops, N, m)
    centers = R.reshape(-1, m).mean(axis=0)
    scales = R.reshape(-1, m).std(axis=0)
    scales = np.where(scales > 0, scales, 1.0)
    Phi = eval_monomial_rows((R - centers) / scales, expo)  # (n_ops, N, M)
    sw = np.sqrt(output_weights(Y))
    groups = np.array_split(np.arange(n_ops), int(submodels))
    if any(g.size == 0 for g in groups):
        raise SpecError("more submodels than operating points")
    coefs, truncated = [], False
    for g in groups:
        A = (Phi[g] * sw[g, None, None]).reshape(-1, expo.shape[0])
        c, tr = _solve_ls(A, (Y[g] * sw[g, None]).ravel(), cond_threshold)
        coefs.append(c)
        truncated |= tr
    coefs = np.array(coefs)
    if len(groups) > 1:
        outs = np.stack([(Phi @ c) for c in coefs], axis=-1) * sw[:, None, None]
        wts = scipy.linalg.lstsq(outs.reshape(-1, len(groups)), (Y * sw[:, None]).ravel(),
                                 lapack_driver="gelsd")[0]
    else:
        wts = np.ones(1)
    if truncated:
        warnings.warn("ill-conditioned Wiener-Schetzen regression solved by truncated SVD")
    model = WienerSchetzenModel(poles, expo, coefs, centers, scales, wts,
                                {"truncated": truncated})
    return model


# ------------------------------------------------------------------ simulation

def simulate_block_model(model, input):
    """Periodic steady-state output of a block model for a ``SampledRecord``.

    The input keeps its operating-point offset, as in fitting.  The output
    record's offset is the mean of the simulated output.
    """
    y = model.simulate(input.samples)
    return input.with_samples(y, offset=float(np.mean(y)))
