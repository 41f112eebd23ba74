"""Linear identification: nonparametric BLA via the Local Polynomial Method,
weighted rational transfer-function fitting and state-space realization."""

import csv
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.signal

from .exceptions import RankDeficientError, SpecError, UnstableModelError
from .optim import LmOptions, LsqProblem, levenberg_marquardt
from .signals import excited_lines, record_spectra


# ------------------------------------------------------------------ types

@dataclass(frozen=True, eq=False)
class Frf:
    """Nonparametric frequency response with per-line sample variance.

    Frequencies are in rad/sample.
    """
    frequencies: np.ndarray
    response: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.frequencies, dtype=float).ravel()
        G = np.asarray(self.response, dtype=complex).ravel()
        v = np.asarray(self.variance, dtype=float).ravel()
        object.__setattr__(self, "frequencies", w)
        object.__setattr__(self, "response", G)
        object.__setattr__(self, "variance", v)
        if not (w.size == G.size == v.size):
            raise SpecError("FRF arrays differ in length")
        if np.any(v < 0):
            raise SpecError("negative FRF variance")
        if w.size and (np.any(np.diff(w) <= 0) or w[0] <= 0 or w[-1] >= np.pi):
            raise SpecError("FRF frequencies must increase strictly within (0, pi)")

    def to_dict(self):
        return {"frequencies": self.frequencies.tolist(),
                "re": self.response.real.tolist(),
                "im": self.response.imag.tolist(),
                "variance": self.variance.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["frequencies"], np.asarray(d["re"]) + 1j * np.asarray(d["im"]),
                   d["variance"])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["omega", "re", "im", "variance"])
            for row in zip(self.frequencies, self.response.real,
                           self.response.imag, self.variance):
                w.writerow([repr(float(x)) for x in row])


def _check_stable_poly(a, what="denominator"):
    p = np.roots(a) if len(a) > 1 else np.array([])
    if p.size and np.max(np.abs(p)) >= 1:
        raise UnstableModelError(f"{what} has a root of modulus {np.max(np.abs(p)):.6g}")
    return p


@dataclass(frozen=True, eq=False)
class RationalTf:
    """``(b_0 + b_1 q^-1 + ...) / (1 + a_1 q^-1 + ...)``."""
    b: np.ndarray
    a: np.ndarray
    check_stable: bool = True

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        if a[0] == 0:
            raise SpecError("a_0 must be nonzero")
        b, a = b / a[0], a / a[0]
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a", a)
        if self.check_stable:
            _check_stable_poly(a)

    @property
    def n_a(self):
        return self.a.size - 1

    @property
    def n_b(self):
        return self.b.size - 1

    @property
    def poles(self):
        if self.n_a == 0:
            return np.array([], dtype=complex)
        p = np.roots(self.a).astype(complex)
        return p[np.lexsort((p.imag, p.real))]

    @property
    def n_params(self):
        return self.n_a + self.n_b + 1

    def theta(self):
        return np.concatenate([self.a[1:], self.b])

    @classmethod
    def from_theta(cls, theta, n_a, n_b, check_stable=True):
        theta = np.asarray(theta, dtype=float)
        return cls(theta[n_a:n_a + n_b + 1], np.concatenate([[1.0], theta[:n_a]]),
                   check_stable)

    def freqresp(self, omega):
        z1 = np.exp(-1j * np.asarray(omega, dtype=float))
        return np.polyval(self.b[::-1], z1) / np.polyval(self.a[::-1], z1)

    def scaled(self, c):
        return RationalTf(self.b * c, self.a, self.check_stable)

    def lfilter(self, u, zi=None):
        """Causal simulation from rest (or from filter state ``zi``)."""
        if zi is None:
            return scipy.signal.lfilter(self.b, self.a, u)
        return scipy.signal.lfilter(self.b, self.a, u, zi=zi)[0]

    def periodic_filter(self, u):
        """Steady-state response to the periodic extension of ``u``."""
        return periodic_filter(self.freqresp, u)

    def to_dict(self):
        return {"b": self.b.tolist(), "a": self.a.tolist()}

    @classmethod
    def from_dict(cls, d, check_stable=True):
        return cls(d["b"], d["a"], check_stable)


def periodic_filter(response, u, axis=0):
    """Filter a periodic signal through a linear system given by its
    frequency response ``response(omega)``; exact steady state."""
    u = np.asarray(u, dtype=float)
    L = u.shape[axis]
    omega = 2 * np.pi * np.arange(L // 2 + 1) / L
    H = response(omega)
    shape = [1] * u.ndim
    shape[axis] = -1
    return np.fft.irfft(np.fft.rfft(u, axis=axis) * H.reshape(shape), n=L, axis=axis)


@dataclass(frozen=True, eq=False)
class LinearSs:
    """Discrete-time SISO state-space model ``(A, B, C, D)``."""
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    check_stable: bool = True

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0] if A.size else 0
        A = A.reshape(n, n)
        B = np.asarray(self.B, dtype=float).reshape(n, 1)
        C = np.asarray(self.C, dtype=float).reshape(1, n)
        D = np.asarray(self.D, dtype=float).reshape(1, 1)
        for k, v in zip("ABCD", (A, B, C, D)):
            object.__setattr__(self, k, v)
        if self.check_stable and n and np.max(np.abs(np.linalg.eigvals(A))) >= 1:
            raise UnstableModelError("spectral radius of A is not below one")

    @property
    def n(self):
        return self.A.shape[0]

    def freqresp(self, omega):
        omega = np.atleast_1d(omega)
        if self.n == 0:
            return np.full(omega.shape, self.D[0, 0], dtype=complex)
        z = np.exp(1j * omega)
        eye = np.eye(self.n)
        out = np.empty(omega.shape, dtype=complex)
        for i, zk in enumerate(z):
            out[i] = (self.C @ np.linalg.solve(zk * eye - self.A, self.B))[0, 0]
        return out + self.D[0, 0]

    def simulate(self, u, x0=None):
        """Returns ``(y, x)`` with ``x`` of shape ``(T, n)``."""
        u = np.asarray(u, dtype=float)
        x = np.zeros(self.n) if x0 is None else np.asarray(x0, dtype=float)
        X = np.empty((u.size, self.n))
        for t in range(u.size):
            X[t] = x
            x = self.A @ x + self.B[:, 0] * u[t]
        y = X @ self.C[0] + self.D[0, 0] * u
        return y, X

    def transformed(self, T):
        """Similarity transform ``x' = T x``."""
        Ti = np.linalg.inv(T)
        return LinearSs(T @ self.A @ Ti, T @ self.B, self.C @ Ti, self.D,
                        self.check_stable)

    def to_dict(self):
        return {"n": self.n, "A": self.A.ravel().tolist(), "B": self.B.ravel().tolist(),
                "C": self.C.ravel().tolist(), "D": self.D.ravel().tolist()}

    @classmethod
    def from_dict(cls, d):
        n = d["n"]
        return cls(np.reshape(d["A"], (n, n)), d["B"], d["C"], d["D"])


# ------------------------------------------------------------------ LPM

def _two_sided(X, L):
    """Full DFT of a real record from its one-sided half."""
    full = np.empty(L, dtype=complex)
    full[:X.size] = X
    full[X.size:] = np.conj(X[1:L - X.size + 1][::-1])
    return full


def _lpm_periodic(U, Y, L, P, w, degree):
    k_exc = excited_lines(U[::P][:L // (2 * P) + 1])
    k_exc = k_exc[2 * k_exc * P < L]
    if k_exc.size == 0:
        raise SpecError("input spectrum has no excited lines")
    Uf, Yf = _two_sided(U, L), _two_sided(Y, L)
    # lines between harmonics of the period carry only transient and noise
    offs = np.array([r for r in range(-w, w + 1) if r % P])
    if offs.size < degree + 2:
        raise RankDeficientError(
            f"window of half-width {w} holds {offs.size} non-excited lines, "
            f"need at least {degree + 2} for a degree-{degree} transient")
    K = np.vander(offs / w, degree + 1, increasing=True)
    if np.linalg.matrix_rank(K) < degree + 1:
        raise RankDeficientError("transient regression is rank deficient")
    KtK_inv = np.linalg.inv(K.T @ K)
    pinv = KtK_inv @ K.T
    h = KtK_inv[0, 0]
    j_exc = k_exc * P
    idx = (j_exc[:, None] + offs[None, :]) % L
    Yn = Yf[idx]                       # (lines, window)
    t = Yn @ pinv.T                    # transient polynomial coefficients
    resid = Yn - t @ K.T
    q = offs.size - (degree + 1)
    s2 = np.sum(np.abs(resid) ** 2, axis=1) / q
    G = (Yf[j_exc] - t[:, 0]) / Uf[j_exc]
    var = s2 * (1.0 + h) / np.abs(Uf[j_exc]) ** 2
    return j_exc, G, var


def _lpm_arbitrary(U, Y, L, w, degree):
    k_exc = excited_lines(U)
    k_exc = k_exc[2 * k_exc < L]
    Uf, Yf = _two_sided(U, L), _two_sided(Y, L)
    offs = np.arange(-w, w + 1)
    n_par = 2 * (degree + 1)
    if offs.size <= n_par:
        raise RankDeficientError(
            f"window of half-width {w} is too small for {n_par} local unknowns")
    V = np.vander(offs / w, degree + 1, increasing=True)
    G = np.empty(k_exc.size, dtype=complex)
    var = np.empty(k_exc.size)
    q = offs.size - n_par
    for i, k0 in enumerate(k_exc):
        lines = (k0 + offs) % L
        K = np.hstack([Uf[lines, None] * V, V])
        if np.linalg.matrix_rank(K) < n_par:
            raise RankDeficientError(f"local LPM regression is rank deficient at line {k0}")
        theta, *_ = np.linalg.lstsq(K, Yf[lines], rcond=None)
        resid = Yf[lines] - K @ theta
        s2 = float(np.sum(np.abs(resid) ** 2)) / q
        G[i] = theta[0]
        var[i] = s2 * np.linalg.inv(K.conj().T @ K)[0, 0].real
    return k_exc, G, var


def estimate_frf_lpm(U, Y, window_halfwidth=None, poly_degree=2, periods=1,
                     n_samples=None):
    """Nonparametric FRF with the Local Polynomial Method.

    ``U`` and ``Y`` are one-sided DFTs (``numpy.fft.rfft``) of the complete,
    mean-removed record of ``n_samples`` samples (even length assumed when
    omitted).  Lines ``k-w .. k+w`` of the record grid form the local window
    of line ``k``; negative lines and lines past Nyquist are taken from the
    conjugate-symmetric half, so windows never need truncating.

    With ``periods >= 2`` the excitation is periodic: excited lines are
    multiples of ``periods`` and the lines in between hold only the
    transient and noise.  A degree ``poly_degree`` polynomial fitted to those
    lines models the transient, which is subtracted at the excited line
    before dividing by the input.  The fit residual gives the noise variance;
    the returned FRF variance includes the contribution of the transient
    estimate.

    With ``periods == 1`` the arbitrary-excitation LPM is used: FRF and
    transient are both local polynomials over the window, and the FRF
    variance is the residual variance times the first diagonal element of
    the inverse normal matrix.

    The fitted transient is discarded.
    """
    if window_halfwidth is None:
        window_halfwidth = max(3, 2 * (poly_degree + 1))
    U = np.asarray(U, dtype=complex)
    Y = np.asarray(Y, dtype=complex)
    if U.shape != Y.shape:
        raise SpecError("input and output spectra differ in length")
    L = 2 * (U.size - 1) if n_samples is None else int(n_samples)
    if L // 2 + 1 != U.size:
        raise SpecError("spectrum length does not match the record length")
    if periods >= 2:
        j, G, var = _lpm_periodic(U, Y, L, periods, window_halfwidth, poly_degree)
    else:
        j, G, var = _lpm_arbitrary(U, Y, L, window_halfwidth, poly_degree)
    return Frf(2 * np.pi * j / L, G, var)


# ------------------------------------------------------------------ TF fit

def effective_variance(frf, rel_floor=1e-10):
    """Variances with numerically-zero entries replaced by the median of
    the nonzero ones (or 1.0 when all are zero)."""
    v = frf.variance.copy()
    scale = np.max(np.abs(frf.response)) if frf.response.size else 1.0
    zero = v <= (rel_floor * scale) ** 2
    if np.all(zero):
        return np.ones_like(v)
    v[zero] = np.median(v[~zero])
    return v


def _tf_model(theta, zpow_a, zpow_b, n_a):
    A = 1.0 + zpow_a @ theta[:n_a] if n_a else np.ones(zpow_b.shape[0], dtype=complex)
    B = zpow_b @ theta[n_a:]
    return A, B


def tf_cost_functions(frf, n_a, n_b, variance=None):
    """Residual and Jacobian of the weighted FRF misfit.

    ``V(theta) = sum_k |G_k - B/A|^2 / var_k`` is the squared norm of the
    returned residual (real and imaginary parts stacked).
    """
    v = effective_variance(frf) if variance is None else np.asarray(variance)
    s = np.sqrt(v)
    z1 = np.exp(-1j * frf.frequencies)
    zpow_a = z1[:, None] ** np.arange(1, n_a + 1)[None, :]
    zpow_b = z1[:, None] ** np.arange(0, n_b + 1)[None, :]
    G = frf.response

    def residual(theta):
        A, B = _tf_model(theta, zpow_a, zpow_b, n_a)
        e = (G - B / A) / s
        return np.concatenate([e.real, e.imag])

    def jacobian(theta):
        A, B = _tf_model(theta, zpow_a, zpow_b, n_a)
        Ja = (B / A ** 2)[:, None] * zpow_a
        Jb = -zpow_b / A[:, None]
        J = np.hstack([Ja, Jb]) / s[:, None]
        return np.vstack([J.real, J.imag])

    return residual, jacobian


def _weighted_linear_tf(frf, n_a, n_b, w):
    z1 = np.exp(-1j * frf.frequencies)
    G = frf.response
    cols = [G * z1 ** i for i in range(1, n_a + 1)] + [-(z1 ** j) for j in range(n_b + 1)]
    M = np.stack(cols, axis=1) * w[:, None]
    rhs = -G * w
    Mr = np.vstack([M.real, M.imag])
    rr = np.concatenate([rhs.real, rhs.imag])
    theta, *_ = np.linalg.lstsq(Mr, rr, rcond=None)
    return theta


def _is_stable_theta(theta, n_a):
    if n_a == 0:
        return True
    return np.max(np.abs(np.roots(np.concatenate([[1.0], theta[:n_a]])))) < 1


def fit_parametric_tf(frf, n_a, n_b, allow_unstable=False, sk_iterations=10,
                      lm_options=None):
    """Fit ``B(q^-1)/A(q^-1)`` to an FRF by minimizing the variance-weighted
    cost ``sum_k |G_k - G(w_k, theta)|^2 / var_k``.

    Initial values come from the linearised (Levy) problem followed by a few
    Sanathanan-Koerner reweightings; the lowest-cost stable candidate seeds a
    Levenberg-Marquardt refinement, during which trial points with an
    unstable denominator are rejected unless ``allow_unstable``.
    """
    if n_a < 0 or n_b < 0:
        raise SpecError("orders must be nonnegative")
    v = effective_variance(frf)
    residual, jacobian = tf_cost_functions(frf, n_a, n_b, v)
    w = 1.0 / np.sqrt(v)
    candidates = []
    theta = _weighted_linear_tf(frf, n_a, n_b, w)
    candidates.append(theta)
    z1 = np.exp(-1j * frf.frequencies)
    for _ in range(sk_iterations if n_a else 0):
        A = 1.0 + sum(theta[i - 1] * z1 ** i for i in range(1, n_a + 1))
        theta = _weighted_linear_tf(frf, n_a, n_b, w / np.abs(A))
        candidates.append(theta)
    costs = [float(np.sum(residual(c) ** 2)) for c in candidates]
    order = np.argsort(costs)
    stable = [i for i in order if _is_stable_theta(candidates[i], n_a)]
    if stable:
        theta0 = candidates[stable[0]]
    elif allow_unstable:
        theta0 = candidates[order[0]]
    else:
        raise UnstableModelError("no stable initial estimate for the transfer function")

    def guarded_residual(theta):
        if not allow_unstable and not _is_stable_theta(theta, n_a):
            raise UnstableModelError("trial denominator unstable")
        return residual(theta)

    opts = lm_options or LmOptions(max_iterations=200)
    res = levenberg_marquardt(LsqProblem(guarded_residual, jacobian), theta0, opts)
    tf = RationalTf.from_theta(res.x, n_a, n_b, check_stable=not allow_unstable)
    object.__setattr__(tf, "fit_info", {"initial_cost": res.initial_cost,
                                        "cost": res.cost, "status": res.status})
    return tf


# ------------------------------------------------------------------ realization

def realize_state_space(tf):
    """Controllable canonical realization of a proper transfer function."""
    n = max(tf.n_a, tf.n_b)
    a = np.zeros(n + 1)
    a[:tf.n_a + 1] = tf.a
    b = np.zeros(n + 1)
    b[:tf.n_b + 1] = tf.b
    d = b[0]
    if n == 0:
        return LinearSs(np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)), [[d]])
    c = b[1:] - d * a[1:]
    A = np.zeros((n, n))
    A[0, :] = -a[1:]
    A[1:, :-1] = np.eye(n - 1)
    B = np.zeros((n, 1))
    B[0, 0] = 1.0
    return LinearSs(A, B, c[None, :], [[d]], check_stable=tf.check_stable)


def ss_to_tf(ss):
    """Transfer function of a state-space model (inverse of the realization)."""
    if ss.n == 0:
        return RationalTf([ss.D[0, 0]], [1.0])
    b, a = scipy.signal.ss2tf(ss.A, ss.B, ss.C, ss.D)
    return RationalTf(b[0], a, check_stable=ss.check_stable)


# ------------------------------------------------------------------ BLA

def operating_point_frf(dataset, operating_point, window_halfwidth=None,
                        poly_degree=2):
    """LPM estimate of the FRF at one operating point of a dataset, with
    means removed from input and output."""
    op = dataset[operating_point]
    u = op.input.with_samples(op.input.samples - op.input.samples.mean())
    y = op.output.with_samples(op.output.samples - op.output.samples.mean())
    sp = record_spectra(u, y)
    return estimate_frf_lpm(sp.U_record, sp.Y_record, window_halfwidth,
                            poly_degree, periods=sp.period_count,
                            n_samples=u.samples.size)


def estimate_bla(dataset, operating_point, n_a, n_b, window_halfwidth=None,
                 poly_degree=2):
    """Nonparametric and parametric BLA at one operating point.

    Means are removed from input and output before the spectral analysis.
    Returns ``(frf, tf)``.
    """
    frf = operating_point_frf(dataset, operating_point, window_halfwidth, poly_degree)
    tf = fit_parametric_tf(frf, n_a, n_b)
    return frf, tf
