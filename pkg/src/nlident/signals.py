"""Excitation design, periodic records and spectral preprocessing."""

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import SpecError


def phase_rng(seed):
    """Counter-based generator used for every random phase in the package."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True, eq=False)
class MultisineSpec:
    """Random-phase multisine with ``F`` excited lines and period ``N``."""
    excited_line_count: int
    period_length: int
    amplitudes: np.ndarray
    phases: np.ndarray
    rms_target: Optional[float] = None
    rng_seed: int = 0

    def __post_init__(self):
        F, N = self.excited_line_count, self.period_length
        amps = np.asarray(self.amplitudes, dtype=float).ravel()
        phases = np.asarray(self.phases, dtype=float).ravel()
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "phases", phases)
        if F < 1 or N < 1:
            raise SpecError("F and N must be positive")
        if not F < N / 2:
            raise SpecError(f"need F < N/2, got F={F}, N={N}")
        if amps.shape != (F,) or phases.shape != (F,):
            raise SpecError("amplitudes and phases must have length F")
        if np.any(amps < 0):
            raise SpecError("amplitudes must be nonnegative")
        if np.any((phases < 0) | (phases >= 2 * np.pi)):
            raise SpecError("phases must lie in [0, 2*pi)")
        if self.rms_target is not None and not self.rms_target > 0:
            raise SpecError("rms_target must be positive")

    @classmethod
    def random(cls, F, N, rms_target=None, seed=0, amplitudes=None):
        """Flat-amplitude multisine with i.i.d. uniform phases drawn from ``seed``."""
        amps = np.ones(F) if amplitudes is None else amplitudes
        phases = phase_rng(seed).uniform(0.0, 2 * np.pi, size=F)
        return cls(F, N, amps, phases, rms_target, seed)

    def to_dict(self):
        return {"F": self.excited_line_count, "N": self.period_length,
                "amplitudes": self.amplitudes.tolist(),
                "phases": self.phases.tolist(),
                "rms_target": self.rms_target, "rng_seed": self.rng_seed}


@dataclass(frozen=True, eq=False)
class PulseTrainSpec:
    """Rectangular pulses, low-pass limited to ``bandwidth`` (cycles/sample)."""
    pulse_times: Sequence[int]
    pulse_amplitudes: Sequence[float]
    bandwidth: float
    period_length: int
    pulse_width: int = 1

    def __post_init__(self):
        times = np.asarray(self.pulse_times, dtype=int).ravel()
        amps = np.asarray(self.pulse_amplitudes, dtype=float).ravel()
        object.__setattr__(self, "pulse_times", times)
        object.__setattr__(self, "pulse_amplitudes", amps)
        if times.shape != amps.shape:
            raise SpecError("pulse_times and pulse_amplitudes differ in length")
        if np.any(np.diff(times) <= 0):
            raise SpecError("pulse_times must be strictly increasing")
        if times.size and (times[0] < 0 or times[-1] >= self.period_length):
            raise SpecError("pulse_times must lie within one period")
        if not 0 < self.bandwidth <= 0.5:
            raise SpecError("bandwidth must lie in (0, 0.5]")
        if self.pulse_width < 1:
            raise SpecError("pulse_width must be at least one sample")


@dataclass(frozen=True, eq=False)
class SampledRecord:
    """``P`` periods of ``N`` samples taken every ``Ts`` minutes."""
    samples: np.ndarray
    sampling_period: float
    period_length: int
    period_count: int = 1
    offset: float = 0.0

    def __post_init__(self):
        x = np.array(self.samples, dtype=float).ravel()
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        if not self.sampling_period > 0:
            raise SpecError("sampling period must be positive")
        if self.period_length < 1 or self.period_count < 1:
            raise SpecError("N and P must be positive")
        if x.size != self.period_length * self.period_count:
            raise SpecError(f"record has {x.size} samples, expected "
                            f"N*P = {self.period_length * self.period_count}")

    @property
    def periods(self):
        """Samples reshaped to ``(P, N)``."""
        return self.samples.reshape(self.period_count, self.period_length)

    def with_samples(self, samples, period_count=None, offset=None):
        return replace(self, samples=samples,
                       period_count=self.period_count if period_count is None else period_count,
                       offset=self.offset if offset is None else offset)

    def tile(self, periods):
        """Repeat the last period ``periods`` times."""
        return self.with_samples(np.tile(self.periods[-1], periods), periods)


@dataclass(frozen=True, eq=False)
class OperatingPoint:
    offset: float
    input: SampledRecord
    output: SampledRecord


@dataclass(frozen=True, eq=False)
class Dataset:
    operating_points: tuple
    role: str = "estimation"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ops = tuple(self.operating_points)
        object.__setattr__(self, "operating_points", ops)
        if self.role not in ("estimation", "validation"):
            raise SpecError(f"unknown dataset role {self.role!r}")
        if not ops:
            raise SpecError("dataset has no operating points")
        ref = ops[0].input
        for op in ops:
            for rec in (op.input, op.output):
                if (rec.sampling_period, rec.period_length, rec.period_count) != \
                        (ref.sampling_period, ref.period_length, ref.period_count):
                    raise SpecError("records disagree on Ts, N or P")
        offsets = np.array([op.offset for op in ops])
        if np.any(np.diff(offsets) <= 0):
            raise SpecError("operating-point offsets must be strictly increasing")

    def __len__(self):
        return len(self.operating_points)

    def __getitem__(self, i):
        return self.operating_points[i]

    @property
    def offsets(self):
        return np.array([op.offset for op in self.operating_points])

    @property
    def inputs(self):
        return [op.input for op in self.operating_points]

    @property
    def outputs(self):
        return [op.output for op in self.operating_points]

    @property
    def period_length(self):
        return self.operating_points[0].input.period_length

    @property
    def period_count(self):
        return self.operating_points[0].input.period_count

    @property
    def sampling_period(self):
        return self.operating_points[0].input.sampling_period

    def u_matrix(self):
        """Inputs stacked as ``(T, n_operating_points)``."""
        return np.stack([op.input.samples for op in self.operating_points], axis=1)

    def y_matrix(self):
        return np.stack([op.output.samples for op in self.operating_points], axis=1)

    def subset(self, indices):
        return Dataset(tuple(self.operating_points[i] for i in indices),
                       self.role, self.meta)

    def period_means(self):
        """Period-averaged input and output, each ``(n_operating_points, N)``.

        Averaging the periods of a steady-state record keeps the periodic
        response and reduces additive noise; this is the data used by the
        time-domain fitting routines.
        """
        N, P = self.period_length, self.period_count
        U = np.stack([op.input.samples.reshape(P, N).mean(axis=0) for op in self])
        Y = np.stack([op.output.samples.reshape(P, N).mean(axis=0) for op in self])
        return U, Y


def output_weights(Y):
    """Per operating point weights ``1 / var(y_j)`` (unit where ``y_j`` is
    constant), so that a pooled squared error sums squared relative errors."""
    v = np.var(np.atleast_2d(Y), axis=-1)
    return np.where(v > 0, 1.0 / np.where(v > 0, v, 1.0), 1.0)


def design_multisine(spec, sampling_period=1.0):
    """One period of ``sum_k A_k cos(2 pi k t / N + phi_k)``.

    Synthesised on the DFT grid, so the result is exactly band limited.
    When ``spec.rms_target`` is set the signal is rescaled to that rms.
    """
    N, F = spec.period_length, spec.excited_line_count
    X = np.zeros(N // 2 + 1, dtype=complex)
    X[1:F + 1] = 0.5 * N * spec.amplitudes * np.exp(1j * spec.phases)
    u = np.fft.irfft(X, n=N)
    if spec.rms_target is not None:
        rms = np.sqrt(np.mean(u ** 2))
        if rms == 0:
            raise SpecError("cannot rescale an all-zero multisine")
        u = u * (spec.rms_target / rms)
    return SampledRecord(u, sampling_period, N, 1)


def band_limited_pulses(pspec):
    """Periodic rectangular pulse train with every DFT line above the
    bandwidth (and the mean) removed."""
    N = pspec.period_length
    x = np.zeros(N)
    for t0, a in zip(pspec.pulse_times, pspec.pulse_amplitudes):
        idx = (t0 + np.arange(pspec.pulse_width)) % N
        x[idx] += a
    X = np.fft.rfft(x)
    k = np.arange(X.size)
    X[k > pspec.bandwidth * N] = 0.0
    X[0] = 0.0
    return np.fft.irfft(X, n=N)


def design_pulse_multisine(pspec, mspec, sampling_period=1.0):
    """Band-limited pulse train superimposed on a random-phase multisine.

    If ``mspec.rms_target`` is set the sum is rescaled to that rms, so a
    zero pulse train reproduces ``design_multisine(mspec)``.
    """
    N = mspec.period_length
    if pspec.period_length != N:
        raise SpecError("pulse train and multisine periods differ")
    if mspec.excited_line_count > pspec.bandwidth * N:
        raise SpecError("multisine band exceeds the pulse bandwidth")
    ms = design_multisine(replace(mspec, rms_target=None)).samples
    u = ms + band_limited_pulses(pspec) if pspec.pulse_times.size else ms
    if mspec.rms_target is not None:
        u = u * (mspec.rms_target / np.sqrt(np.mean(u ** 2)))
    return SampledRecord(u, sampling_period, N, 1)


def steady_state_periods(rec, discard):
    """Drop the first ``discard`` periods of a record."""
    if not 0 <= discard < rec.period_count:
        raise SpecError(f"cannot discard {discard} of {rec.period_count} periods")
    return rec.with_samples(rec.samples[discard * rec.period_length:],
                            rec.period_count - discard)


@dataclass(frozen=True, eq=False)
class Spectra:
    """Period-averaged DFTs (orthonormal scaling) on lines ``0..N//2``.

    ``Y_var``/``U_var`` are sample variances over periods of a single-period
    DFT line (``ddof=1``); they are zero and ``has_variance`` is False when
    only one period is available.  ``U_record``/``Y_record`` hold the DFT of
    the complete record, whose line ``k*P`` corresponds to period line ``k``.
    """
    U: np.ndarray
    Y: np.ndarray
    U_var: np.ndarray
    Y_var: np.ndarray
    U_record: np.ndarray
    Y_record: np.ndarray
    period_length: int
    period_count: int
    has_variance: bool

    @property
    def lines(self):
        return np.arange(self.U.size)


def record_spectra(input, output):
    """Per-period DFT of input and output, averaged over periods, with the
    sample variance over periods at each line."""
    for name in ("sampling_period", "period_length", "period_count"):
        if getattr(input, name) != getattr(output, name):
            raise SpecError(f"input and output records differ in {name}")
    if input.samples.size != output.samples.size:
        raise SpecError("input and output lengths differ")
    P = input.period_count
    Up = np.fft.rfft(input.periods, axis=1, norm="ortho")
    Yp = np.fft.rfft(output.periods, axis=1, norm="ortho")
    if P > 1:
        U_var = np.sum(np.abs(Up - Up.mean(0)) ** 2, axis=0) / (P - 1)
        Y_var = np.sum(np.abs(Yp - Yp.mean(0)) ** 2, axis=0) / (P - 1)
    else:
        U_var = np.zeros(Up.shape[1])
        Y_var = np.zeros(Up.shape[1])
    return Spectra(Up.mean(0), Yp.mean(0), U_var, Y_var,
                   np.fft.rfft(input.samples, norm="ortho"),
                   np.fft.rfft(output.samples, norm="ortho"),
                   input.period_length, P, P > 1)


def excited_lines(U, rel_tol=1e-8):
    """Indices of lines (excluding DC) whose magnitude exceeds ``rel_tol``
    times the largest line."""
    mag = np.abs(U)
    mag[0] = 0.0
    if mag.max() == 0:
        return np.array([], dtype=int)
    return np.flatnonzero(mag > rel_tol * mag.max())


# ---------------------------------------------------------------- file I/O

def save_dataset(dataset, path):
    """Write ``<path>.csv`` (long format) and ``<path>.json`` (header)."""
    path = Path(path)
    if path.suffix in (".csv", ".json"):
        path = path.with_suffix("")
    rec = dataset[0].input
    header = {"schema_version": 1, "role": dataset.role,
              "Ts": rec.sampling_period, "N": rec.period_length,
              "P": rec.period_count, "offsets": dataset.offsets.tolist(),
              "meta": dataset.meta}
    tmp = path.with_suffix(".csv.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["operating_point_index", "sample_index", "input", "output"])
        for i, op in enumerate(dataset.operating_points):
            for t, (u, y) in enumerate(zip(op.input.samples, op.output.samples)):
                w.writerow([i, t, repr(float(u)), repr(float(y))])
    tmp.replace(path.with_suffix(".csv"))
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(header, indent=2, sort_keys=True))
    tmp.replace(path.with_suffix(".json"))
    return path


def load_dataset(path):
    path = Path(path)
    if path.suffix in (".csv", ".json"):
        path = path.with_suffix("")
    hpath, cpath = path.with_suffix(".json"), path.with_suffix(".csv")
    for p in (hpath, cpath):
        if not p.exists():
            raise FileNotFoundError(f"dataset file not found: {p}")
    header = json.loads(hpath.read_text())
    if header.get("schema_version") != 1:
        raise SpecError(f"{hpath}: unsupported schema version "
                        f"{header.get('schema_version')!r}")
    data = np.loadtxt(cpath, delimiter=",", skiprows=1, ndmin=2)
    Ts, N, P = header["Ts"], header["N"], header["P"]
    ops = []
    for i, off in enumerate(header["offsets"]):
        rows = data[data[:, 0] == i]
        rows = rows[np.argsort(rows[:, 1])]
        ops.append(OperatingPoint(off, SampledRecord(rows[:, 2], Ts, N, P, off),
                                  SampledRecord(rows[:, 3], Ts, N, P, float(np.mean(rows[:, 3])))))
    return Dataset(tuple(ops), header["role"], header.get("meta", {}))
