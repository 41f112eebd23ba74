"""Experiment orchestration: datasets, fits, validation metrics and reports.

A configuration (TOML or JSON) names the data-generating system, the
excitation protocol and a list of methods.  ``run_experiment`` generates
the estimation and validation datasets, fits every method on the
estimation set, scores it on the validation set and writes::

    dataset_estimation.{csv,json}   dataset_validation.{csv,json}
    frf_<op>.csv                    model_<method>.json
    report.json                     table.csv          timings.json

``report.json`` holds no wall-clock data, so identical configurations give
byte-identical reports.
"""

import copy
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .blocknl import (SCHEMA_VERSION, WienerModel, WienerSchetzenModel,
                      fit_wiener, fit_wiener_schetzen)
from .exceptions import BudgetExceeded, SpecError
from .freqid import RationalTf, estimate_bla, operating_point_frf
from .nlss import NnNlssModel, PnlssModel, fit_nnlss, fit_pnlss
from .optim import LmOptions
from .plant import (MinimalModelParams, SyntheticPnlssSpec, SyntheticWienerSpec,
                    generate_dataset)
from .signals import (MultisineSpec, PulseTrainSpec, design_multisine,
                      design_pulse_multisine, load_dataset, save_dataset)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_FIT, EXIT_BUDGET = 0, 2, 3, 4

METHOD_DEFAULTS = {
    "bla": {"order": 3},
    "wiener-poly": {"order": 3, "degree": 4, "max_iterations": 200},
    "wiener-nn": {"order": 3, "hidden": 4, "restarts": 5, "max_iterations": 200},
    "ws": {"order": 3, "repetitions": 1, "degree": 4, "submodels": 1},
    "pnlss": {"order": 3, "states": 3, "degrees": [2, 3], "mask_e": None, "mask_f": None,
              "max_iterations": 200},
    "nnlss": {"order": 3, "states": 3, "hidden_f": 3, "hidden_g": 4, "lam": None,
              "restarts": 3, "static_restarts": 5, "max_iterations": 200},
}


# ------------------------------------------------------------------ metrics

def relative_error(y, y_hat):
    """``100 * ||y - y_hat|| / ||y - mean(y)||`` in percent."""
    y = np.asarray(y, dtype=float).ravel()
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    if y.size != y_hat.size:
        raise SpecError(f"length mismatch: {y.size} measured vs {y_hat.size} simulated")
    if y.size < 2:
        raise SpecError("relative error needs at least two samples")
    den = np.linalg.norm(y - y.mean())
    if den == 0:
        raise SpecError("measured output is constant; relative error undefined")
    return float(100.0 * np.linalg.norm(y - y_hat) / den)


@dataclass(frozen=True, eq=False)
class BlaModel:
    """Linear model around one operating point.  It carries no offset, so
    predictions are centred on the measured output mean of each record."""
    tf: RationalTf
    operating_point: int = 0
    fit_info: dict = field(default_factory=dict)

    @property
    def n_params(self):
        return self.tf.n_params

    def simulate(self, u):
        u = np.asarray(u, dtype=float)
        return self.tf.periodic_filter(u - u.mean())

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, "kind": "bla",
                "operating_point": self.operating_point, "tf": self.tf.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(RationalTf.from_dict(d["tf"]), int(d["operating_point"]))


def count_parameters(model):
    """Free real parameters; standardization constants are not counted."""
    return int(model.n_params)


def table_parameter_count(model):
    """Parameter count under the tabulated convention (one offset term more)."""
    return count_parameters(model) + 1


def predict(model, op, warmup_periods=1):
    """Simulated output for the input record of an operating point."""
    u = op.input.samples
    if isinstance(model, BlaModel):
        return model.simulate(u) + op.output.samples.mean()
    if isinstance(model, (WienerModel, WienerSchetzenModel)):
        return model.simulate(u)
    if isinstance(model, (PnlssModel, NnNlssModel)):
        return model.simulate(u, warmup_periods=warmup_periods,
                              period_length=op.input.period_length, x0="equilibrium")
    if isinstance(model, RationalTf):
        return BlaModel(model).simulate(u) + op.output.samples.mean()
    raise TypeError(f"cannot simulate {type(model).__name__}")


def evaluate(model, dataset):
    """Relative error (%) at every operating point of ``dataset``."""
    return [relative_error(op.output.samples, predict(model, op)) for op in dataset]


# ------------------------------------------------------------------ models on disk

_MODEL_KINDS = {"bla": BlaModel, "wiener": WienerModel,
                "wiener_schetzen": WienerSchetzenModel, "pnlss": PnlssModel,
                "nnlss": NnNlssModel}


def model_to_dict(model):
    return model.to_dict()


def load_model(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    d = json.loads(path.read_text())
    if d.get("schema_version") != SCHEMA_VERSION:
        raise SpecError(f"{path}: unsupported schema version {d.get('schema_version')!r} "
                        f"(expected {SCHEMA_VERSION})")
    kind = d.get("kind")
    if kind not in _MODEL_KINDS:
        raise SpecError(f"{path}: unknown model kind {kind!r}")
    return _MODEL_KINDS[kind].from_dict(d)


def atomic_write(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


# ------------------------------------------------------------------ configuration

def stage_seed(root, stage):
    """Seed for one named stage, derived from the root seed."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, np.uint32)[0])


@dataclass(frozen=True)
class PulseConfig:
    count: int = 8
    width: int = 10
    amplitude: float = 1.0
    bandwidth: float = 0.05


@dataclass(frozen=True)
class ProtocolConfig:
    offsets: tuple = tuple(np.linspace(100.0, 550.0, 12))
    period_length: int = 500
    sampling_period: float = 20.0
    periods: int = 2
    excited_lines: Optional[int] = None
    estimation_rms: float = 20.0
    validation_rms: float = 16.0
    noise_std: float = 0.0
    reference_operating_point: Optional[int] = None   # 1-based; default middle
    substeps: int = 10
    pulses: Optional[PulseConfig] = None

    @property
    def lines(self):
        if self.excited_lines is not None:
            return int(self.excited_lines)
        if self.pulses is not None:
            return int(self.pulses.bandwidth * self.period_length)
        return int(0.45 * self.period_length)


@dataclass(frozen=True)
class MethodConfig:
    name: str
    type: str
    options: dict
    budget_seconds: float


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    system: object
    protocol: ProtocolConfig
    methods: tuple
    seed: int = 0
    output_dir: str = "results"
    budget_seconds: float = 600.0
    workers: int = 1
    source: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d)
        try:
            return _parse_config(d)
        except SpecError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise SpecError(f"invalid configuration: {exc}") from exc

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        text = path.read_text()
        try:
            d = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
            raise SpecError(f"{path}: {exc}") from exc
        return cls.from_dict(d)

    def method(self, name):
        for m in self.methods:
            if m.name == name:
                return m
        raise SpecError(f"method {name!r} is not configured")


def _parse_system(d):
    d = dict(d or {"kind": "surrogate"})
    kind = d.pop("kind", "surrogate")
    if kind == "surrogate":
        return MinimalModelParams(**d)
    if kind in ("wiener", "lti"):
        beta = d.pop("beta", [0.0, 1.0]) if kind == "wiener" else [0.0, 1.0]
        return SyntheticWienerSpec(RationalTf(d.pop("b"), d.pop("a")), beta)
    if kind == "pnlss":
        return SyntheticPnlssSpec(**{k: d[k] for k in d})
    raise SpecError(f"unknown system kind {kind!r}")


def _parse_offsets(v):
    if isinstance(v, dict):
        return tuple(np.linspace(float(v["start"]), float(v["stop"]), int(v["count"])))
    return tuple(float(x) for x in v)


def _parse_config(d):
    unknown = set(d) - {"system", "protocol", "methods", "seed", "output_dir",
                        "budget_seconds", "workers"}
    if unknown:
        raise SpecError(f"unknown configuration keys {sorted(unknown)}")
    system = _parse_system(d.get("system"))
    p = dict(d.get("protocol", {}))
    if "offsets" in p:
        p["offsets"] = _parse_offsets(p["offsets"])
    if p.get("pulses") is not None:
        p["pulses"] = PulseConfig(**p["pulses"])
    if p.get("reference_operating_point") is None:
        p["reference_operating_point"] = len(p.get("offsets", ProtocolConfig.offsets)) // 2 + 1
    protocol = ProtocolConfig(**p)
    if protocol.estimation_rms == protocol.validation_rms:
        raise SpecError("estimation and validation rms levels must differ")
    if len(protocol.offsets) < 1 or np.any(np.diff(protocol.offsets) <= 0):
        raise SpecError("operating-point offsets must be strictly increasing")
    if not 1 <= protocol.reference_operating_point <= len(protocol.offsets):
        raise SpecError("reference_operating_point is outside the operating-point grid")
    if protocol.periods < 2:
        raise SpecError("at least two periods are needed for the FRF noise estimate")
    budget = float(d.get("budget_seconds", 600.0))
    methods = []
    for m in d.get("methods", []):
        m = dict(m)
        mtype = m.pop("type", None) or m.get("name")
        if mtype not in METHOD_DEFAULTS:
            raise SpecError(f"unknown method type {mtype!r}; expected one of "
                            f"{sorted(METHOD_DEFAULTS)}")
        name = m.pop("name", mtype)
        mbudget = float(m.pop("budget_seconds", budget))
        extra = set(m) - set(METHOD_DEFAULTS[mtype])
        if extra:
            raise SpecError(f"method {name!r}: unknown options {sorted(extra)}")
        methods.append(MethodConfig(name, mtype, {**METHOD_DEFAULTS[mtype], **m}, mbudget))
    if not methods:
        raise SpecError("at least one method must be configured")
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise SpecError("method names must be unique")
    return ExperimentConfig(system, protocol, tuple(methods), int(d.get("seed", 0)),
                            str(d.get("output_dir", "results")), budget,
                            int(d.get("workers", 1)), d)


# ------------------------------------------------------------------ datasets

def _excitation(protocol, role, seed):
    N = protocol.period_length
    rms = protocol.estimation_rms if role == "estimation" else protocol.validation_rms
    mspec = MultisineSpec.random(protocol.lines, N, rms_target=rms,
                                 seed=stage_seed(seed, f"excitation/{role}"))
    if protocol.pulses is None:
        return design_multisine(mspec, protocol.sampling_period)
    pc = protocol.pulses
    rng = np.random.Generator(np.random.Philox(stage_seed(seed, f"pulses/{role}")))
    slot = N // pc.count
    times = np.arange(pc.count) * slot + rng.integers(0, max(slot - pc.width, 1), pc.count)
    amps = pc.amplitude * rng.uniform(0.5, 1.5, pc.count)
    pspec = PulseTrainSpec(times, amps, pc.bandwidth, N, pc.width)
    return design_pulse_multisine(pspec, mspec, protocol.sampling_period)


def generate_datasets(config):
    """Estimation and validation datasets of an experiment."""
    pr = config.protocol
    out = []
    for role in ("estimation", "validation"):
        exc = _excitation(pr, role, config.seed)
        meta = {"seed": config.seed, "role_seed": stage_seed(config.seed, f"noise/{role}"),
                "reference_operating_point": pr.reference_operating_point}
        out.append(generate_dataset(config.system, exc, pr.offsets, pr.periods, role,
                                    pr.noise_std, meta["role_seed"], pr.substeps, meta))
    return tuple(out)


# ------------------------------------------------------------------ fitting

def _lm(opts, deadline):
    return LmOptions(max_iterations=int(opts.get("max_iterations", 200)), deadline=deadline)


def fit_method(method, estimation, reference_op, seed=0, deadline=None):
    """Fit one configured method.  ``reference_op`` is 0-based."""
    o = method.options
    t = method.type
    _, bla = estimate_bla(estimation, reference_op, o["order"], o["order"])
    if t == "bla":
        model = BlaModel(bla, reference_op)
    elif t == "wiener-poly":
        model = fit_wiener(estimation, bla, f"poly({o['degree']})", seed=seed,
                           lm_options=_lm(o, deadline))
    elif t == "wiener-nn":
        model = fit_wiener(estimation, bla, f"net({o['hidden']})", o["restarts"], seed,
                           _lm(o, deadline))
    elif t == "ws":
        model = fit_wiener_schetzen(estimation, bla, o["repetitions"], o["degree"],
                                    o["submodels"])
    elif t == "pnlss":
        model = fit_pnlss(estimation, o["states"], tuple(o["degrees"]), o["mask_e"],
                          o["mask_f"], bla_operating_point=reference_op, lm_options=_lm(o, deadline),
                          deadline=deadline)
    elif t == "nnlss":
        model = fit_nnlss(estimation, o["states"], o["hidden_f"], o["hidden_g"], o["lam"],
                          o["restarts"], seed, static_restarts=o["static_restarts"],
                          bla_operating_point=reference_op, lm_options=_lm(o, deadline),
                          deadline=deadline)
    else:
        raise SpecError(f"unknown method type {t!r}")
    if deadline is not None and time.monotonic() > deadline:
        raise BudgetExceeded(f"{method.name} finished after its time budget")
    return model


@dataclass
class MethodResult:
    name: str
    type: str
    status: str = "ok"
    e_rel: list = field(default_factory=list)
    n_params: Optional[int] = None
    n_params_table: Optional[int] = None
    fit_seconds: float = float("nan")
    message: str = ""
    fit_info: dict = field(default_factory=dict)

    @property
    def average(self):
        return float(np.mean(self.e_rel)) if self.e_rel else float("nan")

    @property
    def minimum(self):
        return float(np.min(self.e_rel)) if self.e_rel else float("nan")

    @property
    def maximum(self):
        return float(np.max(self.e_rel)) if self.e_rel else float("nan")

    def to_dict(self, timing=False):
        d = {"name": self.name, "type": self.type, "status": self.status,
             "e_rel": self.e_rel, "average": self.average, "min": self.minimum,
             "max": self.maximum, "n_params": self.n_params,
             "n_params_table": self.n_params_table, "message": self.message,
             "fit_info": _jsonable(self.fit_info)}
        if timing:
            d["fit_seconds"] = self.fit_seconds
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["type"], d["status"], list(d["e_rel"]), d["n_params"],
                   d["n_params_table"], d.get("fit_seconds", float("nan")),
                   d.get("message", ""), d.get("fit_info", {}))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


@dataclass
class ErrorReport:
    methods: list
    config: dict = field(default_factory=dict)
    offsets: list = field(default_factory=list)

    @property
    def exit_code(self):
        status = {m.status for m in self.methods}
        if "budget_exceeded" in status:
            return EXIT_BUDGET
        if "failed" in status:
            return EXIT_FIT
        return EXIT_OK

    def to_dict(self, timing=False):
        return {"schema_version": SCHEMA_VERSION, "config": _jsonable(self.config),
                "offsets": list(self.offsets),
                "methods": [m.to_dict(timing) for m in self.methods]}

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise SpecError(f"unsupported report schema version {d.get('schema_version')!r}")
        return cls([MethodResult.from_dict(m) for m in d["methods"]], d.get("config", {}),
                   d.get("offsets", []))

    def table_rows(self):
        return [[m.name, m.average, m.minimum, m.maximum, m.n_params, m.n_params_table,
                 m.fit_seconds, m.status] for m in self.methods]


TABLE_HEADER = ["method", "avg", "min", "max", "n_params", "n_params_table",
                "fit_seconds", "status"]


def table_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for r in rows:
        w.writerow(["" if v is None else (f"{v:.6g}" if isinstance(v, float) else v)
                    for v in r])
    return buf.getvalue()


def table_markdown(rows):
    fmt = lambda v: "" if v is None else (f"{v:.2f}" if isinstance(v, float) else str(v))
    lines = ["| " + " | ".join(TABLE_HEADER) + " |",
             "|" + "---|" * len(TABLE_HEADER)]
    lines += ["| " + " | ".join(fmt(v) for v in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def error_table(offsets, e_rel):
    lines = [f"{'op':>3} {'offset':>9} {'e_rel %':>10}"]
    for i, (off, e) in enumerate(zip(offsets, e_rel)):
        lines.append(f"{i + 1:>3} {off:>9.2f} {e:>10.2f}")
    lines.append(f"avg {np.mean(e_rel):.2f}  min {np.min(e_rel):.2f}  max {np.max(e_rel):.2f}")
    return "\n".join(lines)


def fit_and_score(method, estimation, validation, reference_op, seed):
    """Fit, time and score one method.  Failures are reported, not raised."""
    res = MethodResult(method.name, method.type)
    t0 = time.monotonic()
    deadline = t0 + method.budget_seconds
    model = None
    try:
        model = fit_method(method, estimation, reference_op,
                           stage_seed(seed, f"method/{method.name}"), deadline)
        res.fit_seconds = time.monotonic() - t0
        res.e_rel = evaluate(model, validation)
        res.n_params = count_parameters(model)
        res.n_params_table = table_parameter_count(model)
        res.fit_info = dict(getattr(model, "fit_info", {}) or {})
    except BudgetExceeded as exc:
        res.status, res.message = "budget_exceeded", str(exc)
        res.fit_seconds = time.monotonic() - t0
        model = None
    except Exception as exc:  # noqa: BLE001 -- reported per method
        log.exception("method %s failed", method.name)
        res.status, res.message = "failed", f"{type(exc).__name__}: {exc}"
        res.fit_seconds = time.monotonic() - t0
        model = None
    log.info("%s: %s avg %.2f%% (%.1f s)", method.name, res.status, res.average,
             res.fit_seconds)
    return res, model


def run_experiment(config, output_dir=None, datasets=None):
    """Run every configured method and write all artifacts.

    Returns the ``ErrorReport``; its ``exit_code`` reflects per-method
    failures.
    """
    out = Path(output_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    est, val = datasets or generate_datasets(config)
    save_dataset(est, out / "dataset_estimation")
    save_dataset(val, out / "dataset_validation")
    for k in range(len(est)):
        frf = operating_point_frf(est, k)
        path = out / f"frf_{k + 1:02d}.csv"
        frf.write_csv(path.with_suffix(".tmp"))
        os.replace(path.with_suffix(".tmp"), path)
    ref = config.protocol.reference_operating_point - 1
    work = lambda m: fit_and_score(m, est, val, ref, config.seed)
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(work, config.methods))
    else:
        results = [work(m) for m in config.methods]
    for res, model in results:
        if model is not None:
            atomic_write(out / f"model_{res.name}.json", dump_json(model_to_dict(model)))
    echo = {k: v for k, v in config.source.items() if k != "output_dir"}
    report = ErrorReport([r for r, _ in results], echo, list(est.offsets))
    atomic_write(out / "report.json", dump_json(report.to_dict()))
    atomic_write(out / "table.csv", table_csv(report.table_rows()))
    atomic_write(out / "timings.json",
                 dump_json({r.name: r.fit_seconds for r, _ in results}))
    return report


def merge_reports(paths):
    """Method results from several report or result files, sorted by
    average validation error."""
    results = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise FileNotFoundError(f"result file not found: {p}")
        d = json.loads(p.read_text())
        if "methods" in d:
            results += ErrorReport.from_dict(d).methods
        else:
            if d.get("schema_version") != SCHEMA_VERSION:
                raise SpecError(f"{p}: unsupported schema version "
                                f"{d.get('schema_version')!r}")
            results.append(MethodResult.from_dict(d))
    return sorted(results, key=lambda m: (np.isnan(m.average), m.average))


def load_experiment_data(path, role="estimation"):
    """Dataset from a directory written by ``generate`` or a dataset path."""
    path = Path(path)
    if path.is_dir():
        path = path / f"dataset_{role}"
    return load_dataset(path)
