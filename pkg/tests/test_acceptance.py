"""Acceptance criteria, one test (or group) per criterion.

Each test carries a ``criterion`` mark; ``conftest.py`` prints one
pass/fail line per criterion at the end of the session.  Runtimes are
asserted inside the tests.
"""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from nlident import harness as hz
from nlident.blocknl import (PolyNl, SigmoidNet, WienerModel, build_obf, fit_wiener,
                             fit_wiener_schetzen, wiener_cost_functions)
from nlident.cli import main
from nlident.freqid import Frf, RationalTf, estimate_bla, tf_cost_functions
from nlident.nlss import (MonomialBasis, NnNlssModel, PnlssModel, Standardization,
                          fit_nnlss, fit_pnlss)
from nlident.optim import finite_difference_jacobian, jacobian_mismatch
from nlident.plant import SyntheticPnlssSpec, SyntheticWienerSpec, generate_dataset
from nlident.signals import MultisineSpec, design_multisine

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

G3 = RationalTf([0.0, 0.4, 0.25, -0.1], [1.0, -0.9, 0.44, -0.06])


def _datasets(system, N, offsets, rms=(1.0, 0.8), lines=None, seed=0):
    lines = lines or int(0.4 * N)
    out = []
    for k, (role, r) in enumerate(zip(("estimation", "validation"), rms)):
        exc = design_multisine(MultisineSpec.random(lines, N, r, seed=seed + k))
        out.append(generate_dataset(system, exc, list(offsets), 2, role))
    return out


# ------------------------------------------------------------------ 1

@pytest.mark.criterion(1, "linear exactness: LPM FRF <= 1e-8, TF coefficients <= 1e-6, < 5 s")
def test_linear_exactness(stopwatch, record_property):
    N = 1024
    exc = design_multisine(MultisineSpec.random(N // 2 - 1, N, 1.0, seed=11))
    ds = generate_dataset(SyntheticWienerSpec(G3, [0.0, 1.0]), exc, [0.0], 2)
    frf, tf = estimate_bla(ds, 0, 3, 3)
    G = G3.freqresp(frf.frequencies)
    rel = np.abs(frf.response - G) / np.abs(G)
    interior = rel[6:-6]
    coef = np.linalg.norm(tf.theta() - G3.theta()) / np.linalg.norm(G3.theta())
    record_property("summary", f"FRF {interior.max():.1e}, coef {coef:.1e}, {stopwatch():.1f} s")
    assert interior.max() <= 1e-8
    assert coef <= 1e-6
    assert stopwatch() < 5


# ------------------------------------------------------------------ 2

@pytest.mark.criterion(2, "Wiener oracle: poly(3) validation e_rel < 1% everywhere, < 60 s")
def test_wiener_oracle(stopwatch, record_property):
    system = SyntheticWienerSpec(G3, [0.2, 1.0, 0.3, -0.2])
    est, val = _datasets(system, 2048, np.linspace(-1.0, 1.0, 6), rms=(0.5, 0.4))
    _, bla = estimate_bla(est, 2, 3, 3)
    model = fit_wiener(est, bla, "poly(3)")
    e = hz.evaluate(model, val)
    record_property("summary", f"max e_rel {max(e):.2e}%, {stopwatch():.1f} s")
    assert max(e) < 1.0
    assert stopwatch() < 60


# ------------------------------------------------------------------ 3

def pnlss_oracle():
    A = np.array([[0.7, 0.2], [-0.2, 0.6]])
    E = np.zeros((2, 6))
    F = np.zeros(6)
    # monomials x1^2, x1 x2, x1 u, x2^2, x2 u, u^2
    E[0, 0], E[1, 2], E[0, 3] = 0.1, -0.15, 0.05
    F[0], F[5] = 0.2, 0.05
    return SyntheticPnlssSpec(A, [1.0, 0.5], [1.0, 0.3], 0.1, E, F, (2,))


@pytest.mark.criterion(3, "PNLSS oracle: n=2, degrees {2}, validation e_rel < 1%, < 5 min")
def test_pnlss_oracle(stopwatch, record_property):
    est, val = _datasets(pnlss_oracle(), 1024, [0.0], rms=(0.5, 0.4))
    model = fit_pnlss(est, 2, degrees=(2,))
    e = hz.evaluate(model, val)
    record_property("summary", f"max e_rel {max(e):.2e}%, {stopwatch():.1f} s")
    assert max(e) < 1.0
    assert stopwatch() < 300


# ------------------------------------------------------------------ 4

def nnlss_oracle():
    rng = np.random.default_rng(3)
    A = np.array([[0.6, 0.25], [-0.2, 0.5]])
    f = SigmoidNet(rng.uniform(-1, 1, (2, 3)), rng.uniform(-0.5, 0.5, 2),
                   0.3 * rng.uniform(-1, 1, (2, 2)), [0.0, 0.0])
    g = SigmoidNet(rng.uniform(-1, 1, (2, 3)), rng.uniform(-0.5, 0.5, 2),
                   0.5 * rng.uniform(-1, 1, (1, 2)), [0.0])
    return NnNlssModel(A, [1.0, 0.5], [1.0, -0.4], 0.1, f, g)


@pytest.mark.criterion(4, "NN-NLSS oracle: n=2, n_f=n_g=2, best of 3 restarts e_rel < 2%, < 10 min")
def test_nnlss_oracle(stopwatch, record_property):
    est, val = _datasets(nnlss_oracle(), 1024, [0.0], rms=(1.0, 0.8))
    model = fit_nnlss(est, 2, 2, 2, restarts=3)
    e = hz.evaluate(model, val)
    record_property("summary", f"max e_rel {max(e):.2e}%, {stopwatch():.1f} s")
    assert max(e) < 2.0
    assert stopwatch() < 600


# ------------------------------------------------------------------ 5

def _fd_check(res, jac, theta):
    return jacobian_mismatch(jac(theta), finite_difference_jacobian(res, theta))


def _random_stable_tf(rng, n):
    poles = []
    while len(poles) < n:
        r = rng.uniform(0.1, 0.8)
        if n - len(poles) >= 2 and rng.random() < 0.5:
            p = r * np.exp(1j * rng.uniform(0.1, 3.0))
            poles += [p, np.conj(p)]
        else:
            poles.append(r * rng.choice([-1.0, 1.0]))
    return RationalTf(rng.standard_normal(n + 1), np.real(np.poly(poles)))


@pytest.mark.criterion(5, "gradient suite: analytic Jacobians vs central differences <= 1e-5, < 2 min")
def test_gradient_suite(stopwatch, record_property):
    rng = np.random.default_rng(2024)
    worst = {}
    cases = 20
    u = 0.5 * rng.standard_normal(200)
    for k in range(cases):
        n = int(rng.integers(1, 4))
        # parametric TF
        tf = _random_stable_tf(rng, n)
        w = np.sort(rng.uniform(0.02, 3.1, 40))
        frf = Frf(w, tf.freqresp(w) * (1 + 0.1 * rng.standard_normal(40)),
                  rng.uniform(0.5, 2.0, 40))
        res, jac = tf_cost_functions(frf, n, n)
        worst["tf"] = max(worst.get("tf", 0), _fd_check(res, jac, tf.theta()))
        # Wiener joint
        ds = generate_dataset(SyntheticWienerSpec(tf, [0.0, 1.0, 0.2]),
                              design_multisine(MultisineSpec.random(20, 64, 1.0, seed=k)),
                              [-0.3, 0.4], 2)
        nl = PolyNl(rng.standard_normal(int(rng.integers(2, 5))), rng.normal(), rng.uniform(0.5, 2))
        if rng.random() < 0.5:
            nl = SigmoidNet.scalar(rng.standard_normal(2), rng.standard_normal(2),
                                   rng.standard_normal(2), rng.normal(), rng.normal(), 1.3)
        res, jac, th = wiener_cost_functions(ds, WienerModel(tf, nl))
        worst["wiener"] = max(worst.get("wiener", 0), _fd_check(res, jac, th))
        # PNLSS and NN-NLSS, recursive sensitivities
        A = rng.standard_normal((n, n))
        A *= rng.uniform(0.3, 0.8) / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-9)
        std = Standardization(0.2 * rng.normal(), rng.uniform(0.5, 2), rng.normal(),
                              rng.uniform(0.5, 2))
        M = len(MonomialBasis(n, (2, 3)))
        pn = PnlssModel(A, 0.5 * rng.standard_normal(n), rng.standard_normal(n), rng.normal(),
                        0.01 * rng.standard_normal((n, M)), 0.05 * rng.standard_normal(M),
                        (2, 3), standardization=std, F0=rng.normal())
        h = int(rng.integers(1, 4))
        net = lambda n_out: SigmoidNet(rng.standard_normal((h, n + 1)), rng.standard_normal(h),
                                       0.2 * rng.standard_normal((n_out, h)),
                                       0.1 * rng.standard_normal(n_out))
        nn = NnNlssModel(A, rng.standard_normal(n), rng.standard_normal(n), rng.normal(),
                         net(n), net(1), std)
        for key, m in (("pnlss", pn), ("nnlss", nn)):
            x0 = [None, "equilibrium"][k % 2]
            J = m.simulate_sensitivity(u, x0=x0)[1]
            Jfd = finite_difference_jacobian(lambda t: m.with_params(t).simulate(u, x0=x0),
                                             m.params())
            worst[key] = max(worst.get(key, 0), jacobian_mismatch(J, Jfd))
    record_property("summary", ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
                    + f" over {cases} instances each, {stopwatch():.1f} s")
    assert all(v <= 1e-5 for v in worst.values())
    assert stopwatch() < 120


# ------------------------------------------------------------------ 6

@pytest.mark.criterion(6, "OBF suite: Gram = I for 100 pole sets; WS error non-increasing in repetitions")
def test_obf_suite(record_property):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        poles = []
        for _ in range(int(rng.integers(1, 4))):
            r = rng.uniform(0.0, 0.95)
            if rng.random() < 0.5:
                poles.append(r * rng.choice([-1, 1]))
            else:
                p = r * np.exp(1j * rng.uniform(0.05, np.pi - 0.05))
                poles += [p, np.conj(p)]
        X = build_obf(poles).impulse_responses(4096)
        worst = max(worst, np.max(np.abs(X.T @ X - np.eye(X.shape[1]))))
    system = SyntheticWienerSpec(G3, [0.2, 1.0, 0.3, -0.2])
    est, _ = _datasets(system, 1024, [-0.5, 0.0, 0.5])
    _, bla = estimate_bla(est, 1, 3, 3)
    errs = [float(np.mean(hz.evaluate(fit_wiener_schetzen(est, bla, k, 3), est)))
            for k in (1, 2, 3)]
    record_property("summary", f"Gram deviation {worst:.1e}; WS e_rel "
                    + " -> ".join(f"{e:.3g}%" for e in errs))
    assert worst <= 1e-6
    assert errs[1] <= errs[0] and errs[2] <= errs[1]


# ------------------------------------------------------------------ 7

@pytest.mark.criterion(7, "desk protocol: BLA pattern at op 7; nonlinear averages <= half of BLA, < 30 min")
def test_desk_protocol(tmp_path, stopwatch, record_property):
    cfg = hz.ExperimentConfig.load(CONFIGS / "desk.toml")
    report = hz.run_experiment(cfg, tmp_path)
    seconds = stopwatch()
    by = {m.type: m for m in report.methods}
    bla = by["bla"]
    e = np.array(bla.e_rel)
    record_property("summary", "; ".join(f"{m.name} {m.average:.2f}%" for m in report.methods)
                    + f"; BLA max/min {e.max() / e.min():.1f}; {seconds:.0f} s")
    assert report.exit_code == 0
    assert int(np.argmin(e)) == 6
    assert int(np.argmax(e)) in (0, len(e) - 1)
    assert e.max() / e.min() > 5
    for m in report.methods:
        if m.type != "bla":
            assert m.average <= 0.5 * bla.average, m.name
    assert seconds < 1800


# ------------------------------------------------------------------ 8

@pytest.mark.criterion(8, "pulse protocol: block models beat BLA by 2x; NLSS budget exceeded, < 20 min")
def test_pulse_protocol(tmp_path, stopwatch, record_property):
    code = main(["run", "--config", str(CONFIGS / "pulse.toml"), "--out", str(tmp_path)])
    seconds = stopwatch()
    report = hz.ErrorReport.from_dict(json.loads((tmp_path / "report.json").read_text()))
    by = {m.type: m for m in report.methods}
    record_property("summary", "; ".join(f"{m.name} {m.status} {m.average:.2f}%"
                                         for m in report.methods) + f"; {seconds:.0f} s")
    assert code == hz.EXIT_BUDGET
    bla = by["bla"].average
    for t in ("wiener-poly", "wiener-nn", "ws"):
        assert by[t].status == "ok"
        assert by[t].average <= 0.5 * bla, t
    for t in ("pnlss", "nnlss"):
        assert by[t].status == "budget_exceeded"
    assert seconds < 1200


# ------------------------------------------------------------------ 9

@pytest.mark.criterion(9, "metric identities exact; identical configs give identical reports")
def test_metric_and_determinism(tmp_path, record_property):
    y = np.array([3.0, -1.0, 4.0, 1.0, -5.0, 9.0])
    assert hz.relative_error(y, y) == 0.0
    assert hz.relative_error(y, np.full_like(y, y.mean())) == 100.0
    assert hz.relative_error([0.0, 2.0], [1.0, 1.0]) == 100.0
    cfg = hz.ExperimentConfig.load(CONFIGS / "smoke.toml")
    digests = []
    for run in ("a", "b"):
        hz.run_experiment(cfg, tmp_path / run)
        digests.append(hashlib.sha256((tmp_path / run / "report.json").read_bytes()).hexdigest())
    record_property("summary", f"report sha256 {digests[0][:12]} / {digests[1][:12]}")
    assert digests[0] == digests[1]
