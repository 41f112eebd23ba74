import time

import numpy as np
import pytest

from nlident.exceptions import BudgetExceeded, DivergenceError
from nlident.optim import (LmOptions, LsqProblem, finite_difference_jacobian,
                           jacobian_mismatch, levenberg_marquardt)


def _rosenbrock():
    res = lambda th: np.array([10 * (th[1] - th[0] ** 2), 1 - th[0]])
    jac = lambda th: np.array([[-20 * th[0], 10.0], [-1.0, 0.0]])
    return res, jac


def test_linear_least_squares():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((30, 4))
    y = rng.standard_normal(30)
    out = levenberg_marquardt(LsqProblem(lambda th: M @ th - y, lambda th: M), np.zeros(4))
    ref = np.linalg.solve(M.T @ M, M.T @ y)
    np.testing.assert_allclose(out.x, ref, atol=1e-10)
    assert out.iterations <= 3


def test_rosenbrock():
    res, jac = _rosenbrock()
    out = levenberg_marquardt(LsqProblem(res, jac), [-1.2, 1.0])
    np.testing.assert_allclose(out.x, [1.0, 1.0], atol=1e-6)
    costs = out.costs
    assert np.all(np.diff(costs[:-1]) < 0)
    assert out.cost <= out.initial_cost


def test_finite_difference_fallback():
    res, _ = _rosenbrock()
    out = levenberg_marquardt(LsqProblem(res), [-1.2, 1.0])
    np.testing.assert_allclose(out.x, [1.0, 1.0], atol=1e-6)


def test_weight_scaling_invariance():
    res, jac = _rosenbrock()
    w = np.array([1.0, 3.0])
    a = levenberg_marquardt(LsqProblem(res, jac, weights=w), [-1.2, 1.0])
    b = levenberg_marquardt(LsqProblem(res, jac, weights=7.5 * w), [-1.2, 1.0])
    assert a.iterations == b.iterations
    for ia, ib in zip(a.trace, b.trace):
        assert ia.iteration == ib.iteration
    np.testing.assert_allclose(a.x, b.x, rtol=1e-12)


def test_rejects_diverging_trials():
    calls = {"bad": 0}

    def res(th):
        if th[0] > 0.5:
            calls["bad"] += 1
            raise DivergenceError("trial blew up")
        return np.array([th[0] - 2.0])

    out = levenberg_marquardt(LsqProblem(res, lambda th: np.array([[1.0]])), [0.0])
    assert calls["bad"] > 0
    assert out.x[0] <= 0.5 and out.cost < 4.0


def test_nonfinite_start_is_error():
    with pytest.raises(ValueError):
        levenberg_marquardt(LsqProblem(lambda th: np.array([np.nan])), [0.0])


def test_deadline():
    res, jac = _rosenbrock()
    opts = LmOptions(deadline=time.monotonic() - 1.0)
    with pytest.raises(BudgetExceeded):
        levenberg_marquardt(LsqProblem(res, jac), [-1.2, 1.0], opts)


def test_options_validated():
    with pytest.raises(ValueError):
        LmOptions(increase=0.5)
    with pytest.raises(ValueError):
        LsqProblem(lambda th: th, weights=[1.0, 0.0])


def test_finite_differences():
    J = finite_difference_jacobian(lambda th: th ** 2, [3.0])
    assert abs(J[0, 0] - 6.0) < 1e-8
    M = np.random.default_rng(1).standard_normal((5, 3))
    np.testing.assert_allclose(finite_difference_jacobian(lambda th: M @ th, np.ones(3)), M,
                               atol=1e-10)
    assert jacobian_mismatch(M, M) == 0.0


def test_trace_csv(tmp_path):
    res, jac = _rosenbrock()
    out = levenberg_marquardt(LsqProblem(res, jac), [-1.2, 1.0])
    out.write_trace(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "iteration,cost,damping,gradient_norm"
    assert len(lines) == len(out.trace) + 1
