import json
import warnings

import numpy as np
import pytest

from nlident.blocknl import (PolyNl, SigmoidNet, WienerModel, WienerSchetzenModel,
                             build_obf, eval_static_nl, fit_poly_nl, fit_wiener,
                             fit_wiener_schetzen, parse_nl_kind, simulate_block_model,
                             wiener_cost_functions)
from nlident.basis import monomial_exponents
from nlident.exceptions import SpecError
from nlident.freqid import RationalTf, estimate_bla
from nlident.optim import finite_difference_jacobian, jacobian_mismatch
from nlident.plant import SyntheticWienerSpec, generate_dataset
from nlident.signals import MultisineSpec, SampledRecord, design_multisine

G0 = RationalTf([0.0, 0.4, 0.25, -0.1], [1.0, -0.9, 0.44, -0.06])
BETA = [0.1, 1.0, 0.3, -0.15]


def _dataset(beta=BETA, offsets=(-0.5, 0.0, 0.5), N=512, seed=0, rms=1.0):
    exc = design_multisine(MultisineSpec.random(int(0.4 * N), N, rms, seed=seed))
    return generate_dataset(SyntheticWienerSpec(G0, beta), exc, list(offsets), 2)


def _erel(model, ds):
    U, Y = ds.period_means()
    e = []
    for u, y in zip(U, Y):
        e.append(100 * np.linalg.norm(y - model.simulate(u)) / np.linalg.norm(y - y.mean()))
    return np.array(e)


def test_static_examples():
    np.testing.assert_allclose(eval_static_nl(PolyNl([0, 1]), [2, -3]), [2, -3])
    assert eval_static_nl(PolyNl([1, 0, 2]), [3.0])[0] == 19.0
    net = SigmoidNet.scalar([1.0], [0.0], [1.0], 0.0)
    assert eval_static_nl(net, [0.0])[0] == 0.0
    assert SigmoidNet.scalar(np.ones(4), np.zeros(4), np.ones(4), 0.0).n_params == 13
    with pytest.raises(SpecError):
        SigmoidNet.scalar([np.inf], [0.0], [1.0], 0.0)


def test_parse_nl_kind():
    assert parse_nl_kind("poly(3)") == ("poly", 3)
    assert parse_nl_kind(" net( 4 ) ") == ("net", 4)
    for bad in ("spline(2)", "net(0)", "poly"):
        with pytest.raises(SpecError):
            parse_nl_kind(bad)


def test_static_jacobians():
    rng = np.random.default_rng(0)
    r = rng.standard_normal(30)
    poly = PolyNl(rng.standard_normal(4), 0.2, 1.5)
    _, V, dr = poly.jacobian(r)
    J = finite_difference_jacobian(lambda b: poly.with_params(b)(r), poly.params())
    assert jacobian_mismatch(V, J) < 1e-8
    np.testing.assert_allclose(dr, [(poly(x + 1e-6) - poly(x - 1e-6)) / 2e-6 for x in r],
                               rtol=1e-6)
    net = SigmoidNet(rng.standard_normal((3, 2)), rng.standard_normal(3),
                     rng.standard_normal((2, 3)), rng.standard_normal(2), [0.1, -0.2], [2.0, 0.5])
    x = rng.standard_normal((20, 2))
    _, Jn, dx = net.jacobian(x)
    Jfd = finite_difference_jacobian(lambda th: net.with_params(th)(x).ravel(), net.params())
    assert jacobian_mismatch(Jn.reshape(-1, net.n_params), Jfd) < 1e-6
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        np.testing.assert_allclose(dx[..., k], (net(x + e) - net(x - e)) / (2 * h), atol=1e-7)


def test_poly_fit_residual_is_orthogonal():
    rng = np.random.default_rng(1)
    r = rng.standard_normal(400)
    y = np.sin(2 * r) + 0.1 * rng.standard_normal(400)
    nl = fit_poly_nl(r, y, 4)
    s = (r - nl.center) / nl.scale
    V = s[:, None] ** np.arange(5)
    coef = np.linalg.lstsq(V, y - nl(r), rcond=None)[0]
    assert np.max(np.abs(coef)) < 1e-10


def test_wiener_joint_jacobian():
    ds = _dataset(N=128)
    rng = np.random.default_rng(2)
    for _ in range(3):
        nl = PolyNl(np.array(BETA) + 0.05 * rng.standard_normal(4), 0.1, 0.8)
        lti = RationalTf.from_theta(G0.theta() + 0.01 * rng.standard_normal(7), 3, 3)
        res, jac, th = wiener_cost_functions(ds, WienerModel(lti, nl))
        assert jacobian_mismatch(jac(th), finite_difference_jacobian(res, th)) < 1e-5


def test_wiener_recovers_oracle():
    est, val = _dataset(seed=0), _dataset(seed=1, rms=0.8)
    _, bla = estimate_bla(est, 1, 3, 3)
    model = fit_wiener(est, bla, "poly(3)")
    assert model.fit_info["cost"] <= model.fit_info["initial_cost"]
    assert np.all(_erel(model, val) < 1.0)


def test_poly1_matches_affine_lti():
    ds = _dataset(beta=[0.0, 1.0])
    _, bla = estimate_bla(ds, 1, 3, 3)
    model = fit_wiener(ds, bla, "poly(1)")
    U, _ = ds.period_means()
    for u in U:
        ref = bla.periodic_filter(u)
        y = model.simulate(u)
        assert np.linalg.norm(y - ref) < 1e-6 * np.linalg.norm(ref)


def test_net_not_worse_than_affine():
    ds = _dataset(N=256)
    _, bla = estimate_bla(ds, 1, 3, 3)
    lin = fit_wiener(ds, bla, "poly(1)")
    net = fit_wiener(ds, bla, "net(2)", restarts=2)
    assert net.fit_info["cost"] <= lin.fit_info["cost"] * (1 + 1e-8)


def test_degenerate_intermediate_signal():
    ds = _dataset(N=64)
    with pytest.raises(SpecError):
        fit_wiener(ds, RationalTf([0.0], [1.0]), "poly(2)")


def test_wiener_gain_exchange_and_identity():
    u = np.random.default_rng(3).standard_normal(64)
    m1 = WienerModel(G0, PolyNl(BETA))
    c = 2.3
    m2 = WienerModel(G0.scaled(c), PolyNl(np.array(BETA) / c ** np.arange(4)))
    y1 = m1.simulate(u)
    assert np.linalg.norm(y1 - m2.simulate(u)) < 1e-12 * np.linalg.norm(y1)
    ident = WienerModel(RationalTf([1.0], [1.0]), PolyNl([0.0, 1.0]))
    rec = SampledRecord(u + 5.0, 1.0, 64, 1, 5.0)
    np.testing.assert_allclose(simulate_block_model(ident, rec).samples, u + 5.0, atol=1e-12)


def test_json_roundtrip_bitwise():
    u = np.random.default_rng(4).standard_normal(100)
    net = SigmoidNet.scalar([0.5, -1.0], [0.1, 0.2], [1.0, 2.0], 0.3, 0.1, 2.0)
    for m in (WienerModel(G0, PolyNl(BETA, 0.2, 1.3)), WienerModel(G0, net)):
        back = WienerModel.from_dict(json.loads(json.dumps(m.to_dict())))
        np.testing.assert_array_equal(back.simulate(u), m.simulate(u))
    ws = fit_wiener_schetzen(_dataset(N=128), G0, 1, 2)
    back = WienerSchetzenModel.from_dict(json.loads(json.dumps(ws.to_dict())))
    np.testing.assert_array_equal(back.simulate(u), ws.simulate(u))


def test_obf_unit_delay_and_orthonormality():
    imp = build_obf([0.0]).impulse_responses(8)
    np.testing.assert_allclose(imp[:, 0], np.eye(8)[1], atol=1e-15)
    X = build_obf([0.5, 0.5]).impulse_responses(4096)
    np.testing.assert_allclose(X.T @ X, np.eye(2), atol=1e-6)
    X = build_obf([0.6 + 0.3j, 0.6 - 0.3j, -0.2]).impulse_responses(4096)
    np.testing.assert_allclose(X.T @ X, np.eye(3), atol=1e-6)
    assert np.isrealobj(X)
    for bad in ([1.0], [0.5 + 0.2j]):
        with pytest.raises(SpecError):
            build_obf(bad)


def test_obf_periodic_matches_frequency_response():
    basis = build_obf([0.7, 0.3 + 0.4j, 0.3 - 0.4j])
    u = np.random.default_rng(5).standard_normal(256)
    R = basis.periodic_filter(u)
    long = basis.lfilter(np.tile(u, 8))[-256:]
    np.testing.assert_allclose(R, long, atol=1e-10)


def test_ws_linear_exact_and_constant():
    ds = _dataset(beta=[0.0, 1.0])
    ws = fit_wiener_schetzen(ds, G0, 1, 1)
    assert np.all(_erel(ws, ds) < 1e-6)
    # with one operating point the constant model is the output mean
    single = _dataset(beta=[0.0, 1.0], offsets=(0.5,))
    ws0 = fit_wiener_schetzen(single, G0, 1, 0)
    np.testing.assert_allclose(_erel(ws0, single), 100.0, rtol=1e-9)
    # all coefficients zero except the constant term
    expo = monomial_exponents(3, range(3))
    coef = np.zeros((1, expo.shape[0]))
    coef[0, 0] = 1.7
    const = WienerSchetzenModel(G0.poles, expo, coef, np.zeros(3), np.ones(3))
    np.testing.assert_allclose(const.simulate(np.random.default_rng(6).standard_normal(50)), 1.7)


def test_ws_monotone_in_repetitions():
    ds = _dataset(N=512)
    _, bla = estimate_bla(ds, 1, 3, 3)
    errs = [np.mean(_erel(fit_wiener_schetzen(ds, bla, k, 3), ds)) for k in (1, 2, 3)]
    assert errs[1] <= errs[0] * (1 + 1e-9) and errs[2] <= errs[1] * (1 + 1e-9)


def test_ws_submodels_and_caps():
    ds = _dataset(N=256)
    ws = fit_wiener_schetzen(ds, G0, 1, 2, submodels=3)
    assert ws.n_submodels == 3 and ws.n_params == ws.coefficients.size + 3
    with pytest.raises(SpecError):
        fit_wiener_schetzen(ds, G0, 5, 2)
    with pytest.raises(SpecError):
        fit_wiener_schetzen(ds, G0, 1, 2, submodels=4)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit_wiener_schetzen(ds, G0, 1, 2)
