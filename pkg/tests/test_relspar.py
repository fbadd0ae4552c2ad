import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from relsparse.behavioral import fit_mle, influence_q
from relsparse.policy import MaskedPolicy
from relsparse.relspar import (
    adaptive_weights,
    default_lambda_grid,
    fit_relspar,
    kkt_residual,
    lambda_path,
    prox_relative_l1,
    select_index,
    select_lambda,
    soft_threshold,
    w_n,
)
from relsparse.trajectories import split_dataset
from relsparse.trpo_objective import FitConfig, fit_trpo
from relsparse.value import ValueEstimate, policy_value


@pytest.fixture(scope="module")
def setup(sim1000):
    sp = split_dataset(sim1000, seed=0)
    tr, te = sim1000.subset(sp.split1_train), sim1000.subset(sp.split1_test)
    bfit = fit_mle(tr)
    b = bfit.b_n
    pilot = fit_trpo(b, tr, 3.0).beta
    w = adaptive_weights(pilot, b, 1.0)
    return tr, te, bfit, b, pilot, w


def test_weights_hand_values():
    np.testing.assert_allclose(adaptive_weights([0.5, -0.25], [0, 0], 1.0).w, [2.0, 4.0])
    np.testing.assert_allclose(adaptive_weights([1.5, 0.75], [1, 1], 2.0).w, [4.0, 16.0])
    w = adaptive_weights([0.3, 0.5], [0.3, 0.0], 1.0)
    assert np.isinf(w.w[0]) and w.pinned.tolist() == [True, False]
    np.testing.assert_array_equal(adaptive_weights([0.5, -0.25], [0, 0], 1.0, nonadaptive=True).w, [1.0, 1.0])


@pytest.mark.parametrize("u,b,t", [(3.0, 1.0, 0.5), (0.2, 1.0, 0.5), (1.1, 1.0, 0.5), (-4.0, 2.0, 1.5)])
def test_prox_matches_closed_form_and_scalar_minimiser(u, b, t):
    expected = b + np.sign(u - b) * max(abs(u - b) - t, 0.0)
    got = prox_relative_l1([u], [b], [t])[0]
    assert got == pytest.approx(expected, abs=1e-12)
    res = minimize_scalar(lambda x: 0.5 * (x - u) ** 2 + t * abs(x - b), bounds=(-10, 10), method="bounded", options={"xatol": 1e-12})
    assert got == pytest.approx(res.x, abs=1e-6)
    np.testing.assert_array_equal(soft_threshold(np.array([-1.0, 0.2, 3.0]), 0.5), [-0.5, 0.0, 2.5])


def test_prox_infinite_threshold_pins():
    np.testing.assert_array_equal(prox_relative_l1([5.0, 5.0], [1.0, 2.0], [np.inf, 0.0]), [1.0, 5.0])


def test_lambda_zero_matches_trpo(setup):
    tr, _, _, b, pilot, w = setup
    fit = fit_relspar(b, tr, FitConfig(gamma=3.0, lam=0.0), w, pilot)
    np.testing.assert_allclose(fit.coefficients, pilot.coefficients, atol=1e-6)


def test_huge_lambda_returns_behavior(setup):
    tr, _, _, b, pilot, w = setup
    lam = 1e6 * np.max(w.w[np.isfinite(w.w)])
    fit = fit_relspar(b, tr, FitConfig(gamma=3.0, lam=lam), w, pilot)
    np.testing.assert_array_equal(fit.coefficients, b)


def test_kkt_and_objective_at_solutions(setup):
    tr, _, _, b, pilot, w = setup
    for lam in default_lambda_grid(b, tr, 3.0, w):
        fit = fit_relspar(b, tr, FitConfig(gamma=3.0, lam=lam), w, pilot)
        assert fit.converged
        assert np.max(kkt_residual(fit.coefficients, b, tr, 3.0, lam, w)) < 1e-6
        assert w_n(fit.coefficients, b, tr, 3.0, lam, w) >= w_n(b, b, tr, 3.0, lam, w) - 1e-12


def test_pinned_coordinate_never_moves(setup):
    tr, _, _, b, pilot, _ = setup
    w = adaptive_weights([b[0], pilot.coefficients[1]], b, 1.0)
    fit = fit_relspar(b, tr, FitConfig(gamma=3.0, lam=1e-4), w, pilot)
    assert fit.coefficients[0] == b[0]


def test_path_endpoints_and_shape(setup):
    tr, te, bfit, b, pilot, w = setup
    path = lambda_path(b, tr, te, 3.0, 1.0, pilot=pilot, weights=w, q_train=influence_q(bfit))
    assert len(path) == 10
    last = path[-1]
    assert last.active_set == ()
    assert abs(last.prob_gap) < 1e-12
    coef2 = np.array([p.beta.coefficients[1] for p in path])
    # moves from b_2 > 0 down through zero: negative and growing in magnitude as lambda -> 0
    assert coef2[0] < 0
    assert np.all(np.diff(coef2) >= -1e-8)
    neg = coef2[coef2 < 0]
    assert np.all(np.diff(np.abs(neg)) <= 1e-8)
    assert np.all(np.isfinite(np.array([p.sd_band for p in path])))
    lams = np.array([p.lam for p in path])
    jumps = np.abs(np.diff(np.array([p.beta.coefficients for p in path]), axis=0)).max(1)
    assert np.all(jumps <= 10 * np.diff(lams) * np.max(w.w[np.isfinite(w.w)]) + 1e-8)


def test_single_point_grid(setup):
    tr, te, _, b, pilot, w = setup
    path = lambda_path(b, tr, te, 3.0, 1.0, lambdas=[0.0], pilot=pilot, weights=w)
    assert len(path) == 1
    np.testing.assert_allclose(path[0].beta.coefficients, pilot.coefficients, atol=1e-6)


def test_unsorted_grid_rejected(setup):
    tr, te, _, b, pilot, w = setup
    with pytest.raises(ValueError):
        lambda_path(b, tr, te, 3.0, 1.0, lambdas=[0.2, 0.1], pilot=pilot, weights=w)


def test_select_index_rules():
    lams = [0.05, 0.1, 0.2, 0.4]
    vals = [0.0, 1.5, 1.2, 0.3]
    assert select_index(lams, vals, 1.0) == (2, True)
    assert select_index(lams, vals, 5.0) == (0, False)


def test_select_lambda_thresholds(setup):
    tr, te, _, b, pilot, w = setup
    path = lambda_path(b, tr, te, 3.0, 1.0, pilot=pilot, weights=w)
    vb = policy_value(MaskedPolicy.full(b), b, tr)
    sel = select_lambda(path, vb)
    assert sel.v_min == pytest.approx(vb.v_weighted + vb.sd_weighted / np.sqrt(vb.n))
    assert sel.flag == "ok"
    assert sel.point.active_set == (1,)
    sd = select_lambda(path, vb, use_sd=True)
    assert sd.v_min == pytest.approx(vb.v_weighted + vb.sd_weighted)
    impossible = ValueEstimate(1e9, 1e9, 1.0, 10)
    low = select_lambda(path, impossible)
    assert low.flag == "no-qualifying-lambda" and low.point.lam == min(p.lam for p in path)
