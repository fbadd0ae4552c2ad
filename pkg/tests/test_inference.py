import numpy as np
import pytest

from relsparse.behavioral import fit_mle, influence_q
from relsparse.errors import SingularMatrixError
from relsparse.inference import confidence_intervals, normal_quantile, post_select_fit, sandwich_variance
from relsparse.policy import MaskedPolicy
from relsparse.trpo_objective import DerivativeBundle, derivative_bundle, fit_trpo

from conftest import random_dataset


def _bundle(z, H, X):
    z = np.asarray(z, float)
    return DerivativeBundle(z.mean(0), np.asarray(H, float), np.asarray(X, float), z)


def test_hand_one_dimensional_sandwich():
    z = [[0.4], [-1.0], [0.25]]
    q = [[0.3], [-0.1], [0.2]]
    H, X = -2.0, 0.5
    psi = [0.4 + 0.5 * 0.3, -1.0 + 0.5 * -0.1, 0.25 + 0.5 * 0.2]
    meat = (psi[0] ** 2 + psi[1] ** 2 + psi[2] ** 2) / 3
    expected = meat / (H * H)
    got = sandwich_variance(_bundle(z, [[H]], [[X]]), q, 3)
    assert got[0, 0] == pytest.approx(expected, abs=1e-12)


def test_no_nuisance_reduction():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(20, 2))
    H = np.array([[-2.0, 0.3], [0.3, -1.0]])
    classical = np.linalg.inv(H) @ (z.T @ z / 20) @ np.linalg.inv(H).T
    np.testing.assert_allclose(sandwich_variance(_bundle(z, H, np.zeros((2, 2))), rng.normal(size=(20, 2))), classical, atol=1e-12)
    np.testing.assert_allclose(sandwich_variance(_bundle(z, H, np.ones((2, 2))), None), classical, atol=1e-12)


def test_active_block_and_singular():
    z = np.random.default_rng(1).normal(size=(5, 2))
    H = np.diag([-1.0, -4.0])
    v = sandwich_variance(_bundle(z, H, np.zeros((2, 2))), None, active=[1])
    assert v[0, 0] == 0 and v[0, 1] == 0 and v[1, 1] > 0
    with pytest.raises(SingularMatrixError):
        sandwich_variance(_bundle(z, np.zeros((2, 2)), np.zeros((2, 2))), None)


def test_interval_half_width_and_degenerate():
    assert normal_quantile(0.95) == pytest.approx(1.959964, abs=1e-6)
    n = 25
    lo, hi = confidence_intervals([0.0], np.array([[n * 1.0]]), n, 0.95)  # SE = 1
    assert hi[0] == pytest.approx(1.959964, abs=1e-5) and lo[0] == pytest.approx(-1.959964, abs=1e-5)
    lo, hi = confidence_intervals([0.7], np.zeros((1, 1)), n)
    assert lo[0] == hi[0] == 0.7


def test_pinned_coordinates_get_no_interval():
    lo, hi = confidence_intervals([1.0, 2.0], np.eye(2), 10, active=[1])
    assert np.isnan(lo[0]) and np.isnan(hi[0]) and np.isfinite(lo[1])


def test_full_active_set_is_plain_fit_plus_sandwich(sim1000):
    res = post_select_fit(sim1000, (0, 1), 3.0)
    bfit = fit_mle(sim1000)
    fit = fit_trpo(bfit.b_n, sim1000, 3.0)
    np.testing.assert_allclose(res.beta.coefficients, fit.beta.coefficients, atol=1e-12)
    var = sandwich_variance(derivative_bundle(MaskedPolicy.full(fit.beta.coefficients, bfit.b_n), bfit.b_n, sim1000, 3.0), influence_q(bfit))
    np.testing.assert_allclose(res.variance, var, atol=1e-10)
    assert np.min(np.linalg.eigvalsh(res.variance)) >= -1e-10


def test_empty_active_set_is_behavioral_only(sim1000):
    res = post_select_fit(sim1000, (), 3.0)
    assert res.active == ()
    np.testing.assert_array_equal(res.beta.coefficients, res.behavioral.b_n)
    rows = res.table_rows()
    assert all(r["pinned"] == 1 and np.isnan(r["ci_low"]) for r in rows)
    assert all(np.isfinite(r["behavioral_ci_low"]) for r in rows)


def test_masked_result_table(sim1000):
    res = post_select_fit(sim1000, (1,), 3.0)
    rows = res.table_rows(["x", "y"])
    assert [r["covariate"] for r in rows] == ["x", "y"]
    assert rows[0]["pinned"] == 1 and rows[0]["coefficient"] == res.behavioral.b_n[0]
    assert rows[1]["pinned"] == 0 and rows[1]["ci_low"] < rows[1]["coefficient"] < rows[1]["ci_high"]
    assert res.to_dict()["active"] == [1]


def test_small_random_instance_runs():
    d = random_dataset(n=40, T=2, K=2, seed=3)
    res = post_select_fit(d, (0,), 2.0)
    assert np.isfinite(res.ci_lower[0])
