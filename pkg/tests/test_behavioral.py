import numpy as np
import pytest
from scipy.optimize import minimize_scalar
from scipy.special import expit

from relsparse.behavioral import calibration_table, fit_mle, influence_q, pooled_loglik
from relsparse.errors import ConvergenceError
from relsparse.simulate import SimConfig, gen_dataset
from relsparse.trajectories import Dataset

from conftest import random_dataset


def _single_step(x, a):
    """K=1, T=0 dataset: one decision per trajectory."""
    n = len(x)
    S = np.zeros((n, 2, 1))
    S[:, 0, 0] = x
    return Dataset(S, np.asarray(a, float).reshape(n, 1), np.zeros((n, 1)))


def test_symmetric_data_gives_zero():
    d = _single_step([-1, -1, 1, 1, 2, 2], [0, 1, 0, 1, 0, 1])
    fit = fit_mle(d)
    assert abs(fit.b_n[0]) < 1e-6


def test_brute_force_tiny_instance():
    d = random_dataset(n=5, T=1, K=1, seed=8, b=[0.4])
    fit = fit_mle(d)
    grid = np.arange(-10, 10, 1e-3)
    ll = [pooled_loglik([g], d) for g in grid]
    g0 = grid[int(np.argmax(ll))]
    res = minimize_scalar(lambda x: -pooled_loglik([x], d), bounds=(g0 - 2e-3, g0 + 2e-3), method="bounded", options={"xatol": 1e-9})
    assert fit.b_n[0] == pytest.approx(res.x, abs=1e-4)


def test_score_is_zero_at_mle():
    d = random_dataset(n=40, T=2, K=3, seed=1)
    fit = fit_mle(d)
    np.testing.assert_allclose(fit.per_trajectory_scores.mean(axis=0), 0.0, atol=1e-9)


def test_permutation_invariance():
    d = random_dataset(n=30, T=1, K=2, seed=2)
    perm = np.random.default_rng(0).permutation(d.n)
    np.testing.assert_allclose(fit_mle(d).b_n, fit_mle(d.subset(perm)).b_n, atol=1e-10)


def test_separable_data_raises():
    d = _single_step([-2, -1, 1, 2], [0, 0, 1, 1])
    with pytest.raises(ConvergenceError, match="separ"):
        fit_mle(d)


def test_influence_hand_calculation():
    x, a = np.array([1.0, 2.0, -1.0]), np.array([1.0, 0.0, 0.0])
    fit = fit_mle(_single_step(x, a))
    b = fit.b_n[0]
    p = expit(b * x)
    info = np.mean(p * (1 - p) * x**2)
    expected = (a - p) * x / info
    np.testing.assert_allclose(influence_q(fit)[:, 0], expected, rtol=1e-10, atol=1e-12)
    assert abs(influence_q(fit).mean()) < 1e-9


@pytest.mark.slow
def test_influence_covariance_matches_monte_carlo():
    est, pred = [], []
    for m in range(200):
        d = gen_dataset(SimConfig(n=500, seed=m))
        fit = fit_mle(d)
        q = influence_q(fit)
        est.append(fit.b_n)
        # sd of mean(q_i) = sd(q_i) / sqrt(n)
        pred.append(q.std(axis=0) / np.sqrt(d.n))
    mc_sd = np.std(est, axis=0, ddof=1)
    np.testing.assert_allclose(np.mean(pred, axis=0), mc_sd, rtol=0.15)


@pytest.mark.slow
def test_mle_within_three_se_of_truth():
    hits = 0
    for m in range(100):
        fit = fit_mle(gen_dataset(SimConfig(n=1000, seed=m)))
        se = np.sqrt(np.diag(fit.covariance))
        hits += np.all(np.abs(fit.b_n - np.array([-0.3, 0.2])) <= 3 * se)
    assert hits >= 97


def test_calibration_large_sample():
    d = gen_dataset(SimConfig(n=20000, seed=4))
    fit = fit_mle(d)
    for row in calibration_table(fit, d, bins=10):
        if row.count >= 100:
            assert abs(row.mean_predicted - row.observed) <= 0.05


def test_calibration_constant_predictor():
    rng = np.random.default_rng(0)
    d = _single_step(rng.normal(size=400), rng.integers(0, 2, 400))
    table = calibration_table([0.0], d, bins=4)
    assert len(table) == 1
    assert table[0].observed == pytest.approx(0.5, abs=0.07)
    with pytest.raises(ValueError):
        calibration_table([0.0], d, bins=1)


def test_wald_intervals_contain_estimate():
    fit = fit_mle(random_dataset(n=50, seed=9))
    lo, hi = fit.wald_intervals(0.9)
    assert np.all(lo < fit.b_n) and np.all(fit.b_n < hi)
