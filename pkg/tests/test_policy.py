import numpy as np
import pytest
from scipy.special import expit

from relsparse.policy import MaskedPolicy, log_prob, log_prob_derivs, mask_from_indices, prob_treat


def test_full_mask_is_plain_expit():
    p = MaskedPolicy.full([0.4, -1.2])
    s = np.array([1.5, 0.3])
    assert prob_treat(p, s) == pytest.approx(expit(0.4 * 1.5 - 1.2 * 0.3))


def test_zero_mask_is_behavioral():
    p = MaskedPolicy([9.0, 9.0], [0.4, -1.2], [0, 0])
    s = np.array([1.5, 0.3])
    assert prob_treat(p, s) == pytest.approx(expit(0.4 * 1.5 - 1.2 * 0.3))


def test_hand_masked_linear_form():
    p = MaskedPolicy([0.0, 5.0], [1.0, 0.0], [0, 1])
    s = np.array([2.0, 1.0])
    assert prob_treat(p, s) == pytest.approx(expit(7.0), rel=1e-15)
    assert log_prob(p, 1, s) == pytest.approx(np.log(expit(7.0)), rel=1e-14)


def test_null_policy_half():
    p = MaskedPolicy.full([0.0, 0.0])
    s = np.array([0.7, -3.0])
    assert log_prob(p, 0, s) == pytest.approx(np.log(0.5))
    assert log_prob(p, 1, s) == pytest.approx(np.log(0.5))


def test_log_prob_extreme_arguments_are_finite():
    p = MaskedPolicy.full([500.0])
    assert np.isfinite(log_prob(p, 0, np.array([3.0])))
    assert log_prob(p, 1, np.array([3.0])) == pytest.approx(0.0)


def test_full_mask_has_no_b_derivative():
    p = MaskedPolicy([0.3, -0.7], [1.0, 2.0], [1, 1])
    dv = log_prob_derivs(p, 1, np.array([0.5, 1.5]))
    np.testing.assert_array_equal(dv.d_b, 0.0)


def _lp(beta, b, mask, a, s):
    return float(log_prob(MaskedPolicy(beta, b, mask), a, s))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("mask", [(1, 1, 1), (1, 0, 1), (0, 1, 0)])
def test_derivatives_match_finite_differences(seed, mask):
    rng = np.random.default_rng(seed)
    beta, b, s = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
    mask = np.array(mask, dtype=float)
    a = int(rng.integers(2))
    dv = log_prob_derivs(MaskedPolicy(beta, b, mask), a, s)
    h = 1e-5
    e = np.eye(3)
    fd_beta = np.array([(_lp(beta + h * e[k], b, mask, a, s) - _lp(beta - h * e[k], b, mask, a, s)) / (2 * h) for k in range(3)])
    fd_b = np.array([(_lp(beta, b + h * e[k], mask, a, s) - _lp(beta, b - h * e[k], mask, a, s)) / (2 * h) for k in range(3)])
    np.testing.assert_allclose(dv.d_beta, fd_beta, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(dv.d_b, fd_b, rtol=1e-6, atol=1e-9)

    def grad_beta(bt, bb):
        return log_prob_derivs(MaskedPolicy(bt, bb, mask), a, s).d_beta

    fd2 = np.column_stack([(grad_beta(beta + h * e[k], b) - grad_beta(beta - h * e[k], b)) / (2 * h) for k in range(3)])
    fdx = np.column_stack([(grad_beta(beta, b + h * e[k]) - grad_beta(beta, b - h * e[k])) / (2 * h) for k in range(3)])
    np.testing.assert_allclose(dv.d2_beta, fd2, rtol=1e-5, atol=1e-9)
    np.testing.assert_allclose(dv.d2_beta_b, fdx, rtol=1e-5, atol=1e-9)


def test_mask_from_indices():
    np.testing.assert_array_equal(mask_from_indices((1,), 3), [0, 1, 0])
    with pytest.raises(ValueError):
        mask_from_indices((3,), 3)
