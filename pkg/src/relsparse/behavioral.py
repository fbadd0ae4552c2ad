"""Maximum-likelihood behavioral policy, its influence terms and calibration."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit
from scipy.stats import norm

from .errors import ConvergenceError, DataError, SingularMatrixError
from .policy import PolicyParams
from .trajectories import Dataset

__all__ = [
    "BehavioralFit",
    "CalibrationBin",
    "fit_mle",
    "influence_q",
    "pooled_loglik",
    "calibration_table",
]

log = logging.getLogger(__name__)

SEPARATION_BOUND = 50.0
INFO_FLOOR = 1e-8


@dataclass(frozen=True)
class BehavioralFit:
    b_n: np.ndarray
    neg_hessian_inv: np.ndarray
    per_trajectory_scores: np.ndarray
    converged: bool
    iterations: int
    loglik: float = float("nan")

    @property
    def params(self) -> PolicyParams:
        return PolicyParams(self.b_n)

    @property
    def n(self) -> int:
        return self.per_trajectory_scores.shape[0]

    @property
    def covariance(self) -> np.ndarray:
        """Estimated covariance of b_n (inverse observed information)."""
        return self.neg_hessian_inv / self.n

    def wald_intervals(self, level: float = 0.95):
        se = np.sqrt(np.diag(self.covariance))
        zq = norm.ppf(0.5 + level / 2.0)
        return self.b_n - zq * se, self.b_n + zq * se

    def to_dict(self) -> dict:
        lo, hi = self.wald_intervals()
        return {
            "b_n": self.b_n.tolist(),
            "covariance": self.covariance.tolist(),
            "ci95_lower": lo.tolist(),
            "ci95_upper": hi.tolist(),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "loglik": float(self.loglik),
            "n": self.n,
        }


def pooled_loglik(b, d: Dataset) -> float:
    eta = d.decision_states @ np.asarray(b, dtype=float)
    a = d.actions
    return float(np.sum(a * log_expit(eta) + (1.0 - a) * log_expit(-eta)))


def _score_hessian(b, S, A):
    eta = S @ b
    pi = expit(eta)
    resid = A - pi
    per_traj = np.einsum("nt,ntk->nk", resid, S)
    w = pi * (1.0 - pi)
    hess = -np.einsum("nt,ntj,ntk->jk", w, S, S)
    return per_traj, hess


def fit_mle(d: Dataset, max_iter: int = 100, tol: float = 1e-10, b_init=None) -> BehavioralFit:
    """Newton-Raphson logistic regression on the pooled (state, action) pairs.

    Iterates are step-halved until the log-likelihood does not decrease.
    """
    S = d.decision_states
    A = d.actions
    n = d.n
    b = np.zeros(d.K) if b_init is None else np.array(b_init, dtype=float)
    ll = pooled_loglik(b, d)
    prev_gnorm = None
    for it in range(1, max_iter + 1):
        per_traj, hess = _score_hessian(b, S, A)
        mean_score = per_traj.mean(axis=0)
        gnorm = float(np.max(np.abs(mean_score)))
        # a score stuck at roundoff level counts as converged too
        stalled = prev_gnorm is not None and gnorm < 1e-6 and gnorm >= prev_gnorm * (1 - 1e-12)
        if gnorm <= tol or stalled:
            return _finish(b, per_traj, hess, n, True, it - 1, ll)
        prev_gnorm = gnorm
        try:
            step = np.linalg.solve(-hess, per_traj.sum(axis=0))
        except np.linalg.LinAlgError:
            raise SingularMatrixError(
                "behavioral Hessian is singular; state columns may be collinear"
            ) from None
        t = 1.0
        for _ in range(60):
            cand = b + t * step
            ll_c = pooled_loglik(cand, d)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            raise ConvergenceError("step-halving failed to increase the likelihood", b, it)
        b, ll = cand, ll_c
        if np.max(np.abs(b)) > SEPARATION_BOUND:
            raise ConvergenceError(
                f"behavioral coefficients exceed {SEPARATION_BOUND} in magnitude; "
                "actions look (quasi-)separable by the states",
                b,
                it,
            )
    per_traj, hess = _score_hessian(b, S, A)
    if np.max(np.abs(per_traj.mean(axis=0))) <= tol:
        return _finish(b, per_traj, hess, n, True, max_iter, ll)
    raise ConvergenceError(f"Newton-Raphson did not converge in {max_iter} iterations", b, max_iter)


def _finish(b, per_traj, hess, n, converged, iterations, ll):
    neg_mean_hess = -hess / n
    if np.min(np.linalg.eigvalsh(neg_mean_hess)) < INFO_FLOOR:
        # fitted probabilities are pinned at 0/1: the likelihood has no finite maximiser
        raise ConvergenceError(
            "behavioral information has collapsed; actions look (quasi-)separable by the states",
            b,
            iterations,
        )
    if np.linalg.cond(neg_mean_hess) > 1e12:
        raise SingularMatrixError("behavioral information matrix is numerically singular")
    inv = np.linalg.inv(neg_mean_hess)
    inv = 0.5 * (inv + inv.T)
    b = np.array(b)
    b.setflags(write=False)
    return BehavioralFit(b, inv, per_traj, converged, iterations, ll)


def influence_q(fit: BehavioralFit) -> np.ndarray:
    """Per-trajectory influence vectors of b_n, shape (n, K).

    q_i = (-E_n l''(b_n))^{-1} l'_i(b_n), so that mean(q_i) is the one-step
    linearisation of b_n - b_0 and sqrt(n) q_i has covariance close to that
    of sqrt(n)(b_n - b_0).
    """
    if not fit.converged:
        raise ConvergenceError("influence terms need a converged behavioral fit")
    return fit.per_trajectory_scores @ fit.neg_hessian_inv.T


@dataclass(frozen=True)
class CalibrationBin:
    lower: float
    upper: float
    mean_predicted: float
    observed: float
    count: int


def calibration_table(fit, d: Dataset, bins: int = 10) -> list[CalibrationBin]:
    """Equal-width calibration bins of pooled predictions; empty bins are omitted.

    ``fit`` may be a BehavioralFit or a coefficient vector.
    """
    if bins < 2:
        raise ValueError("bins must be at least 2")
    if d.n == 0:
        raise DataError("empty dataset")
    coef = fit.b_n if isinstance(fit, BehavioralFit) else np.asarray(fit, dtype=float)
    pred = expit(d.decision_states @ coef).ravel()
    act = d.actions.ravel()
    idx = np.minimum((pred * bins).astype(int), bins - 1)
    out = []
    for k in range(bins):
        sel = idx == k
        c = int(sel.sum())
        if c == 0:
            continue
        out.append(
            CalibrationBin(k / bins, (k + 1) / bins, float(pred[sel].mean()), float(act[sel].mean()), c)
        )
    return out
