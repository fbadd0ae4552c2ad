"""Sandwich variance, Wald intervals and the post-selection refit."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .behavioral import BehavioralFit, fit_mle, influence_q
from .errors import SingularMatrixError
from .policy import MaskedPolicy, PolicyParams, mask_from_indices
from .trajectories import Dataset
from .trpo_objective import DerivativeBundle, FitConfig, derivative_bundle, fit_trpo
from .value import ValueEstimate, policy_value

__all__ = [
    "InferenceResult",
    "sandwich_variance",
    "confidence_intervals",
    "normal_quantile",
    "post_select_fit",
]

log = logging.getLogger(__name__)

COND_LIMIT = 1e12


def normal_quantile(level: float) -> float:
    """Two-sided standard normal critical value for coverage ``level``."""
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    return float(norm.ppf(0.5 + level / 2.0))


def sandwich_variance(bundle: DerivativeBundle, q, n: Optional[int] = None, active=None) -> np.ndarray:
    """Variance of sqrt(n) (beta_n - beta_0) on the active block.

    H_A^{-1} [mean_i (z_iA + X_A q_i)(z_iA + X_A q_i)^T] H_A^{-T}; entries
    outside the active block are zero. ``q`` may be None to drop the nuisance
    correction.
    """
    z = bundle.per_trajectory_z
    K = z.shape[1]
    if n is not None and n != z.shape[0]:
        raise ValueError(f"n={n} but bundle has {z.shape[0]} trajectories")
    idx = np.arange(K) if active is None else np.asarray(sorted(active), dtype=int)
    out = np.zeros((K, K))
    if idx.size == 0:
        return out
    H = bundle.H_n[np.ix_(idx, idx)]
    if not np.all(np.isfinite(H)) or np.linalg.cond(H) > COND_LIMIT:
        raise SingularMatrixError(
            f"Hessian of M_n on the active block is singular (cond={np.linalg.cond(H):.3g})"
        )
    psi = z[:, idx]
    if q is not None:
        psi = psi + np.asarray(q) @ bundle.X_n[idx, :].T
    meat = psi.T @ psi / psi.shape[0]
    Hinv = np.linalg.inv(H)
    var = Hinv @ meat @ Hinv.T
    out[np.ix_(idx, idx)] = 0.5 * (var + var.T)
    return out


def confidence_intervals(beta, variance, n: int, level: float = 0.95, active=None):
    """beta_k +/- z * sqrt(variance_kk / n) on active coordinates (NaN elsewhere)."""
    beta = np.asarray(beta.coefficients if isinstance(beta, PolicyParams) else beta, dtype=float)
    zq = normal_quantile(level)
    half = zq * np.sqrt(np.clip(np.diag(variance), 0.0, None) / n)
    lo, hi = beta - half, beta + half
    if active is not None:
        keep = np.zeros(beta.size, dtype=bool)
        keep[list(active)] = True
        lo = np.where(keep, lo, np.nan)
        hi = np.where(keep, hi, np.nan)
    return lo, hi


@dataclass(frozen=True)
class InferenceResult:
    beta: PolicyParams
    mask: np.ndarray
    variance: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    behavioral: BehavioralFit
    gamma: float
    n_inference: int
    level: float = 0.95
    lam: float = float("nan")
    delta: float = float("nan")
    converged: bool = True
    value: Optional[ValueEstimate] = None
    indices: tuple = ()

    @property
    def active(self) -> tuple:
        return tuple(int(k) for k in np.flatnonzero(self.mask))

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.variance), 0.0, None) / self.n_inference)

    def table_rows(self, names: Optional[Sequence[str]] = None) -> list[dict]:
        """One row per covariate: suggested coefficient/CI (or pinned) and behavioral coefficient/CI."""
        K = self.beta.K
        names = list(names) if names is not None else [f"s{k + 1}" for k in range(K)]
        blo, bhi = self.behavioral.wald_intervals(self.level)
        rows = []
        for k in range(K):
            pinned = not bool(self.mask[k])
            rows.append(
                {
                    "covariate": names[k],
                    "pinned": int(pinned),
                    "coefficient": float(self.beta.coefficients[k]),
                    "ci_low": float("nan") if pinned else float(self.ci_lower[k]),
                    "ci_high": float("nan") if pinned else float(self.ci_upper[k]),
                    "se": float("nan") if pinned else float(self.se[k]),
                    "behavioral": float(self.behavioral.b_n[k]),
                    "behavioral_ci_low": float(blo[k]),
                    "behavioral_ci_high": float(bhi[k]),
                }
            )
        return rows

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "active": list(self.active),
            "variance": self.variance.tolist(),
            "ci_lower": [None if np.isnan(x) else float(x) for x in self.ci_lower],
            "ci_upper": [None if np.isnan(x) else float(x) for x in self.ci_upper],
            "behavioral": self.behavioral.to_dict(),
            "gamma": self.gamma,
            "lambda": None if np.isnan(self.lam) else self.lam,
            "delta": None if np.isnan(self.delta) else self.delta,
            "n_inference": self.n_inference,
            "level": self.level,
            "converged": bool(self.converged),
            "value": self.value.to_dict() if self.value is not None else None,
        }


def post_select_fit(
    d_split2: Dataset,
    active,
    gamma: float,
    level: float = 0.95,
    config: Optional[FitConfig] = None,
    behavioral: Optional[BehavioralFit] = None,
) -> InferenceResult:
    """Refit on held-out data with unselected coordinates pinned to b_n.

    b_n is re-estimated on ``d_split2`` unless ``behavioral`` is supplied.
    """
    K = d_split2.K
    active = tuple(sorted(int(k) for k in active))
    mask = mask_from_indices(active, K)
    bfit = behavioral if behavioral is not None else fit_mle(d_split2)
    b = bfit.b_n
    n = d_split2.n
    if not active:
        nan = np.full(K, np.nan)
        pol = MaskedPolicy(b, b, mask)
        return InferenceResult(
            PolicyParams(b), mask, np.zeros((K, K)), nan, nan, bfit, gamma, n, level,
            value=policy_value(pol, b, d_split2),
        )
    fit = fit_trpo(b, d_split2, gamma, mask=mask, config=config)
    pol = fit.policy
    bundle = derivative_bundle(pol, b, d_split2, gamma)
    q = influence_q(bfit)
    var = sandwich_variance(bundle, q, n, active)
    lo, hi = confidence_intervals(fit.beta, var, n, level, active)
    return InferenceResult(
        fit.beta, mask, var, lo, hi, bfit, gamma, n, level,
        converged=fit.converged, value=policy_value(pol, b, d_split2),
    )
