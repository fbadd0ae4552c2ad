"""Importance-sampling ratios and value estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWeightsError
from .policy import MaskedPolicy, PolicyParams, expit, log_expit
from .trajectories import Dataset

__all__ = [
    "ISRatios",
    "ValueEstimate",
    "MAX_LOG_RATIO_SPREAD",
    "log_ratios",
    "is_ratios",
    "value_weighted",
    "value_variance",
    "treatment_probability",
    "policy_value",
]

MAX_LOG_RATIO_SPREAD = 700.0


def _coef(b):
    return np.asarray(b.coefficients if isinstance(b, PolicyParams) else b, dtype=float)


def log_ratios(p: MaskedPolicy, b, d: Dataset) -> np.ndarray:
    """Per-trajectory log of prod_t pi_{beta,b}(A_t|S_t) / pi_b(A_t|S_t)."""
    S = d.decision_states
    if S.shape[-1] != p.K:
        raise ValueError(f"policy has K={p.K} but dataset has K={d.K}")
    eta = S @ p.effective_coefficients
    eta_b = S @ _coef(b)
    a = d.actions
    lp = a * log_expit(eta) + (1.0 - a) * log_expit(-eta)
    lpb = a * log_expit(eta_b) + (1.0 - a) * log_expit(-eta_b)
    return (lp - lpb).sum(axis=1)


@dataclass(frozen=True)
class ISRatios:
    log_ratios: np.ndarray
    returns: np.ndarray
    mean_ratio: float

    @classmethod
    def from_logs(cls, log_r, returns) -> "ISRatios":
        log_r = np.asarray(log_r, dtype=float)
        if not np.all(np.isfinite(log_r)):
            raise DegenerateWeightsError("non-finite log importance ratio")
        spread = float(log_r.max() - log_r.min())
        if spread > MAX_LOG_RATIO_SPREAD:
            raise DegenerateWeightsError(
                f"log importance ratios span {spread:.1f} > {MAX_LOG_RATIO_SPREAD}"
            )
        c = float(log_r.max())
        mean_ratio = float(np.exp(c) * np.mean(np.exp(log_r - c)))
        return cls(log_r, np.asarray(returns, dtype=float), mean_ratio)

    @property
    def n(self) -> int:
        return self.log_ratios.shape[0]

    @property
    def shift(self) -> float:
        return float(self.log_ratios.max())

    @property
    def scaled(self) -> np.ndarray:
        """Ratios divided by their maximum; all in (0, 1]."""
        return np.exp(self.log_ratios - self.shift)

    @property
    def ratios(self) -> np.ndarray:
        return np.exp(self.log_ratios)


def is_ratios(p: MaskedPolicy, b, d: Dataset) -> ISRatios:
    return ISRatios.from_logs(log_ratios(p, b, d), d.returns)


@dataclass(frozen=True)
class ValueEstimate:
    v_weighted: float
    v_unweighted: float
    sd_weighted: float
    n: int

    @property
    def se_weighted(self) -> float:
        return self.sd_weighted / np.sqrt(self.n)

    def to_dict(self) -> dict:
        return {
            "v_weighted": self.v_weighted,
            "v_unweighted": self.v_unweighted,
            "sd_weighted": self.sd_weighted,
            "se_weighted": self.se_weighted,
            "n": self.n,
        }


def value_variance(r: ISRatios, v: float) -> float:
    """Plug-in variance of sqrt(n) * V_n.

    mean_i (r_i G_i - V_n)^2 / (E_n r)^2, evaluated with ratios rescaled by
    their maximum so nothing overflows.
    """
    if r.n < 2:
        raise ValueError("value variance needs n >= 2")
    w = r.scaled
    # r_i G_i - V == e^c (w_i G_i - V e^{-c});  E_n r == e^c mean(w)
    v_scaled = v * np.exp(-r.shift) if np.isfinite(np.exp(-r.shift)) else 0.0
    num = np.mean((w * r.returns - v_scaled) ** 2)
    return float(num / np.mean(w) ** 2)


def value_weighted(r: ISRatios) -> ValueEstimate:
    if r.n < 2:
        raise ValueError("value estimation needs n >= 2")
    w = r.scaled
    sw = w.sum()
    if not sw > 0:
        raise DegenerateWeightsError("all importance weights are numerically zero")
    v = float(np.dot(w, r.returns) / sw)
    v_unw = float(np.mean(r.ratios * r.returns))
    return ValueEstimate(v, v_unw, float(np.sqrt(value_variance(r, v))), r.n)


def policy_value(p: MaskedPolicy, b, d: Dataset) -> ValueEstimate:
    return value_weighted(is_ratios(p, b, d))


def treatment_probability(coef, d: Dataset) -> float:
    """Average treatment probability over all decision points."""
    return float(np.mean(expit(d.decision_states @ np.asarray(coef, dtype=float))))
