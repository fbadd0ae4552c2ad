"""Expit treatment policies and the masked post-selection policy.

The masked policy treats with probability

    expit(beta . (s * mask) + b . (s * (1 - mask)))

so coordinates outside the active mask follow the behavioral coefficients
``b``. All log-probabilities go through ``log_expit`` so extreme linear
predictors never produce ``log(0)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

__all__ = [
    "PolicyParams",
    "MaskedPolicy",
    "StepDerivatives",
    "expit",
    "log_expit",
    "prob_treat",
    "log_prob",
    "log_prob_derivs",
    "mask_from_indices",
]


def _vec(x, name):
    out = np.array(x, dtype=float, copy=True).reshape(-1)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} must be finite")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PolicyParams:
    coefficients: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coefficients", _vec(self.coefficients, "coefficients"))

    @property
    def K(self) -> int:
        return self.coefficients.shape[0]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.coefficients, dtype=dtype)

    def tolist(self):
        return self.coefficients.tolist()


def mask_from_indices(active, K: int) -> np.ndarray:
    """0/1 mask from zero-based active indices."""
    m = np.zeros(K)
    for k in active:
        if not 0 <= k < K:
            raise ValueError(f"active index {k} out of range for K={K}")
        m[k] = 1.0
    return m


@dataclass(frozen=True)
class MaskedPolicy:
    beta: np.ndarray
    b: np.ndarray
    active_mask: np.ndarray

    def __post_init__(self):
        beta = _vec(self.beta, "beta")
        b = _vec(self.b, "b")
        m = _vec(self.active_mask, "active_mask")
        if not (beta.shape == b.shape == m.shape):
            raise ValueError(f"beta, b, mask lengths differ: {beta.shape}, {b.shape}, {m.shape}")
        if not np.all(np.isin(m, (0.0, 1.0))):
            raise ValueError("active_mask entries must be 0 or 1")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "active_mask", m)

    @classmethod
    def full(cls, beta, b=None) -> "MaskedPolicy":
        """Plain policy expit(beta . s): every coordinate active."""
        beta = np.asarray(beta, dtype=float)
        return cls(beta, beta if b is None else b, np.ones_like(beta))

    @property
    def K(self) -> int:
        return self.beta.shape[0]

    @property
    def active(self) -> tuple:
        return tuple(int(k) for k in np.flatnonzero(self.active_mask))

    @property
    def effective_coefficients(self) -> np.ndarray:
        """The single coefficient vector the masked policy acts with."""
        m = self.active_mask
        return self.beta * m + self.b * (1.0 - m)

    def linear(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if s.shape[-1] != self.K:
            raise ValueError(f"state dimension {s.shape[-1]} does not match K={self.K}")
        return s @ self.effective_coefficients


def prob_treat(p: MaskedPolicy, s) -> np.ndarray:
    return expit(p.linear(s))


def log_prob(p: MaskedPolicy, a, s) -> np.ndarray:
    eta = p.linear(s)
    a = np.asarray(a, dtype=float)
    return np.where(a == 1.0, log_expit(eta), log_expit(-eta))


@dataclass(frozen=True)
class StepDerivatives:
    """Derivatives of one step's log-probabilities.

    ``d2_beta_b`` has rows indexed by beta and columns by b. The ``behavioral_*``
    fields are for the denominator policy expit(b . s).
    """

    d_beta: np.ndarray
    d_b: np.ndarray
    d2_beta: np.ndarray
    d2_beta_b: np.ndarray
    behavioral_score: np.ndarray
    behavioral_hessian: np.ndarray


def log_prob_derivs(p: MaskedPolicy, a, s) -> StepDerivatives:
    s = np.asarray(s, dtype=float)
    if s.shape != (p.K,):
        raise ValueError(f"state must have shape ({p.K},), got {s.shape}")
    a = float(a)
    m = p.active_mask
    s_act = s * m
    s_pin = s * (1.0 - m)
    pi = float(expit(p.linear(s)))
    dpi = pi * (1.0 - pi)
    pib = float(expit(s @ p.b))
    return StepDerivatives(
        d_beta=(a - pi) * s_act,
        d_b=(a - pi) * s_pin,
        d2_beta=-dpi * np.outer(s_act, s_act),
        d2_beta_b=-dpi * np.outer(s_act, s_pin),
        behavioral_score=(a - pib) * s,
        behavioral_hessian=-pib * (1.0 - pib) * np.outer(s, s),
    )
