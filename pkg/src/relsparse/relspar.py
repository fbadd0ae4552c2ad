"""Adaptive relative-sparsity fits, lambda paths and the lambda selection rule.

The penalised objective is

    W_n(beta) = M_n(beta) - lam * sum_k w_k |beta_k - b_k|

with adaptive weights w_k = |pilot_k - b_k|^(-delta). It is maximised by
proximal gradient ascent whose soft-threshold step shrinks toward ``b``
rather than toward zero, so unselected coefficients land exactly on their
behavioral values.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateWeightsError, SingularMatrixError
from .policy import MaskedPolicy, PolicyParams
from .trajectories import Dataset
from .trpo_objective import FitConfig, derivative_bundle, kl_n, objective_and_gradient
from .value import ValueEstimate, policy_value, treatment_probability

__all__ = [
    "AdaptiveWeights",
    "RelsparFit",
    "PathPoint",
    "Selection",
    "ACTIVE_TOL",
    "PIN_TOL",
    "adaptive_weights",
    "soft_threshold",
    "prox_relative_l1",
    "w_n",
    "fit_relspar",
    "default_lambda_grid",
    "select_index",
    "lambda_path",
    "select_lambda",
]

log = logging.getLogger(__name__)

ACTIVE_TOL = 1e-6
PIN_TOL = 1e-10


def _coef(b):
    return np.asarray(b.coefficients if isinstance(b, PolicyParams) else b, dtype=float)


@dataclass(frozen=True)
class AdaptiveWeights:
    w: np.ndarray
    delta: float
    source_pilot: PolicyParams

    @property
    def pinned(self) -> np.ndarray:
        return ~np.isfinite(self.w)


def adaptive_weights(pilot, b, delta: float, nonadaptive: bool = False) -> AdaptiveWeights:
    """Weights |pilot_k - b_k|^(-delta); +inf where the gap is below PIN_TOL.

    ``nonadaptive`` sets every finite weight to 1 (the plain relative lasso).
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    gap = np.abs(_coef(pilot) - _coef(b))
    with np.errstate(divide="ignore"):
        w = np.where(gap < PIN_TOL, np.inf, gap ** (-float(delta)))
    if nonadaptive:
        w = np.where(np.isfinite(w), 1.0, np.inf)
    w.setflags(write=False)
    return AdaptiveWeights(w, float(delta), PolicyParams(_coef(pilot)))


def soft_threshold(u, thresh):
    return np.sign(u) * np.maximum(np.abs(u) - thresh, 0.0)


def prox_relative_l1(u, b, thresh):
    """argmin_x 1/2 ||x - u||^2 + sum_k thresh_k |x_k - b_k|; infinite thresh pins."""
    u = np.asarray(u, dtype=float)
    b = np.asarray(b, dtype=float)
    thresh = np.asarray(thresh, dtype=float)
    out = b + soft_threshold(u - b, np.where(np.isfinite(thresh), thresh, 0.0))
    return np.where(np.isfinite(thresh), out, b)


def _penalty(beta, b, lam, w):
    fin = np.isfinite(w)
    return float(lam * np.sum(w[fin] * np.abs(beta[fin] - b[fin])))


def w_n(beta, b, d: Dataset, gamma: float, lam: float, weights: AdaptiveWeights) -> float:
    beta = _coef(beta)
    b = _coef(b)
    if np.any(weights.pinned & (np.abs(beta - b) > 0)):
        return -np.inf
    m, _ = objective_and_gradient(beta, b, np.ones_like(b), d, gamma)
    return m - _penalty(beta, b, lam, weights.w)


@dataclass(frozen=True)
class RelsparFit:
    beta: PolicyParams
    lam: float
    objective: float
    converged: bool
    iterations: int

    @property
    def coefficients(self) -> np.ndarray:
        return self.beta.coefficients


def fit_relspar(
    b,
    d: Dataset,
    cfg: FitConfig,
    weights: AdaptiveWeights,
    warm_start=None,
    tol: float = 1e-9,
) -> RelsparFit:
    """Proximal-gradient ascent on W_n with backtracking step control."""
    if not cfg.gamma > 0:
        raise ValueError("gamma must be > 0")
    if cfg.lam < 0:
        raise ValueError("lambda must be nonnegative")
    b = _coef(b)
    ones = np.ones_like(b)
    w = np.asarray(weights.w, dtype=float)
    lam = float(cfg.lam)
    x = b.copy() if warm_start is None else _coef(warm_start).copy()
    x = np.where(np.isfinite(w), x, b)

    def fg(z):
        return objective_and_gradient(z, b, ones, d, cfg.gamma)

    f, g = fg(x)
    step = cfg.step_init
    converged = False
    it = 0
    for it in range(1, cfg.max_iters * 20 + 1):
        while True:
            u = x + step * g
            c = prox_relative_l1(u, b, step * lam * w)
            move = c - x
            big = np.max(np.abs(move)) if move.size else 0.0
            if big > cfg.max_step:
                c = x + move * (cfg.max_step / big)
                move = c - x
            try:
                fc, gc = fg(c)
            except DegenerateWeightsError:
                fc, gc = -np.inf, None
            # sufficient-increase test for the smooth part (prox-grad ascent)
            if gc is not None and fc >= f + g @ move - (move @ move) / (2.0 * step) - 1e-15 * abs(f):
                break
            step *= 0.5
            if step < 1e-14:
                gc = None
                break
        if gc is None:
            break
        x, f, g = c, fc, gc
        if np.max(np.abs(move)) <= tol:
            converged = True
            break
        step = min(step * 1.5, 1e6)
    if not converged:
        warnings.warn(
            f"relative-sparsity fit at lambda={lam:g} did not converge in {it} iterations",
            RuntimeWarning,
            stacklevel=2,
        )
    return RelsparFit(PolicyParams(x), lam, f - _penalty(x, b, lam, w), converged, it)


def kkt_residual(beta, b, d: Dataset, gamma: float, lam: float, weights: AdaptiveWeights) -> np.ndarray:
    """Per-coordinate violation of the subgradient optimality condition."""
    beta = _coef(beta)
    b = _coef(b)
    _, J = objective_and_gradient(beta, b, np.ones_like(b), d, gamma)
    w = weights.w
    out = np.zeros_like(beta)
    for k in range(beta.size):
        if not np.isfinite(w[k]):
            continue
        diff = beta[k] - b[k]
        if abs(diff) > ACTIVE_TOL:
            out[k] = abs(J[k] - lam * w[k] * np.sign(diff))
        else:
            out[k] = max(abs(J[k]) - lam * w[k], 0.0)
    return out


# ---------------------------------------------------------------------------
# lambda paths


@dataclass(frozen=True)
class PathPoint:
    lam: float
    beta: PolicyParams
    b: PolicyParams
    value_train: ValueEstimate
    value_test: Optional[ValueEstimate]
    kl: float
    prob_sugg: float
    prob_beh: float
    active_set: tuple
    sd_band: np.ndarray
    converged: bool = True

    @property
    def prob_gap(self) -> float:
        return self.prob_sugg - self.prob_beh

    def active_flags(self) -> list[int]:
        return [int(k in self.active_set) for k in range(self.beta.K)]


def active_set_of(beta, b, tol: float = ACTIVE_TOL) -> tuple:
    gap = np.abs(_coef(beta) - _coef(b))
    return tuple(int(k) for k in np.flatnonzero(gap > tol))


def default_lambda_grid(b, d: Dataset, gamma: float, weights: AdaptiveWeights, num: int = 10, ratio: float = 1e-3):
    """``num`` log-spaced lambdas from ratio * lam_max up to lam_max.

    lam_max is the smallest lambda at which beta = b satisfies the
    optimality conditions, so the top of the grid is fully behavioral.
    """
    b = _coef(b)
    _, J = objective_and_gradient(b, b, np.ones_like(b), d, gamma)
    fin = np.isfinite(weights.w) & (weights.w > 0)
    lam_max = float(np.max(np.abs(J[fin]) / weights.w[fin])) if fin.any() else 0.0
    if not lam_max > 0:
        lam_max = 1.0
    return lam_max * np.logspace(np.log10(ratio), 0.0, num)


def _sd_band(beta, b, d, gamma, q):
    from .inference import sandwich_variance

    try:
        bundle = derivative_bundle(MaskedPolicy.full(beta, b), b, d, gamma)
        var = sandwich_variance(bundle, q)
        return np.sqrt(np.clip(np.diag(var), 0.0, None) / d.n)
    except (SingularMatrixError, DegenerateWeightsError, np.linalg.LinAlgError):
        return np.full(_coef(b).size, np.nan)


def lambda_path(
    b,
    d_train: Dataset,
    d_test: Optional[Dataset],
    gamma: float,
    delta: float,
    lambdas: Optional[Sequence[float]] = None,
    pilot=None,
    weights: Optional[AdaptiveWeights] = None,
    q_train=None,
    config: Optional[FitConfig] = None,
    bands: bool = True,
) -> list[PathPoint]:
    """Warm-started relative-sparsity fits over ascending ``lambdas``.

    ``b`` is the behavioral MLE on ``d_train``; it serves as the IS
    denominator on both train and test data. ``q_train`` (influence terms
    of b on the training data) enables the sandwich sd bands.
    """
    from .trpo_objective import fit_trpo

    b = _coef(b)
    cfg = config or FitConfig(gamma=gamma, delta=delta)
    if pilot is None:
        pilot = fit_trpo(b, d_train, gamma, config=replace_cfg(cfg, gamma=gamma)).beta
    if weights is None:
        weights = adaptive_weights(pilot, b, delta)
    if lambdas is None:
        lambdas = default_lambda_grid(b, d_train, gamma, weights)
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(np.diff(lambdas) < 0):
        raise ValueError("lambdas must be sorted ascending")
    ones = np.ones_like(b)
    behav = MaskedPolicy.full(b)
    p_beh = treatment_probability(b, d_train)
    warm = _coef(pilot)
    out = []
    for lam in lambdas:
        fit = fit_relspar(b, d_train, replace_cfg(cfg, gamma=gamma, lam=float(lam)), weights, warm)
        beta = fit.coefficients
        warm = beta
        pol = MaskedPolicy(beta, b, ones)
        v_tr = policy_value(pol, b, d_train)
        v_te = policy_value(pol, b, d_test) if d_test is not None else None
        band = _sd_band(beta, b, d_train, gamma, q_train) if (bands and q_train is not None) else np.full(b.size, np.nan)
        out.append(
            PathPoint(
                float(lam),
                PolicyParams(beta),
                PolicyParams(b),
                v_tr,
                v_te,
                kl_n(pol, b, d_train),
                treatment_probability(beta, d_train),
                p_beh,
                active_set_of(beta, b),
                band,
                fit.converged,
            )
        )
    return out


def replace_cfg(cfg: FitConfig, **kw) -> FitConfig:
    from dataclasses import replace

    return replace(cfg, **kw)


@dataclass(frozen=True)
class Selection:
    point: PathPoint
    index: int
    v_min: float
    qualified: bool

    @property
    def flag(self) -> str:
        return "ok" if self.qualified else "no-qualifying-lambda"


def select_lambda(path: Sequence[PathPoint], v_behavioral: ValueEstimate, use_sd: bool = False) -> Selection:
    """Largest lambda whose training value beats behavior by one standard error.

    The threshold is V_n(b_n) + se, with se = sd / sqrt(n); ``use_sd`` uses the
    sd of sqrt(n) V_n instead. Falls back to the smallest lambda, flagged.
    """
    if not path:
        raise ValueError("empty path")
    spread = v_behavioral.sd_weighted if use_sd else v_behavioral.se_weighted
    v_min = v_behavioral.v_weighted + spread
    i, ok = select_index([p.lam for p in path], [p.value_train.v_weighted for p in path], v_min)
    return Selection(path[i], i, v_min, ok)


def select_index(lams: Sequence[float], values: Sequence[float], v_min: float) -> tuple[int, bool]:
    """Index of the largest lambda with value >= v_min, else (smallest lambda, False)."""
    if len(lams) == 0:
        raise ValueError("empty path")
    order = sorted(range(len(lams)), key=lambda i: lams[i])
    qualifying = [i for i in order if values[i] >= v_min]
    if qualifying:
        return qualifying[-1], True
    return order[0], False
