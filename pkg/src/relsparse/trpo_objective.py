"""KL-penalised value objective M_n = V_n - gamma * KL_n and its derivatives.

All ratio-dependent terms enter through quotients that are invariant to a
common rescaling of the importance ratios, so they are computed with ratios
divided by their maximum.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DegenerateWeightsError
from .policy import MaskedPolicy, PolicyParams, expit, log_expit
from .trajectories import Dataset
from .value import MAX_LOG_RATIO_SPREAD, is_ratios, value_weighted

__all__ = [
    "FitConfig",
    "DerivativeBundle",
    "TrpoFit",
    "kl_n",
    "m_n",
    "objective_and_gradient",
    "derivative_bundle",
    "fit_trpo",
    "maximize_smooth",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    gamma: float = 3.0
    lam: float = 0.0
    delta: float = 1.0
    max_iters: int = 500
    grad_tol: float = 1e-8
    step_init: float = 1.0
    max_step: float = 5.0

    def __post_init__(self):
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lambda must be nonnegative")
        if not self.delta > 0:
            raise ValueError("delta must be positive")


def _coef(b):
    return np.asarray(b.coefficients if isinstance(b, PolicyParams) else b, dtype=float)


def kl_n(p: MaskedPolicy, b, d: Dataset) -> float:
    """Mean over trajectories of sum_t log pi_b - log pi_{beta,b}."""
    from .value import log_ratios

    return float(-np.mean(log_ratios(p, b, d)))


def m_n(p: MaskedPolicy, b, d: Dataset, gamma: float) -> float:
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    r = is_ratios(p, b, d)
    v = value_weighted(r).v_weighted
    return v + gamma * float(np.mean(r.log_ratios))


# ---------------------------------------------------------------------------
# per-trajectory building blocks


@dataclass
class _Terms:
    log_r: np.ndarray  # (n,)
    w: np.ndarray  # ratios / max ratio
    G: np.ndarray  # returns
    g: np.ndarray  # d log r / d beta, (n, K)
    h: Optional[np.ndarray] = None  # d log r / d b, (n, K)
    Hb: Optional[np.ndarray] = None  # d2 log r / d beta2, (n, K, K)
    C: Optional[np.ndarray] = None  # d2 log r / d b d beta, rows beta, (n, K, K)


def _terms(beta, b, mask, d: Dataset, order: int = 1) -> _Terms:
    S = d.decision_states
    A = d.actions
    s_act = S * mask
    s_pin = S * (1.0 - mask)
    eta = S @ (beta * mask + b * (1.0 - mask))
    eta_b = S @ b
    lp = A * log_expit(eta) + (1.0 - A) * log_expit(-eta)
    lpb = A * log_expit(eta_b) + (1.0 - A) * log_expit(-eta_b)
    log_r = (lp - lpb).sum(axis=1)
    if not np.all(np.isfinite(log_r)):
        raise DegenerateWeightsError("non-finite log importance ratio")
    spread = log_r.max() - log_r.min()
    if spread > MAX_LOG_RATIO_SPREAD:
        raise DegenerateWeightsError(f"log importance ratios span {spread:.1f}")
    w = np.exp(log_r - log_r.max())
    pi = expit(eta)
    resid = A - pi
    g = np.einsum("nt,ntk->nk", resid, s_act)
    out = _Terms(log_r, w, d.returns, g)
    if order >= 2:
        dpi = pi * (1.0 - pi)
        out.Hb = -np.einsum("nt,ntj,ntk->njk", dpi, s_act, s_act)
        out.h = np.einsum("nt,ntk->nk", resid, s_pin) - np.einsum(
            "nt,ntk->nk", A - expit(eta_b), S
        )
        out.C = -np.einsum("nt,ntj,ntk->njk", dpi, s_act, s_pin)
    return out


def objective_and_gradient(beta, b, mask, d: Dataset, gamma: float):
    """(M_n, J_n) at ``beta`` for the masked policy."""
    tm = _terms(np.asarray(beta, float), _coef(b), np.asarray(mask, float), d, order=1)
    w, G, g = tm.w, tm.G, tm.g
    Er = w.mean()
    Ev = (w * G).mean()
    Dr = (w[:, None] * g).mean(axis=0)
    Dv = ((w * G)[:, None] * g).mean(axis=0)
    m = Ev / Er + gamma * tm.log_r.mean()
    J = Dv / Er - Ev * Dr / Er**2 + gamma * g.mean(axis=0)
    return float(m), J


@dataclass(frozen=True)
class DerivativeBundle:
    J_n: np.ndarray
    H_n: np.ndarray
    X_n: np.ndarray
    per_trajectory_z: np.ndarray
    m_n: float = float("nan")

    @property
    def n(self) -> int:
        return self.per_trajectory_z.shape[0]


def derivative_bundle(p: MaskedPolicy, b, d: Dataset, gamma: float) -> DerivativeBundle:
    """Gradient J_n, Hessian H_n and cross derivative X_n of M_n.

    X_n[j, k] = d^2 M_n / d beta_j d b_k; b enters through the IS denominator
    and, for pinned coordinates, through the suggested policy itself.
    """
    b = _coef(b)
    tm = _terms(p.beta, b, p.active_mask, d, order=2)
    w, G, g, h, Hb, C = tm.w, tm.G, tm.g, tm.h, tm.Hb, tm.C
    wG = w * G
    ggT = np.einsum("nj,nk->njk", g, g)
    ghT = np.einsum("nj,nk->njk", g, h)

    Er = w.mean()
    Ev = wG.mean()
    Dr = (w[:, None] * g).mean(axis=0)
    Dv = (wG[:, None] * g).mean(axis=0)
    D2r = (w[:, None, None] * (ggT + Hb)).mean(axis=0)
    D2v = (wG[:, None, None] * (ggT + Hb)).mean(axis=0)
    Br = (w[:, None] * h).mean(axis=0)
    Bv = (wG[:, None] * h).mean(axis=0)
    Cr = (w[:, None, None] * (ghT + C)).mean(axis=0)
    Cv = (wG[:, None, None] * (ghT + C)).mean(axis=0)

    z = (wG[:, None] * g) / Er - wG[:, None] * Dr / Er**2 + gamma * g
    J = z.mean(axis=0)
    H = (
        D2v / Er
        - np.outer(Dv, Dr) / Er**2
        - np.outer(Dr, Dv) / Er**2
        - Ev * D2r / Er**2
        + 2.0 * Ev * np.outer(Dr, Dr) / Er**3
        + gamma * Hb.mean(axis=0)
    )
    X = (
        Cv / Er
        - np.outer(Dv, Br) / Er**2
        - np.outer(Dr, Bv) / Er**2
        - Ev * Cr / Er**2
        + 2.0 * Ev * np.outer(Dr, Br) / Er**3
        + gamma * C.mean(axis=0)
    )
    H = 0.5 * (H + H.T)
    m = Ev / Er + gamma * tm.log_r.mean()
    return DerivativeBundle(J, H, X, z, float(m))


# ---------------------------------------------------------------------------
# smooth maximisation


@dataclass(frozen=True)
class MaxResult:
    x: np.ndarray
    value: float
    grad: np.ndarray
    converged: bool
    iterations: int


def _safe_eval(fg, x):
    try:
        f, g = fg(x)
    except DegenerateWeightsError:
        return -np.inf, None
    if not np.isfinite(f):
        return -np.inf, None
    return f, g


def maximize_smooth(
    fg: Callable,
    x0,
    free=None,
    max_iters: int = 500,
    grad_tol: float = 1e-8,
    max_step: float = 5.0,
) -> MaxResult:
    """BFGS ascent with Armijo backtracking over the ``free`` coordinates.

    ``fg(x)`` returns (value, gradient). Steps are capped at ``max_step`` per
    coordinate. Returns the best iterate seen.
    """
    x = np.array(x0, dtype=float)
    K = x.size
    free = np.arange(K) if free is None else np.asarray(free, dtype=int)
    if free.size == 0:
        f, g = _safe_eval(fg, x)
        return MaxResult(x, f, g, True, 0)
    f, g = _safe_eval(fg, x)
    if g is None:
        raise DegenerateWeightsError("objective undefined at the starting point")
    Hinv = np.eye(free.size)
    first = True
    best = (f, x.copy(), g.copy())
    for it in range(1, max_iters + 1):
        gf = g[free]
        if np.max(np.abs(gf)) <= grad_tol:
            return MaxResult(x, f, g, True, it - 1)
        p = Hinv @ gf
        if not np.dot(p, gf) > 0:
            Hinv = np.eye(free.size)
            p = gf.copy()
        big = np.max(np.abs(p))
        if big > max_step:
            p *= max_step / big
        slope = float(np.dot(p, gf))
        t = 1.0
        accepted = False
        for _ in range(60):
            xc = x.copy()
            xc[free] += t * p
            fc, gc = _safe_eval(fg, xc)
            if gc is not None and fc >= f + 1e-4 * t * slope:
                accepted = True
                break
            # near the optimum f is flat to roundoff; fall back on the gradient
            if (
                gc is not None
                and abs(fc - f) <= 1e-12 * (1.0 + abs(f))
                and np.max(np.abs(gc[free])) < 0.5 * np.max(np.abs(gf))
            ):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # no ascent possible at machine precision
            gmax = float(np.max(np.abs(gf)))
            return MaxResult(best[1], best[0], best[2], gmax <= max(grad_tol, 1e-6), it)
        s = t * p
        y = -(gc[free] - gf)  # curvature of -f
        sy = float(np.dot(s, y))
        if sy > 1e-14 * np.dot(s, s) ** 0.5 * np.dot(y, y) ** 0.5:
            if first:
                Hinv = np.eye(free.size) * (sy / np.dot(y, y))
                first = False
            rho = 1.0 / sy
            V = np.eye(free.size) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        x, f, g = xc, fc, gc
        if f > best[0]:
            best = (f, x.copy(), g.copy())
    gmax = float(np.max(np.abs(best[2][free])))
    return MaxResult(best[1], best[0], best[2], gmax <= grad_tol, max_iters)


@dataclass(frozen=True)
class TrpoFit:
    beta: PolicyParams
    b: PolicyParams
    mask: np.ndarray
    gamma: float
    objective: float
    converged: bool
    iterations: int

    @property
    def policy(self) -> MaskedPolicy:
        return MaskedPolicy(self.beta.coefficients, self.b.coefficients, self.mask)


def fit_trpo(
    b,
    d: Dataset,
    gamma: float,
    mask=None,
    config: Optional[FitConfig] = None,
    init=None,
    restarts: int = 0,
    seed: int = 0,
) -> TrpoFit:
    """beta_{n,gamma}: maximise M_n over the active coordinates, starting at b.

    Inactive coordinates of the returned beta equal b. ``restarts`` extra
    starts at b + N(0, 1) noise are tried and the best objective wins.
    """
    if not gamma > 0:
        raise ValueError("gamma must be > 0: with gamma = 0 the maximiser is unbounded")
    cfg = config or FitConfig(gamma=gamma)
    bvec = _coef(b)
    mask = np.ones_like(bvec) if mask is None else np.asarray(mask, dtype=float)
    free = np.flatnonzero(mask)
    x0 = bvec.copy() if init is None else np.where(mask > 0, _coef(init), bvec)

    def fg(x):
        return objective_and_gradient(x, bvec, mask, d, gamma)

    # J carries a gamma * score term, so the tolerance scales with gamma
    tol = cfg.grad_tol * max(1.0, gamma)
    res = maximize_smooth(fg, x0, free, cfg.max_iters, tol, cfg.max_step)
    if restarts > 0:
        rng = np.random.default_rng(seed)
        for _ in range(restarts):
            start = bvec.copy()
            start[free] += rng.standard_normal(free.size)
            try:
                alt = maximize_smooth(fg, start, free, cfg.max_iters, tol, cfg.max_step)
            except DegenerateWeightsError:
                continue
            if alt.value > res.value + 1e-12 and (alt.converged or not res.converged):
                res = alt
    if not res.converged:
        warnings.warn(
            f"TRPO fit did not reach gradient tolerance {tol:g} "
            f"(|J|max={np.max(np.abs(res.grad[free])):.3g}) after {res.iterations} iterations",
            RuntimeWarning,
            stacklevel=2,
        )
    beta = np.where(mask > 0, res.x, bvec)
    return TrpoFit(
        PolicyParams(beta), PolicyParams(bvec), mask, gamma, res.value, res.converged, res.iterations
    )
