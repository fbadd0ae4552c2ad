"""Constant-variance MDP simulator, reference estimand, Monte-Carlo studies."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .behavioral import fit_mle
from .errors import DataError
from .policy import MaskedPolicy, mask_from_indices
from .trajectories import Dataset
from .trpo_objective import FitConfig, maximize_smooth

__all__ = [
    "SimConfig",
    "CoverageReport",
    "gen_dataset",
    "mu_path",
    "replication_seed",
    "reference_estimand",
    "coverage_study",
    "selection_study",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    """Simulation design.

    States follow S_{t,k} = (S_{t-1,k} - mu_{t-1,k} + eps_k) / sqrt(1 + sigma_k^2) + mu_{t,k}
    with eps_k ~ N(eps_mean, sigma_k^2) and mu_{t+1} = mu_t (1 + tau A_t).
    ``eps_mean=0`` reproduces the reported reference coefficients; set it to 1
    for the shifted-noise variant.
    """

    n: int = 1000
    T: int = 2
    K: int = 2
    b_0: tuple = (-0.3, 0.2)
    tau: Optional[tuple] = None
    sigma_eps: Optional[tuple] = None
    mu_0: Optional[tuple] = None
    seed: int = 0
    reward_component: int = 2
    eps_mean: float = 0.0

    def __post_init__(self):
        K = self.K
        object.__setattr__(self, "b_0", tuple(float(x) for x in self.b_0))
        object.__setattr__(self, "tau", tuple(self.tau) if self.tau is not None else (0.1,) * K)
        object.__setattr__(
            self, "sigma_eps", tuple(self.sigma_eps) if self.sigma_eps is not None else (1.0,) * K
        )
        object.__setattr__(self, "mu_0", tuple(self.mu_0) if self.mu_0 is not None else (1.0,) * K)
        for name in ("b_0", "tau", "sigma_eps", "mu_0"):
            if len(getattr(self, name)) != K:
                raise ValueError(f"{name} must have length K={K}")
        if any(s <= 0 for s in self.sigma_eps):
            raise ValueError("sigma_eps must be positive")
        if self.n < 1 or self.T < 0:
            raise ValueError("need n >= 1 and T >= 0")
        if not 1 <= self.reward_component <= K:
            raise DataError(
                f"the simulation reward -s[t,{self.reward_component}]*a[t] needs "
                f"K >= {self.reward_component}, got K={K}"
            )


def mu_path(mu_0, tau, actions) -> np.ndarray:
    """Mean path mu_{t+1} = mu_t * (1 + tau * A_t); rows t = 0..len(actions)."""
    mu = [np.asarray(mu_0, dtype=float)]
    for a in actions:
        mu.append(mu[-1] * (1.0 + np.asarray(tau, dtype=float) * a))
    return np.array(mu)


def replication_seed(master: int, index: int) -> np.random.SeedSequence:
    """Independent per-replication stream keyed by (master seed, index)."""
    return np.random.SeedSequence([int(master) & 0xFFFFFFFF, int(index)])


def gen_dataset(cfg: SimConfig, rng: Optional[np.random.Generator] = None) -> Dataset:
    rng = rng or np.random.default_rng(cfg.seed)
    n, T, K = cfg.n, cfg.T, cfg.K
    b0 = np.asarray(cfg.b_0)
    tau = np.asarray(cfg.tau)
    sig = np.asarray(cfg.sigma_eps)
    S = np.empty((n, T + 2, K))
    A = np.empty((n, T + 1))
    mu = np.tile(np.asarray(cfg.mu_0, dtype=float), (n, 1))
    S[:, 0] = rng.standard_normal((n, K))
    for t in range(T + 1):
        A[:, t] = rng.random(n) < expit(S[:, t] @ b0)
        mu_next = mu * (1.0 + tau * A[:, t : t + 1])
        eps = cfg.eps_mean + sig * rng.standard_normal((n, K))
        S[:, t + 1] = (S[:, t] - mu + eps) / np.sqrt(1.0 + sig**2) + mu_next
        mu = mu_next
    j = cfg.reward_component - 1
    R = -S[:, : T + 1, j] * A
    return Dataset(S, A, R, seed_tag=f"sim:seed={cfg.seed}")


def reference_estimand(
    cfg: SimConfig,
    gamma: float,
    n_ref: int = 100_000,
    mask=None,
    rng: Optional[np.random.Generator] = None,
    config: Optional[FitConfig] = None,
):
    """Behavior-constrained optimum computed without importance sampling.

    Maximises -(1/n) sum_i sum_t S_{it,j} expit(beta . S_it) - gamma KL_n(beta, b_n)
    on a fresh dataset of ``n_ref`` trajectories, where j is the reward
    component and b_n is the behavioral MLE on that dataset.
    """
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    cfg_ref = replace(cfg, n=n_ref)
    d = gen_dataset(cfg_ref, rng or np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919])))
    b = fit_mle(d).b_n
    K = cfg.K
    mask = np.ones(K) if mask is None else np.asarray(mask, dtype=float)
    S = d.decision_states
    A = d.actions
    j = cfg.reward_component - 1
    s_act = S * mask
    s_pin_b = (S * (1.0 - mask)) @ b
    eta_b = S @ b

    def fg(beta):
        eta = s_act @ beta + s_pin_b
        pi = expit(eta)
        v = -np.mean(np.sum(S[:, :, j] * pi, axis=1))
        dv = -np.einsum("nt,ntk->k", S[:, :, j] * pi * (1.0 - pi), s_act) / d.n
        # KL_n = mean sum_t [log pi_b - log pi_beta]; only the second term moves
        lp = A * -np.logaddexp(0.0, -eta) + (1.0 - A) * -np.logaddexp(0.0, eta)
        lpb = A * -np.logaddexp(0.0, -eta_b) + (1.0 - A) * -np.logaddexp(0.0, eta_b)
        kl = np.mean(np.sum(lpb - lp, axis=1))
        dkl = -np.einsum("nt,ntk->k", A - pi, s_act) / d.n
        return v - gamma * kl, dv - gamma * dkl

    cfg_fit = config or FitConfig(gamma=gamma)
    res = maximize_smooth(fg, b.copy(), np.flatnonzero(mask), cfg_fit.max_iters, cfg_fit.grad_tol, cfg_fit.max_step)
    return np.where(mask > 0, res.x, b)


# ---------------------------------------------------------------------------
# Monte-Carlo studies


@dataclass(frozen=True)
class CoverageReport:
    gamma: float
    true_beta: float
    mean_estimate: float
    bias: float
    true_sd: float
    mean_estimated_sd: float
    coverage: float
    mean_ci_length: float
    replications: int
    failures: int = 0
    coordinate: int = 1
    n: int = 0
    level: float = 0.95

    # Table layout: one row per gamma
    FIELDS = (
        "gamma",
        "true_beta",
        "mean_estimate",
        "bias",
        "true_sd",
        "mean_estimated_sd",
        "coverage",
        "mean_ci_length",
        "replications",
        "failures",
        "coordinate",
        "n",
        "level",
    )

    def row(self) -> dict:
        out = {f: getattr(self, f) for f in self.FIELDS}
        out["coordinate"] = self.coordinate + 1
        return out


def coverage_study(
    cfg: SimConfig,
    gamma: float,
    active=(1,),
    replications: int = 500,
    level: float = 0.95,
    n_ref: int = 100_000,
    coordinate: Optional[int] = None,
    true_beta: Optional[float] = None,
) -> CoverageReport:
    """Coverage of the post-selection sandwich interval for one coefficient.

    Each replication draws a fresh dataset of ``cfg.n`` trajectories, refits
    on the fixed ``active`` set (zero-based) and checks whether the interval
    covers the reference estimand. ``true_sd`` is the Monte-Carlo sd of
    sqrt(n) * beta_hat; ``mean_estimated_sd`` is sqrt of the mean sandwich
    variance. Both are on the sqrt(n) scale; the interval half-width divides
    by sqrt(n).
    """
    from .inference import post_select_fit

    if replications < 2:
        raise ValueError("replications must be >= 2")
    active = tuple(sorted(int(k) for k in active))
    if not active:
        raise ValueError("coverage needs a nonempty active set")
    coord = active[0] if coordinate is None else int(coordinate)
    mask = mask_from_indices(active, cfg.K)
    if true_beta is None:
        true_beta = float(reference_estimand(cfg, gamma, n_ref=n_ref, mask=mask)[coord])
    est, var, hits, lengths = [], [], [], []
    failures = 0
    for m in range(replications):
        rng = np.random.default_rng(replication_seed(cfg.seed, m))
        d = gen_dataset(cfg, rng)
        try:
            res = post_select_fit(d, active, gamma, level)
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            log.warning("replication %d failed: %s", m, exc)
            failures += 1
            continue
        est.append(res.beta.coefficients[coord])
        var.append(res.variance[coord, coord])
        lo, hi = res.ci_lower[coord], res.ci_upper[coord]
        hits.append(lo <= true_beta <= hi)
        lengths.append(hi - lo)
    if len(est) < 2:
        raise RuntimeError(f"only {len(est)} of {replications} replications succeeded")
    est = np.asarray(est)
    rn = np.sqrt(cfg.n)
    mean_est = float(est.mean())
    return CoverageReport(
        gamma=float(gamma),
        true_beta=true_beta,
        mean_estimate=mean_est,
        bias=mean_est - true_beta,
        true_sd=float(np.std(rn * est, ddof=1)),
        mean_estimated_sd=float(np.sqrt(np.mean(var))),
        coverage=float(np.mean(hits)),
        mean_ci_length=float(np.mean(lengths)),
        replications=len(est),
        failures=failures,
        coordinate=coord,
        n=cfg.n,
        level=level,
    )


def selection_study(
    cfg: SimConfig,
    gammas: Sequence[float] = (3.0,),
    deltas: Sequence[float] = (1.0,),
    replications: int = 100,
    lambdas: Optional[Sequence[float]] = None,
    fractions=(0.25, 0.25, 0.5),
    bands: bool = True,
) -> dict:
    """Monte-Carlo averaged selection diagrams, one table per (gamma, delta).

    Each replication runs the split-1 selection stage. The lambda grid of a
    cell is ``lambdas`` if given, otherwise the default grid of the first
    replication, reused for every replication so rows can be averaged.
    Returns ``{(gamma, delta): {"rows": [...], "selected": {...}, ...}}``.
    """
    from .behavioral import influence_q
    from .relspar import adaptive_weights, default_lambda_grid, lambda_path, select_lambda
    from .trajectories import split_dataset
    from .trpo_objective import fit_trpo
    from .value import policy_value

    if replications < 1:
        raise ValueError("replications must be >= 1")
    cells = {(float(g), float(dl)): {"paths": [], "selected": [], "flags": [], "failures": 0, "grid": None}
             for g in gammas for dl in deltas}
    for m in range(replications):
        rng = np.random.default_rng(replication_seed(cfg.seed, m))
        d = gen_dataset(cfg, rng)
        split = split_dataset(d, seed=int(rng.integers(2**31)), fractions=fractions)
        tr = d.subset(split.split1_train)
        te = d.subset(split.split1_test)
        try:
            bfit = fit_mle(tr)
        except (ArithmeticError, RuntimeError) as exc:
            log.warning("replication %d: behavioral fit failed: %s", m, exc)
            for c in cells.values():
                c["failures"] += 1
            continue
        b = bfit.b_n
        q = influence_q(bfit) if bands else None
        v_beh = policy_value(MaskedPolicy.full(b), b, tr)
        for g in gammas:
            try:
                pilot = fit_trpo(b, tr, g).beta
            except (ArithmeticError, ValueError, RuntimeError) as exc:
                log.warning("replication %d: pilot fit failed at gamma=%g: %s", m, g, exc)
                for dl in deltas:
                    cells[(float(g), float(dl))]["failures"] += 1
                continue
            for dl in deltas:
                cell = cells[(float(g), float(dl))]
                w = adaptive_weights(pilot, b, dl)
                if cell["grid"] is None:
                    cell["grid"] = (np.asarray(lambdas, float) if lambdas is not None
                                    else default_lambda_grid(b, tr, g, w))
                try:
                    path = lambda_path(b, tr, te, g, dl, cell["grid"], pilot=pilot, weights=w,
                                       q_train=q, bands=bands)
                except (ArithmeticError, ValueError, RuntimeError) as exc:
                    log.warning("replication %d: path failed at (%g, %g): %s", m, g, dl, exc)
                    cell["failures"] += 1
                    continue
                sel = select_lambda(path, v_beh)
                cell["paths"].append(path)
                cell["selected"].append(sel.point.active_set)
                cell["flags"].append(sel.qualified)
    return {key: _aggregate_cell(cfg.K, c) for key, c in cells.items()}


def _aggregate_cell(K: int, cell: dict) -> dict:
    paths = cell["paths"]
    rows = []
    if paths:
        for j, lam in enumerate(cell["grid"]):
            pts = [p[j] for p in paths]
            beta = np.array([p.beta.coefficients for p in pts])
            b = np.array([p.b.coefficients for p in pts])
            band = np.array([p.sd_band for p in pts])
            row = {"lambda": float(lam)}
            for k in range(K):
                row[f"beta_{k + 1}"] = float(beta[:, k].mean())
            for k in range(K):
                row[f"b_{k + 1}"] = float(b[:, k].mean())
            for k in range(K):
                col = band[:, k]
                row[f"sd_band_{k + 1}"] = float(np.nanmean(col)) if np.isfinite(col).any() else float("nan")
            for k in range(K):
                row[f"empirical_sd_{k + 1}"] = float(beta[:, k].std(ddof=1)) if len(pts) > 1 else float("nan")
            vtr = np.array([p.value_train.v_weighted for p in pts])
            row["v_train"] = float(vtr.mean())
            row["v_train_se"] = float(np.mean([p.value_train.se_weighted for p in pts]))
            row["v_train_empirical_sd"] = float(vtr.std(ddof=1)) if len(pts) > 1 else float("nan")
            row["v_test"] = float(np.mean([p.value_test.v_weighted for p in pts]))
            row["kl"] = float(np.mean([p.kl for p in pts]))
            row["prob_sugg"] = float(np.mean([p.prob_sugg for p in pts]))
            row["prob_beh"] = float(np.mean([p.prob_beh for p in pts]))
            for k in range(K):
                row[f"active_{k + 1}"] = float(np.mean([k in p.active_set for p in pts]))
            rows.append(row)
    counts: dict = {}
    for s in cell["selected"]:
        key = ",".join(str(k + 1) for k in s) or "none"
        counts[key] = counts.get(key, 0) + 1
    total = max(len(cell["selected"]), 1)
    return {
        "rows": rows,
        "selected_counts": counts,
        "selected_frequency": {k: v / total for k, v in counts.items()},
        "qualified_fraction": float(np.mean(cell["flags"])) if cell["flags"] else float("nan"),
        "replications": len(paths),
        "failures": cell["failures"],
        "selected_sets": cell["selected"],
    }
