"""End-to-end sample-splitting pipeline: select on split 1, infer on split 2."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .behavioral import fit_mle, influence_q
from .errors import StageError
from .inference import InferenceResult, post_select_fit
from .policy import MaskedPolicy
from .relspar import PathPoint, Selection, adaptive_weights, lambda_path, select_lambda
from .trajectories import Dataset, SplitSpec, split_dataset
from .trpo_objective import FitConfig, fit_trpo
from .value import ValueEstimate, policy_value

__all__ = ["CellResult", "PipelineReport", "run_pipeline", "choose_cell"]

log = logging.getLogger(__name__)

DEFAULT_GAMMAS = (1.0, 3.0, 6.0)
DEFAULT_DELTAS = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class CellResult:
    gamma: float
    delta: float
    pilot: np.ndarray
    weights: np.ndarray
    path: list
    selection: Selection

    @property
    def band_score(self) -> float:
        """Largest sandwich sd band along the path (inf if any is undefined)."""
        bands = np.array([p.sd_band for p in self.path])
        if bands.size == 0 or not np.all(np.isfinite(bands)):
            return math.inf
        return float(bands.max())

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "delta": self.delta,
            "pilot": self.pilot.tolist(),
            "weights": [None if not np.isfinite(w) else float(w) for w in self.weights],
            "band_score": None if math.isinf(self.band_score) else self.band_score,
            "selected_lambda": self.selection.point.lam,
            "selected_active": [k + 1 for k in self.selection.point.active_set],
            "selection_flag": self.selection.flag,
            "v_min": self.selection.v_min,
        }


@dataclass(frozen=True)
class PipelineReport:
    split: SplitSpec
    gamma: float
    delta: float
    lam: float
    post_gamma: float
    selection_mode: str
    cells: dict
    behavioral_train: dict
    v_behavioral: ValueEstimate
    selected_active: tuple
    selection_flag: str
    inference: InferenceResult
    stage_indices: dict = field(default_factory=dict)

    def __post_init__(self):
        sel = set(self.stage_indices.get("selection", ()))
        inf = set(self.stage_indices.get("inference", ()))
        if sel & inf:
            raise AssertionError("selection and inference stages share trajectories")
        if sel and sel != set(self.split.split1_train) | set(self.split.split1_test):
            raise AssertionError("selection stage used indices outside split 1")
        if inf and inf != set(self.split.split2):
            raise AssertionError("inference stage used indices outside split 2")

    def to_dict(self) -> dict:
        return {
            "split": self.split.to_dict(),
            "chosen": {
                "gamma": self.gamma,
                "delta": self.delta,
                "lambda": self.lam,
                "post_selection_gamma": self.post_gamma,
                "mode": self.selection_mode,
            },
            "selected_active": [k + 1 for k in self.selected_active],
            "selection_flag": self.selection_flag,
            "behavioral_train": self.behavioral_train,
            "v_behavioral_train": self.v_behavioral.to_dict(),
            "cells": [c.to_dict() for c in self.cells.values()],
            "inference": self.inference.to_dict(),
            "stage_indices": {k: list(v) for k, v in self.stage_indices.items()},
        }


def choose_cell(cells: dict, threshold: float, gamma=None, delta=None) -> tuple:
    """Pick (gamma, delta): fixed if both are given, else the smallest gamma
    whose sd bands stay below ``threshold`` (ties broken by smaller band score).
    """
    keys = list(cells)
    if gamma is not None and delta is not None:
        return (float(gamma), float(delta)), "fixed"
    if gamma is not None:
        keys = [k for k in keys if k[0] == float(gamma)]
    if delta is not None:
        keys = [k for k in keys if k[1] == float(delta)]
    ok = [k for k in keys if cells[k].band_score <= threshold]
    if ok:
        return min(ok, key=lambda k: (k[0], cells[k].band_score, k[1])), "auto"
    return min(keys, key=lambda k: (cells[k].band_score, k[0], k[1])), "auto-fallback"


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, exc) from exc


def run_pipeline(
    d: Dataset,
    gammas: Sequence[float] = DEFAULT_GAMMAS,
    deltas: Sequence[float] = DEFAULT_DELTAS,
    lambdas: Optional[Sequence[float]] = None,
    seed: int = 0,
    fractions=(0.25, 0.25, 0.5),
    gamma: Optional[float] = None,
    delta: Optional[float] = None,
    band_threshold: float = 0.5,
    post_gamma: Optional[float] = None,
    level: float = 0.95,
    use_sd_rule: bool = False,
    config: Optional[FitConfig] = None,
    threads: int = 1,
) -> PipelineReport:
    """Split, select (gamma, delta, lambda) on split 1, then infer on split 2.

    A fixed ``gamma``/``delta`` restricts the grid to that value.
    """
    gammas = [float(gamma)] if gamma is not None else [float(g) for g in gammas]
    deltas = [float(delta)] if delta is not None else [float(x) for x in deltas]
    if any(not g > 0 for g in gammas):
        raise ValueError("every gamma must be > 0")
    split = _stage("split", split_dataset, d, seed, fractions)
    tr = d.subset(split.split1_train)
    te = d.subset(split.split1_test)
    s2 = d.subset(split.split2)

    bfit = _stage("behavioral", fit_mle, tr)
    b = bfit.b_n
    q = influence_q(bfit)
    v_beh = _stage("behavioral-value", policy_value, MaskedPolicy.full(b), b, tr)

    def gamma_cells(g):
        pilot = _stage(f"pilot(gamma={g:g})", fit_trpo, b, tr, g, config=config).beta
        out = {}
        for dl in deltas:
            w = adaptive_weights(pilot, b, dl)
            path = _stage(
                f"path(gamma={g:g},delta={dl:g})",
                lambda_path, b, tr, te, g, dl, lambdas, pilot=pilot, weights=w, q_train=q, config=config,
            )
            sel = select_lambda(path, v_beh, use_sd=use_sd_rule)
            out[(g, dl)] = CellResult(g, dl, pilot.coefficients, w.w, path, sel)
        return out

    # cells are independent; results are merged in grid order either way
    if threads > 1 and len(gammas) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(gamma_cells, gammas))
    else:
        parts = [gamma_cells(g) for g in gammas]
    cells = {k: v for part in parts for k, v in part.items()}

    (g_star, d_star), mode = choose_cell(cells, band_threshold, gamma, delta)
    chosen = cells[(g_star, d_star)]
    active = chosen.selection.point.active_set
    g_post = float(post_gamma) if post_gamma is not None else g_star
    inf = _stage("inference", post_select_fit, s2, active, g_post, level, config)
    inf = InferenceResult(
        inf.beta, inf.mask, inf.variance, inf.ci_lower, inf.ci_upper, inf.behavioral,
        inf.gamma, inf.n_inference, inf.level, chosen.selection.point.lam, d_star,
        inf.converged, inf.value, tuple(split.split2),
    )
    return PipelineReport(
        split=split,
        gamma=g_star,
        delta=d_star,
        lam=chosen.selection.point.lam,
        post_gamma=g_post,
        selection_mode=mode,
        cells=cells,
        behavioral_train=bfit.to_dict(),
        v_behavioral=v_beh,
        selected_active=active,
        selection_flag=chosen.selection.flag,
        inference=inf,
        stage_indices={
            "selection": tuple(sorted(split.split1_train + split.split1_test)),
            "inference": tuple(split.split2),
        },
    )
