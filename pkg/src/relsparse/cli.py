"""Command-line entry points.

Every command writes into ``--out`` (a directory) together with one
``manifest.json``. Outputs are staged in a scratch directory and moved into
place only after every file has been written, so a failed run leaves nothing
behind.
"""

from __future__ import annotations

import json
import logging
import shutil
import sys
import tempfile
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import click

from .behavioral import calibration_table, fit_mle, influence_q
from .errors import ConvergenceError, DataError, DegenerateWeightsError, SingularMatrixError, StageError
from .inference import post_select_fit
from .pipeline import run_pipeline
from .policy import MaskedPolicy
from .relspar import adaptive_weights, lambda_path, select_index
from .reports import (
    MANIFEST_NAME,
    RunManifest,
    write_csv,
    write_inference_csv,
    write_json,
    write_path_csv,
)
from .simulate import CoverageReport, SimConfig, coverage_study, gen_dataset
from .trajectories import CsvSchema, Dataset, load_dataset, scale_states, split_dataset, write_dataset
from .trpo_objective import fit_trpo
from .value import policy_value

log = logging.getLogger("relsparse")

HANDLED = (DataError, StageError, ConvergenceError, SingularMatrixError, DegenerateWeightsError, FileNotFoundError)


# ---------------------------------------------------------------------------
# flag parsing


def _floats(text, name):
    try:
        return tuple(float(x) for x in str(text).split(",") if x.strip() != "")
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}", param_hint=name) from None


def _gammas(ctx, param, value):
    if value is None:
        return None
    gs = _floats(value, param.opts[0])
    if not gs or any(not g > 0 for g in gs):
        raise click.BadParameter("gamma must be > 0 (the objective has no finite maximizer at 0)", ctx, param)
    return gs


def _positive(ctx, param, value):
    if value is not None and not value > 0:
        raise click.BadParameter("gamma must be > 0 (the objective has no finite maximizer at 0)", ctx, param)
    return value


def _float_list(ctx, param, value):
    return None if value is None else _floats(value, param.opts[0])


def _lambda_grid(ctx, param, value):
    if value is None or value == "auto":
        return None
    lams = sorted(_floats(value, param.opts[0]))
    if not lams or any(x < 0 for x in lams):
        raise click.BadParameter("lambda values must be >= 0", ctx, param)
    return tuple(lams)


def _active(ctx, param, value):
    if value is None:
        return None
    try:
        idx = tuple(sorted({int(x) for x in str(value).split(",") if x.strip()}))
    except ValueError:
        raise click.BadParameter(f"expected 1-based covariate indices, got {value!r}", ctx, param) from None
    if any(k < 1 for k in idx):
        raise click.BadParameter("covariate indices are 1-based", ctx, param)
    return tuple(k - 1 for k in idx)


def _load_config(ctx, param, value):
    # JSON keys mirror flag names (dashes or underscores)
    if value is None:
        return None
    try:
        cfg = json.loads(Path(value).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise click.BadParameter(f"cannot read config: {exc}", ctx, param) from None
    if not isinstance(cfg, dict):
        raise click.BadParameter("config must be a JSON object", ctx, param)
    dm = {}
    for k, v in cfg.items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        dm[k.replace("-", "_").lstrip("_")] = v
    ctx.default_map = {**(ctx.default_map or {}), **dm}
    return value


def config_option(f):
    return click.option(
        "--config",
        type=click.Path(dir_okay=False),
        callback=_load_config,
        is_eager=True,
        expose_value=False,
        help="JSON file whose keys mirror the flags.",
    )(f)


def input_options(f):
    f = click.option("--scale/--no-scale", default=False, help="Standardize states by pooled sd.")(f)
    f = click.option(
        "--reward-rule",
        default="column",
        show_default=True,
        help="'column' or next_state_component(j) / neg_current_component_times_action(j).",
    )(f)
    f = click.option("--state-cols", default=None, help="Comma-separated state columns (default: every s<k> column).")(f)
    f = click.option("--input", "input_path", required=True, type=click.Path(dir_okay=False), help="Trajectory CSV.")(f)
    return f


def out_option(f):
    return click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")(f)


# ---------------------------------------------------------------------------
# output staging


class Outputs:
    def __init__(self, scratch: Path):
        self.scratch = scratch
        self.files: list[str] = []

    def path(self, rel: str) -> Path:
        p = self.scratch / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(rel)
        return p


@contextmanager
def staged(out, command: str, flags: dict, seed=None, inputs=()):
    out = Path(out)
    start = time.perf_counter()
    scratch = Path(tempfile.mkdtemp(prefix=".staging-", dir=out.parent if out.parent.exists() else None))
    try:
        o = Outputs(scratch)
        yield o
        RunManifest(
            command=command,
            flags={k: (list(v) if isinstance(v, tuple) else v) for k, v in flags.items()},
            seed=seed,
            inputs=[str(Path(p)) for p in inputs],
            outputs=o.files,
            wall_time_s=time.perf_counter() - start,
        ).write(scratch)
        out.mkdir(parents=True, exist_ok=True)
        for rel in [*o.files, MANIFEST_NAME]:
            dest = out / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.move(str(scratch / rel), str(dest))
    finally:
        shutil.rmtree(scratch, ignore_errors=True)


def _read(input_path, reward_rule, scale, state_cols=None) -> Dataset:
    cols = tuple(c.strip() for c in state_cols.split(",")) if state_cols else None
    d = load_dataset(input_path, CsvSchema(state_cols=cols, reward_rule=reward_rule))
    return scale_states(d) if scale else d


def _names(state_cols, K):
    return [c.strip() for c in state_cols.split(",")] if state_cols else [f"s{k + 1}" for k in range(K)]


def _run(fn):
    """Turn library errors into a clean message and exit code 1."""
    try:
        return fn()
    except HANDLED as exc:
        raise click.ClickException(str(exc)) from None
    except ValueError as exc:
        raise click.ClickException(str(exc)) from None


def _gkey(x: float) -> str:
    return f"{x:g}"


# ---------------------------------------------------------------------------
# commands


@click.group()
@click.version_option(package_name="relsparse")
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def main(verbose):
    """Relatively sparse, behavior-constrained policy estimation."""
    logging.basicConfig(
        level=logging.WARNING - 10 * min(verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


@main.command()
@config_option
@click.option("--n", type=click.IntRange(min=1), default=1000, show_default=True)
@click.option("--T", "T", type=click.IntRange(min=0), default=2, show_default=True)
@click.option("--K", "K", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--b0", callback=_float_list, default="-0.3,0.2", show_default=True)
@click.option("--tau", callback=_float_list, default=None, help="Default 0.1 per covariate.")
@click.option("--sigma", callback=_float_list, default=None, help="Noise sd per covariate (default 1).")
@click.option("--mu0", callback=_float_list, default=None, help="Initial means (default 1).")
@click.option("--eps-mean", type=float, default=0.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@out_option
@click.pass_context
def simulate(ctx, n, T, K, b0, tau, sigma, mu0, eps_mean, seed, out):
    """Generate simulated trajectories in the load_dataset CSV layout."""
    if K < 2:
        raise click.BadParameter(
            f"the simulation reward -s[t,2]*a[t] reads state component 2, so K must be >= 2 (got {K})",
            param_hint="--K",
        )
    if len(b0) != K:
        raise click.BadParameter(f"--b0 has {len(b0)} values but --K is {K}", param_hint="--b0")

    def go():
        cfg = SimConfig(n=n, T=T, K=K, b_0=b0, tau=tau, sigma_eps=sigma, mu_0=mu0, seed=seed, eps_mean=eps_mean)
        d = gen_dataset(cfg)
        with staged(out, "simulate", ctx.params, seed) as o:
            write_dataset(d, o.path("trajectories.csv"))

    _run(go)


@main.command("fit-behavioral")
@config_option
@input_options
@click.option("--level", type=click.FloatRange(0, 1, min_open=True, max_open=True), default=0.95)
@click.option("--bins", type=click.IntRange(min=2), default=10, show_default=True)
@out_option
@click.pass_context
def fit_behavioral(ctx, input_path, state_cols, reward_rule, scale, level, bins, out):
    """Logistic MLE of the behavioral policy plus a calibration table."""

    def go():
        d = _read(input_path, reward_rule, scale, state_cols)
        fit = fit_mle(d)
        lo, hi = fit.wald_intervals(level)
        with staged(out, "fit-behavioral", ctx.params, None, [input_path]) as o:
            write_json(o.path("behavioral.json"), {**fit.to_dict(), "ci_lower": lo, "ci_upper": hi, "level": level})
            write_csv(
                o.path("calibration.csv"),
                [asdict(c) for c in calibration_table(fit, d, bins)],
            )

    _run(go)


def _split_parts(d, seed):
    split = split_dataset(d, seed)
    return split, d.subset(split.split1_train), d.subset(split.split1_test)


@main.command()
@config_option
@input_options
@click.option("--gammas", callback=_gammas, default="3", show_default=True)
@click.option("--deltas", callback=_float_list, default="1", show_default=True)
@click.option("--lambda-grid", callback=_lambda_grid, default="auto", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True)
@out_option
@click.pass_context
def path(ctx, input_path, state_cols, reward_rule, scale, gammas, deltas, lambda_grid, seed, threads, out):
    """Selection diagrams (lambda paths) on split 1 for each (gamma, delta)."""

    def go():
        d = _read(input_path, reward_rule, scale, state_cols)
        split, tr, te = _split_parts(d, seed)
        bfit = fit_mle(tr)
        b, q = bfit.b_n, influence_q(bfit)
        v_beh = policy_value(MaskedPolicy.full(b), b, tr)

        def one(g):
            pilot = fit_trpo(b, tr, g).beta
            res = {}
            for dl in deltas:
                w = adaptive_weights(pilot, b, dl)
                res[(g, dl)] = lambda_path(b, tr, te, g, dl, lambda_grid, pilot=pilot, weights=w, q_train=q)
            return res

        parts = _map(one, gammas, threads)
        with staged(out, "path", ctx.params, seed, [input_path]) as o:
            for part in parts:
                for (g, dl), pts in part.items():
                    write_path_csv(o.path(f"diagrams/{_gkey(g)}_{_gkey(dl)}.csv"), pts)
            write_json(o.path("split.json"), split.to_dict())
            write_json(o.path("behavioral.json"), {**bfit.to_dict(), "value_train": v_beh.to_dict()})

    _run(go)


def _map(fn, items, threads):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


@main.command("select-lambda")
@config_option
@click.option(
    "--diagrams",
    "diagrams_dir",
    required=True,
    type=click.Path(file_okay=False),
    help="Output directory of the path command.",
)
@click.option("--use-sd/--use-se", default=False, help="Threshold spread: sd of sqrt(n) V or its standard error.")
@out_option
@click.pass_context
def select_lambda_cmd(ctx, diagrams_dir, use_sd, out):
    """Apply the value-threshold rule to every diagram produced by `path`."""

    def go():
        root = Path(diagrams_dir)
        beh_file = root / "behavioral.json"
        if not beh_file.exists():
            raise FileNotFoundError(f"no such file: {beh_file}")
        v = json.loads(beh_file.read_text(encoding="utf-8"))["value_train"]
        spread = v["sd_weighted"] if use_sd else v["se_weighted"]
        v_min = v["v_weighted"] + spread
        files = sorted((root / "diagrams").glob("*.csv"))
        if not files:
            raise FileNotFoundError(f"no diagrams under {root / 'diagrams'}")
        result = {"v_min": v_min, "rule": "sd" if use_sd else "se", "cells": []}
        for f in files:
            rows = _read_rows(f)
            lams = [float(r["lambda"]) for r in rows]
            vals = [float(r["v_train"]) for r in rows]
            i, ok = select_index(lams, vals, v_min)
            flags = [int(x) for x in rows[i]["active_flags"].split(";") if x != ""]
            g, dl = f.stem.split("_")
            result["cells"].append(
                {
                    "gamma": float(g),
                    "delta": float(dl),
                    "lambda": lams[i],
                    "v_train": vals[i],
                    "active": [k + 1 for k, fl in enumerate(flags) if fl],
                    "flag": "ok" if ok else "no-qualifying-lambda",
                }
            )
        with staged(out, "select-lambda", ctx.params, None, [str(p) for p in files]) as o:
            write_json(o.path("selection.json"), result)

    _run(go)


def _read_rows(path):
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path}: empty diagram")
    return rows


@main.command()
@config_option
@input_options
@click.option("--gammas", callback=_gammas, default="1,3,6", show_default=True)
@click.option("--deltas", callback=_float_list, default="0.5,1,2", show_default=True)
@click.option("--gamma", type=float, callback=_positive, default=None, help="Fix gamma instead of searching.")
@click.option("--delta", type=float, default=None, help="Fix delta instead of searching.")
@click.option("--post-gamma", type=float, callback=_positive, default=None, help="Gamma for split-2 refit.")
@click.option("--lambda-grid", callback=_lambda_grid, default="auto", show_default=True)
@click.option("--band-threshold", type=float, default=0.5, show_default=True)
@click.option("--use-sd/--use-se", default=False)
@click.option("--level", type=click.FloatRange(0, 1, min_open=True, max_open=True), default=0.95)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True)
@out_option
@click.pass_context
def pipeline(
    ctx, input_path, state_cols, reward_rule, scale, gammas, deltas, gamma, delta, post_gamma,
    lambda_grid, band_threshold, use_sd, level, seed, threads, out,
):
    """Split, select on split 1, refit with confidence intervals on split 2."""

    def go():
        d = _read(input_path, reward_rule, scale, state_cols)
        rep = run_pipeline(
            d,
            gammas=gammas,
            deltas=deltas,
            lambdas=lambda_grid,
            seed=seed,
            gamma=gamma,
            delta=delta,
            band_threshold=band_threshold,
            post_gamma=post_gamma,
            level=level,
            use_sd_rule=use_sd,
            threads=threads,
        )
        with staged(out, "pipeline", ctx.params, seed, [input_path]) as o:
            for (g, dl), cell in rep.cells.items():
                write_path_csv(o.path(f"diagrams/{_gkey(g)}_{_gkey(dl)}.csv"), cell.path)
            write_json(o.path("selection.json"), rep.to_dict())
            write_inference_csv(o.path("inference.csv"), rep.inference, _names(state_cols, d.K))
        if rep.selection_flag != "ok":
            click.echo("warning: no lambda met the value threshold; smallest lambda used", err=True)

    _run(go)


@main.command()
@config_option
@input_options
@click.option("--active", callback=_active, required=True, help="1-based covariates left free, e.g. 2 or 1,3.")
@click.option("--gamma", type=float, callback=_positive, default=3.0, show_default=True)
@click.option("--level", type=click.FloatRange(0, 1, min_open=True, max_open=True), default=0.95)
@out_option
@click.pass_context
def infer(ctx, input_path, state_cols, reward_rule, scale, active, gamma, level, out):
    """Masked refit with sandwich intervals on the whole input (treated as split 2)."""

    def go():
        d = _read(input_path, reward_rule, scale, state_cols)
        if any(k >= d.K for k in active):
            raise DataError(f"--active index exceeds K={d.K}")
        res = post_select_fit(d, active, gamma, level)
        with staged(out, "infer", ctx.params, None, [input_path]) as o:
            write_inference_csv(o.path("inference.csv"), res, _names(state_cols, d.K))
            write_json(o.path("inference.json"), res.to_dict())

    _run(go)


@main.command()
@config_option
@click.option("--gammas", callback=_gammas, default="0.01,3,6", show_default=True)
@click.option("--replications", type=click.IntRange(min=2), default=500, show_default=True)
@click.option("--n", type=click.IntRange(min=2), default=500, show_default=True)
@click.option("--T", "T", type=click.IntRange(min=0), default=2, show_default=True)
@click.option("--K", "K", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--b0", callback=_float_list, default="-0.3,0.2", show_default=True)
@click.option("--tau", callback=_float_list, default=None)
@click.option("--eps-mean", type=float, default=0.0, show_default=True)
@click.option("--active", callback=_active, default="2", show_default=True)
@click.option("--level", type=click.FloatRange(0, 1, min_open=True, max_open=True), default=0.95)
@click.option("--n-ref", type=click.IntRange(min=100), default=100_000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True)
@out_option
@click.pass_context
def coverage(ctx, gammas, replications, n, T, K, b0, tau, eps_mean, active, level, n_ref, seed, threads, out):
    """Monte-Carlo coverage of post-selection intervals, one row per gamma."""
    if len(b0) != K:
        raise click.BadParameter(f"--b0 has {len(b0)} values but --K is {K}", param_hint="--b0")
    if replications < 20:
        click.echo(f"warning: {replications} replications give unstable coverage estimates", err=True)

    def go():
        cfg = SimConfig(n=n, T=T, K=K, b_0=b0, tau=tau, seed=seed, eps_mean=eps_mean)
        if any(k >= K for k in active):
            raise DataError(f"--active index exceeds K={K}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            reports = _map(
                lambda g: coverage_study(cfg, g, active, replications, level, n_ref=n_ref), gammas, threads
            )
        with staged(out, "coverage", ctx.params, seed) as o:
            write_csv(o.path("coverage.csv"), [r.row() for r in reports], CoverageReport.FIELDS)

    _run(go)


if __name__ == "__main__":  # pragma: no cover
    main()
