"""CSV / JSON writers for paths, inference tables, coverage rows and manifests.

CSVs are comma-separated, UTF-8, LF line endings, with a header row. Missing
values are written as empty cells.
"""

from __future__ import annotations

import csv
import json
import math
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__

__all__ = [
    "fmt",
    "write_csv",
    "path_columns",
    "path_rows",
    "write_path_csv",
    "write_inference_csv",
    "write_json",
    "RunManifest",
    "MANIFEST_NAME",
]

MANIFEST_NAME = "manifest.json"


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return "" if math.isnan(x) else repr(x)
    return str(x)


def write_csv(path, rows: Sequence[dict], columns: Sequence[str] = None) -> None:
    path = Path(path)
    columns = list(columns) if columns is not None else (list(rows[0]) if rows else [])
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])


def path_columns(K: int) -> list[str]:
    return (
        ["lambda"]
        + [f"beta_{k + 1}" for k in range(K)]
        + [f"b_{k + 1}" for k in range(K)]
        + [f"sd_band_{k + 1}" for k in range(K)]
        + ["v_train", "v_train_se", "v_test", "kl", "prob_sugg", "prob_beh", "active_flags"]
    )


def path_rows(path) -> list[dict]:
    rows = []
    for p in path:
        K = p.beta.K
        row = {"lambda": p.lam}
        row.update({f"beta_{k + 1}": p.beta.coefficients[k] for k in range(K)})
        row.update({f"b_{k + 1}": p.b.coefficients[k] for k in range(K)})
        row.update({f"sd_band_{k + 1}": p.sd_band[k] for k in range(K)})
        row["v_train"] = p.value_train.v_weighted
        row["v_train_se"] = p.value_train.se_weighted
        row["v_test"] = p.value_test.v_weighted if p.value_test is not None else None
        row["kl"] = p.kl
        row["prob_sugg"] = p.prob_sugg
        row["prob_beh"] = p.prob_beh
        row["active_flags"] = ";".join(str(f) for f in p.active_flags())
        rows.append(row)
    return rows


def write_path_csv(path_file, path) -> None:
    K = path[0].beta.K if path else 0
    write_csv(path_file, path_rows(path), path_columns(K))


INFERENCE_COLUMNS = [
    "covariate",
    "pinned",
    "coefficient",
    "ci_low",
    "ci_high",
    "se",
    "behavioral",
    "behavioral_ci_low",
    "behavioral_ci_high",
]


def write_inference_csv(path, result, names=None) -> None:
    write_csv(path, result.table_rows(names), INFERENCE_COLUMNS)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return None if not math.isfinite(x) else x
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class RunManifest:
    command: str
    flags: dict
    seed: int | None
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    wall_time_s: float = 0.0
    version: str = __version__

    def write(self, directory) -> Path:
        out = Path(directory) / MANIFEST_NAME
        write_json(
            out,
            {
                "command": self.command,
                "flags": self.flags,
                "seed": self.seed,
                "inputs": [str(p) for p in self.inputs],
                "outputs": sorted(str(p) for p in self.outputs),
                "toolkit_version": self.version,
                "python": sys.version.split()[0],
                "platform": platform.platform(),
                "wall_time_s": round(self.wall_time_s, 3),
            },
        )
        return out
