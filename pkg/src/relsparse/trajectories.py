"""Equal-length trajectory datasets: container, CSV ingestion, scaling, splitting.

A dataset of ``n`` trajectories with horizon ``T`` stores

* ``states``  with shape ``(n, T + 2, K)`` (S_0 .. S_{T+1}),
* ``actions`` with shape ``(n, T + 1)``    (A_0 .. A_T, binary),
* ``rewards`` with shape ``(n, T + 1)``    (R(S_t, A_t, S_{t+1})).

Arrays are frozen (read-only) after construction.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError

__all__ = [
    "Trajectory",
    "ScalingInfo",
    "Dataset",
    "SplitSpec",
    "CsvSchema",
    "load_dataset",
    "write_dataset",
    "scale_states",
    "unscale_states",
    "split_dataset",
]


def _frozen(a, dtype=float):
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        s = _frozen(self.states)
        a = _frozen(self.actions, dtype=np.int8)
        r = _frozen(self.rewards)
        if s.ndim != 2:
            raise DataError("states must be a (T+2, K) array")
        if a.shape != (s.shape[0] - 1,) or r.shape != a.shape:
            raise DataError(
                f"states has {s.shape[0]} rows; expected {s.shape[0] - 1} actions and rewards, "
                f"got {a.shape[0]} and {r.shape[0]}"
            )
        if not np.all(np.isin(self.actions, (0, 1))):
            raise DataError("actions must be 0 or 1")
        if not np.all(np.isfinite(s)) or not np.all(np.isfinite(r)):
            raise DataError("states and rewards must be finite")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "rewards", r)

    @property
    def T(self) -> int:
        return self.actions.shape[0] - 1

    @property
    def K(self) -> int:
        return self.states.shape[1]


@dataclass(frozen=True)
class ScalingInfo:
    per_dimension_sd: np.ndarray
    applied: bool = True

    def __post_init__(self):
        sd = _frozen(self.per_dimension_sd)
        if self.applied and not np.all(sd > 0):
            raise DataError("scaling sds must be strictly positive")
        object.__setattr__(self, "per_dimension_sd", sd)


class Dataset:
    """Immutable collection of trajectories sharing ``T`` and ``K``."""

    def __init__(
        self,
        states,
        actions,
        rewards,
        scaling: Optional[ScalingInfo] = None,
        seed_tag: Optional[str] = None,
        ids: Optional[Sequence] = None,
    ):
        states = _frozen(states)
        actions_raw = np.asarray(actions)
        rewards = _frozen(rewards)
        if states.ndim != 3:
            raise DataError("states must have shape (n, T+2, K)")
        n, tp2, _ = states.shape
        if n < 1:
            raise DataError("dataset needs at least one trajectory")
        if actions_raw.shape != (n, tp2 - 1) or rewards.shape != (n, tp2 - 1):
            raise DataError(
                f"actions/rewards must have shape {(n, tp2 - 1)}, got "
                f"{actions_raw.shape} and {rewards.shape}"
            )
        if not np.all(np.isin(actions_raw, (0, 1))):
            raise DataError("actions must be 0 or 1")
        if not np.all(np.isfinite(states)) or not np.all(np.isfinite(rewards)):
            raise DataError("states and rewards must be finite")
        self.states = states
        self.actions = _frozen(actions_raw, dtype=float)
        self.rewards = rewards
        self.scaling = scaling
        self.seed_tag = seed_tag
        self.ids = tuple(ids) if ids is not None else tuple(range(n))
        if len(self.ids) != n:
            raise DataError("ids must have one entry per trajectory")

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], **kwargs) -> "Dataset":
        if not trajectories:
            raise DataError("dataset needs at least one trajectory")
        shapes = {t.states.shape for t in trajectories}
        if len(shapes) != 1:
            raise DataError(f"trajectories differ in (T+2, K): {sorted(shapes)}")
        return cls(
            np.stack([t.states for t in trajectories]),
            np.stack([t.actions for t in trajectories]),
            np.stack([t.rewards for t in trajectories]),
            **kwargs,
        )

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def T(self) -> int:
        return self.states.shape[1] - 2

    @property
    def K(self) -> int:
        return self.states.shape[2]

    @property
    def decision_states(self) -> np.ndarray:
        """States S_0..S_T at which actions were taken, shape (n, T+1, K)."""
        return self.states[:, :-1, :]

    @property
    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    @property
    def trajectories(self) -> list[Trajectory]:
        return [
            Trajectory(self.states[i], self.actions[i], self.rewards[i]) for i in range(self.n)
        ]

    def __len__(self):
        return self.n

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset(
            self.states[idx],
            self.actions[idx],
            self.rewards[idx],
            scaling=self.scaling,
            seed_tag=self.seed_tag,
            ids=[self.ids[i] for i in idx],
        )

    def __repr__(self):
        return f"Dataset(n={self.n}, T={self.T}, K={self.K})"


# ---------------------------------------------------------------------------
# CSV ingestion


_RULE_RE = re.compile(r"^\s*(column|next_state_component|neg_current_component_times_action)\s*(?:\(\s*(\d+)\s*\))?\s*$")


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for :func:`load_dataset`.

    ``state_cols`` defaults to every column named ``s<k>`` in header order.
    ``reward_rule`` is ``"column"`` (read ``reward_col``) or one of
    ``next_state_component(j)`` / ``neg_current_component_times_action(j)``
    with a 1-based state index ``j``.
    """

    id_col: str = "id"
    time_col: str = "t"
    state_cols: Optional[tuple] = None
    action_col: str = "a"
    reward_col: Optional[str] = "r"
    reward_rule: str = "column"


def parse_reward_rule(rule: str) -> tuple[str, Optional[int]]:
    m = _RULE_RE.match(rule)
    if m is None:
        raise DataError(f"unknown reward rule {rule!r}")
    name, j = m.group(1), m.group(2)
    if name != "column" and j is None:
        raise DataError(f"reward rule {name} needs a component index, e.g. {name}(2)")
    return name, (int(j) if j is not None else None)


def apply_reward_rule(rule: str, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Per-step rewards from a named rule; ``states`` is (n, T+2, K)."""
    name, j = parse_reward_rule(rule)
    if name == "column":
        raise DataError("the 'column' rule reads rewards from the file")
    K = states.shape[-1]
    if not 1 <= j <= K:
        raise DataError(f"reward rule {rule!r} needs state component {j}, but K={K}")
    if name == "next_state_component":
        return np.array(states[:, 1:, j - 1])
    return -np.asarray(states[:, :-1, j - 1]) * actions


def _parse_float(value, line, col):
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise DataError(f"line {line}: column {col!r} has unparseable number {value!r}") from None
    if not math.isfinite(x):
        raise DataError(f"line {line}: column {col!r} is not finite ({value!r})")
    return x


def load_dataset(path, schema: Optional[CsvSchema] = None) -> Dataset:
    """Read a long-format trajectory CSV.

    Each trajectory contributes ``T + 2`` rows (t = 0..T+1). The action and
    reward cells of the terminal row are left empty; every other cell must be
    present.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    rule_name, _ = parse_reward_rule(schema.reward_rule)

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        state_cols = list(schema.state_cols) if schema.state_cols else [
            c for c in header if re.fullmatch(r"s\d+", c)
        ]
        required = [schema.id_col, schema.time_col, schema.action_col, *state_cols]
        if rule_name == "column":
            if schema.reward_col is None:
                raise DataError("reward rule 'column' needs a reward column name")
            required.append(schema.reward_col)
        missing = [c for c in required if c not in header]
        if not state_cols:
            missing.append("s1..sK")
        if missing:
            raise DataError(f"missing columns: {', '.join(missing)}")

        rows: dict[str, list] = {}
        for line, row in enumerate(reader, start=2):
            tid = row[schema.id_col]
            if tid is None or tid == "":
                raise DataError(f"line {line}: empty trajectory id")
            t = _parse_float(row[schema.time_col], line, schema.time_col)
            s = [_parse_float(row[c], line, c) for c in state_cols]
            a_raw = (row[schema.action_col] or "").strip()
            r_raw = (row[schema.reward_col] or "").strip() if rule_name == "column" else ""
            rows.setdefault(tid, []).append((t, s, a_raw, r_raw, line))

    if not rows:
        raise DataError(f"{path}: no data rows")

    lengths = {tid: len(v) for tid, v in rows.items()}
    # the most common length wins; ties go to the longer (truncation is the usual fault)
    counts = list(lengths.values())
    expected = max(set(counts), key=lambda m: (counts.count(m), m))
    for tid, length in lengths.items():
        if length != expected:
            raise DataError(
                f"ragged trajectory lengths: id {tid!r} has {length} rows, others have {expected}"
            )
    if expected < 2:
        raise DataError("each trajectory needs at least two rows (S_0 and S_1)")

    ids, S, A, R = [], [], [], []
    for tid, recs in rows.items():
        recs.sort(key=lambda rec: rec[0])
        times = [rec[0] for rec in recs]
        if len(set(times)) != len(times):
            raise DataError(f"trajectory {tid!r} has duplicate time values")
        acts, rews = [], []
        for t, _, a_raw, r_raw, line in recs[:-1]:
            if a_raw == "":
                raise DataError(f"line {line}: missing action for id {tid!r}")
            a = _parse_float(a_raw, line, schema.action_col)
            if a not in (0.0, 1.0):
                raise DataError(f"line {line}: non-binary action {a_raw!r} for id {tid!r}")
            acts.append(a)
            if rule_name == "column":
                if r_raw == "":
                    raise DataError(f"line {line}: missing reward for id {tid!r}")
                rews.append(_parse_float(r_raw, line, schema.reward_col))
        ids.append(tid)
        S.append([rec[1] for rec in recs])
        A.append(acts)
        R.append(rews)

    states = np.asarray(S, dtype=float)
    actions = np.asarray(A, dtype=float)
    if rule_name == "column":
        rewards = np.asarray(R, dtype=float)
    else:
        rewards = apply_reward_rule(schema.reward_rule, states, actions)
    return Dataset(states, actions, rewards, ids=ids, seed_tag=str(path.name))


def write_dataset(d: Dataset, path) -> None:
    """Write ``d`` in the long CSV layout read by :func:`load_dataset`."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "t", *[f"s{k + 1}" for k in range(d.K)], "a", "r"])
        for i in range(d.n):
            for t in range(d.T + 2):
                s = [repr(float(x)) for x in d.states[i, t]]
                if t <= d.T:
                    w.writerow([d.ids[i], t, *s, int(d.actions[i, t]), repr(float(d.rewards[i, t]))])
                else:
                    w.writerow([d.ids[i], t, *s, "", ""])


# ---------------------------------------------------------------------------
# scaling


def pooled_sd(states: np.ndarray) -> np.ndarray:
    """Per-dimension sample sd pooled over trajectories and time (ddof=1)."""
    flat = np.asarray(states).reshape(-1, states.shape[-1])
    return flat.std(axis=0, ddof=1)


def scale_states(d: Dataset) -> Dataset:
    if d.scaling is not None and d.scaling.applied:
        raise DataError("dataset states are already scaled")
    sd = pooled_sd(d.states)
    for k, v in enumerate(sd):
        if not v > 0:
            raise DataError(f"state dimension {k + 1} has zero variance; cannot scale")
    return Dataset(
        d.states / sd,
        d.actions,
        d.rewards,
        scaling=ScalingInfo(sd, applied=True),
        seed_tag=d.seed_tag,
        ids=d.ids,
    )


def unscale_states(d: Dataset) -> Dataset:
    if d.scaling is None or not d.scaling.applied:
        raise DataError("dataset is not scaled")
    return Dataset(
        d.states * d.scaling.per_dimension_sd,
        d.actions,
        d.rewards,
        scaling=None,
        seed_tag=d.seed_tag,
        ids=d.ids,
    )


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    split1_train: tuple
    split1_test: tuple
    split2: tuple
    seed: int
    n: int = field(default=-1)

    def __post_init__(self):
        sets = [set(self.split1_train), set(self.split1_test), set(self.split2)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DataError("split index sets overlap")
        if self.n >= 0 and sets[0] | sets[1] | sets[2] != set(range(self.n)):
            raise DataError("split index sets do not cover all trajectories")

    @property
    def selection_indices(self) -> tuple:
        return tuple(sorted(self.split1_train + self.split1_test))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n": self.n,
            "split1_train": list(self.split1_train),
            "split1_test": list(self.split1_test),
            "split2": list(self.split2),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        obj = json.loads(text)
        return cls(
            tuple(obj["split1_train"]),
            tuple(obj["split1_test"]),
            tuple(obj["split2"]),
            int(obj["seed"]),
            int(obj.get("n", -1)),
        )


def split_dataset(d, seed: int, fractions=(0.25, 0.25, 0.5)) -> SplitSpec:
    """Random three-way split into split-1 train, split-1 test and split 2.

    ``d`` may be a Dataset or a trajectory count.
    """
    n = d if isinstance(d, (int, np.integer)) else d.n
    f = np.asarray(fractions, dtype=float)
    if f.shape != (3,) or np.any(f <= 0) or abs(f.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n_train = int(round(f[0] * n))
    n_test = int(round(f[1] * n))
    n_two = n - n_train - n_test
    if min(n_train, n_test, n_two) < 1:
        raise DataError(f"n={n} is too small for a three-way split with fractions {tuple(f)}")
    perm = np.random.default_rng(seed).permutation(n)
    return SplitSpec(
        tuple(sorted(int(i) for i in perm[:n_train])),
        tuple(sorted(int(i) for i in perm[n_train : n_train + n_test])),
        tuple(sorted(int(i) for i in perm[n_train + n_test :])),
        int(seed),
        int(n),
    )
