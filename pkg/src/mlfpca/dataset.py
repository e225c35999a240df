"""Replicated time-series panels indexed by (variable, replicate, time)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

HEADER = ("variable", "replicate", "time", "value")


class DatasetError(ValueError):
    """Raised when a panel fails validation or cannot be parsed."""


@dataclass(frozen=True)
class Observation:
    variable_id: str
    replicate_id: str
    time: float
    value: float


@dataclass(frozen=True)
class ReplicateSeries:
    replicate_id: str
    times: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class VariablePanel:
    variable_id: str
    replicates: tuple[ReplicateSeries, ...]

    @property
    def n_replicates(self) -> int:
        return len(self.replicates)

    @property
    def n_obs(self) -> int:
        return sum(len(r) for r in self.replicates)

    @property
    def y(self) -> np.ndarray:
        """All observations stacked replicate by replicate."""
        return np.concatenate([r.values for r in self.replicates])

    @property
    def times(self) -> np.ndarray:
        return np.concatenate([r.times for r in self.replicates])


@dataclass(frozen=True)
class Dataset:
    """Validated, immutable panel.

    Variables and replicates are kept in lexicographic order of their ids and
    observations within a replicate are sorted by time, so iteration order is
    deterministic.
    """

    variables: tuple[VariablePanel, ...]
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(
            self, "_index", {v.variable_id: k for k, v in enumerate(self.variables)}
        )

    @property
    def M(self) -> int:
        return len(self.variables)

    @property
    def variable_ids(self) -> list[str]:
        return [v.variable_id for v in self.variables]

    def __getitem__(self, key: int | str) -> VariablePanel:
        if isinstance(key, str):
            return self.variables[self._index[key]]
        return self.variables[key]

    def __iter__(self) -> Iterator[VariablePanel]:
        return iter(self.variables)

    def __len__(self) -> int:
        return len(self.variables)

    def subset(self, variable_ids: Iterable[str]) -> "Dataset":
        return Dataset(tuple(self[v] for v in sorted(set(variable_ids))))

    def observations(self) -> Iterator[Observation]:
        for var in self.variables:
            for rep in var.replicates:
                for t, v in zip(rep.times, rep.values):
                    yield Observation(var.variable_id, rep.replicate_id, float(t), float(v))

    @classmethod
    def from_observations(cls, observations: Iterable[Observation]) -> "Dataset":
        """Group, sort and validate raw observations."""
        grouped: dict[str, dict[str, dict[float, float]]] = {}
        for obs in observations:
            if not (math.isfinite(obs.time) and math.isfinite(obs.value)):
                raise DatasetError(
                    f"non-finite time or value for ({obs.variable_id}, {obs.replicate_id})"
                )
            reps = grouped.setdefault(obs.variable_id, {})
            series = reps.setdefault(obs.replicate_id, {})
            if obs.time in series:
                raise DatasetError(
                    f"duplicate observation ({obs.variable_id}, {obs.replicate_id}, {obs.time!r})"
                )
            series[obs.time] = obs.value

        panels = []
        for var_id in sorted(grouped):
            reps = grouped[var_id]
            series = []
            for rep_id in sorted(reps):
                ts = np.array(sorted(reps[rep_id]), dtype=float)
                vs = np.array([reps[rep_id][t] for t in ts], dtype=float)
                series.append(ReplicateSeries(rep_id, ts, vs))
            if len(series) < 2:
                raise DatasetError(
                    f"variable {var_id!r} has {len(series)} replicate(s); at least 2 are required"
                )
            panels.append(VariablePanel(var_id, tuple(series)))
        if not panels:
            raise DatasetError("dataset contains no observations")
        return cls(tuple(panels))

    @classmethod
    def from_arrays(
        cls,
        variable: Sequence[str],
        replicate: Sequence[str],
        time: Sequence[float],
        value: Sequence[float],
    ) -> "Dataset":
        return cls.from_observations(
            Observation(str(a), str(b), float(c), float(d))
            for a, b, c, d in zip(variable, replicate, time, value)
        )


def load_csv(path: str | Path) -> Dataset:
    """Read a long-format CSV with header ``variable,replicate,time,value``.

    Rows whose value field is empty are treated as missing and dropped.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such file: {path}")
    observations = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if tuple(h.strip() for h in header) != HEADER:
            raise DatasetError(
                f"{path}: line 1: header must be {','.join(HEADER)!r}, got {','.join(header)!r}"
            )
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DatasetError(f"{path}: line {line}: expected 4 fields, got {len(row)}")
            var_id, rep_id, t_raw, v_raw = (c.strip() for c in row)
            if not var_id or not rep_id:
                raise DatasetError(f"{path}: line {line}: empty variable or replicate id")
            if v_raw == "":
                continue
            try:
                t, v = float(t_raw), float(v_raw)
            except ValueError:
                raise DatasetError(f"{path}: line {line}: cannot parse number") from None
            if not (math.isfinite(t) and math.isfinite(v)):
                raise DatasetError(f"{path}: line {line}: non-finite time or value")
            observations.append(Observation(var_id, rep_id, t, v))
    return Dataset.from_observations(observations)


def write_csv(ds: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for obs in ds.observations():
            writer.writerow([obs.variable_id, obs.replicate_id, repr(obs.time), repr(obs.value)])


def design_times(ds: Dataset) -> list[float]:
    """Sorted, de-duplicated union of all observation times."""
    return sorted({float(t) for var in ds for rep in var.replicates for t in rep.times})
