from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlfpca.dataset import Dataset, DatasetError, Observation, design_times, load_csv, write_csv


def _obs(rows):
    return [Observation(*r) for r in rows]


def test_sorting_is_lexicographic_and_by_time():
    ds = Dataset.from_observations(
        _obs([("b", "r2", 1.0, 4.0), ("b", "r1", 2.0, 3.0), ("a", "x", 0.5, 1.0),
              ("a", "w", 0.0, 2.0), ("b", "r1", 0.0, 5.0)])
    )
    assert ds.variable_ids == ["a", "b"]
    assert [r.replicate_id for r in ds["b"].replicates] == ["r1", "r2"]
    np.testing.assert_array_equal(ds["b"].replicates[0].times, [0.0, 2.0])
    np.testing.assert_array_equal(ds["b"].y, [5.0, 3.0, 4.0])


def test_duplicate_observation_rejected():
    with pytest.raises(DatasetError, match="duplicate"):
        Dataset.from_observations(_obs([("a", "r", 1.0, 1.0), ("a", "r", 1.0, 2.0), ("a", "s", 0.0, 0.0)]))


def test_single_replicate_variable_rejected():
    with pytest.raises(DatasetError, match="at least 2"):
        Dataset.from_observations(_obs([("a", "r", 1.0, 1.0), ("a", "r", 2.0, 2.0)]))


def test_non_finite_rejected():
    with pytest.raises(DatasetError, match="non-finite"):
        Dataset.from_observations(_obs([("a", "r", 1.0, math.nan), ("a", "s", 1.0, 1.0)]))


def test_empty_dataset_rejected():
    with pytest.raises(DatasetError):
        Dataset.from_observations([])


def test_load_csv_header_and_line_numbers(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("var,replicate,time,value\n")
    with pytest.raises(DatasetError, match="line 1"):
        load_csv(bad)
    bad.write_text("variable,replicate,time,value\na,r,0,1\na,r,oops,2\n")
    with pytest.raises(DatasetError, match="line 3"):
        load_csv(bad)
    bad.write_text("variable,replicate,time,value\na,r,0\n")
    with pytest.raises(DatasetError, match="line 2"):
        load_csv(bad)


def test_load_csv_drops_missing_values(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("variable,replicate,time,value\na,r1,0,1.5\na,r1,1,\na,r2,0,2\na,r2,1,3\n")
    ds = load_csv(f)
    assert ds["a"].n_obs == 3
    assert len(ds["a"].replicates[0]) == 1


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError, match="no such file"):
        load_csv(tmp_path / "nope.csv")


def test_design_times_union():
    ds = Dataset.from_arrays(["a"] * 4, ["r", "r", "s", "s"], [0, 2, 1, 2], [1, 2, 3, 4])
    assert design_times(ds) == [0.0, 1.0, 2.0]


panel_rows = st.lists(
    st.tuples(
        st.sampled_from(["g1", "g2", "g3"]),
        st.sampled_from(["p1", "p2", "p3"]),
        st.floats(-5, 5, allow_nan=False),
        st.floats(-1e6, 1e6, allow_nan=False),
    ),
    min_size=1,
    max_size=40,
    unique_by=lambda r: (r[0], r[1], r[2]),
)


@given(panel_rows)
def test_csv_round_trip(tmp_path_factory, rows):
    # ensure every variable has two replicates
    rows = rows + [(v, rep, 100.0, 0.0) for v in {r[0] for r in rows} for rep in ("p1", "p2")]
    rows = list({(r[0], r[1], r[2]): r for r in rows}.values())
    ds = Dataset.from_observations(_obs(rows))
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(ds, path)
    assert path.read_bytes().count(b"\r") == 0
    back = load_csv(path)
    assert list(back.observations()) == list(ds.observations())
