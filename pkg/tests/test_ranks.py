from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlfpca.gaussian import EMConfig
from mlfpca.ranks import full_ranks, rank_for_threshold, select_ranks, variance_shares, write_scree_csv
from mlfpca.model import assemble_designs


def test_cumulative_rule():
    assert rank_for_threshold([0.999, 0.001], 0.99) == 1
    assert rank_for_threshold([0.75, 0.2499, 0.0001], 0.99) == 2
    assert rank_for_threshold([0.5, 0.3, 0.2], 1.0) == 3
    assert rank_for_threshold([0.6, 0.4], 0.6) == 1


@given(st.lists(st.floats(0, 10), min_size=1, max_size=8), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_rank_monotone_in_threshold(ev, a, b):
    s = variance_shares(sorted(ev, reverse=True))
    lo, hi = sorted((a, b))
    assert rank_for_threshold(s, lo) <= rank_for_threshold(s, hi)
    assert np.all(s >= 0) and abs(s.sum() - 1) < 1e-10


def test_full_ranks_capped_by_design_times(sim_small):
    ds, truth = sim_small
    d = assemble_designs(ds, truth.basis)
    K, L = full_ranks(d)
    assert K == min(truth.basis.p, 5)
    assert set(L) == {min(truth.basis.p, 5)}


def test_select_ranks_tables(sim_small, tmp_path):
    ds, truth = sim_small
    sel = select_ranks(ds, truth.basis, 0.99, 0.60, EMConfig(max_iterations=200))
    for tab in sel.tables:
        assert np.all(np.diff(tab.shares) <= 1e-12)
        assert abs(tab.shares.sum() - 1) < 1e-10
    assert 1 <= sel.K <= 5
    full = select_ranks(sel.fit.designs, None, 1.0, 1.0, EMConfig(max_iterations=5))
    assert full.K == 5 and set(full.L) == {5}
    path = tmp_path / "scree.csv"
    write_scree_csv(sel, path)
    rows = list(csv.DictReader(path.open()))
    assert rows[0]["level"] == "variable" and len(rows) == 5 * (1 + 40)


def test_threshold_validation(sim_small):
    ds, truth = sim_small
    with pytest.raises(ValueError):
        select_ranks(ds, truth.basis, 0.0)
    with pytest.raises(ValueError):
        select_ranks(ds, truth.basis, 0.9, 1.5)
