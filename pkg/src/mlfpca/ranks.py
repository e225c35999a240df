"""Choice of K and L_i by the proportion of variance explained in a full-rank fit."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .basis import SplineBasis
from .dataset import Dataset
from .gaussian import EMConfig, GaussianFit, fit_multilevel_gaussian
from .model import Designs, assemble_designs


@dataclass
class VarianceTable:
    level: str  # "variable" or a variable id
    shares: np.ndarray
    cumulative: np.ndarray


@dataclass
class RankSelection:
    K: int
    L: list[int]
    variable_table: VarianceTable
    replicate_tables: list[VarianceTable]
    fit: GaussianFit

    @property
    def tables(self) -> list[VarianceTable]:
        return [self.variable_table, *self.replicate_tables]


def variance_shares(eigenvalues) -> np.ndarray:
    ev = np.clip(np.asarray(eigenvalues, float), 0.0, None)
    total = ev.sum()
    if total <= 0:
        return np.full(ev.shape, 1.0 / len(ev)) if len(ev) else ev
    return ev / total


def rank_for_threshold(shares, threshold: float) -> int:
    """Smallest number of leading components whose shares reach ``threshold``."""
    shares = np.asarray(shares, float)
    if threshold >= 1.0 or shares.size == 0:
        return shares.size
    cum = np.cumsum(shares)
    return int(min(np.searchsorted(cum, threshold - 1e-12) + 1, shares.size))


def full_ranks(designs: Designs) -> tuple[int, list[int]]:
    """Largest ranks the basis and design times allow."""
    n_times = len(np.unique(designs.times[designs.mask]))
    K = min(designs.p, n_times)
    L = []
    for i in range(designs.M):
        ti = np.unique(designs.times[i, designs.mask[i]])
        L.append(min(designs.p, len(ti)))
    return K, L


def select_ranks(
    ds: Dataset | Designs,
    basis: SplineBasis | None,
    var_threshold: float = 0.99,
    rep_threshold: float = 0.60,
    config: EMConfig | None = None,
) -> RankSelection:
    """Fit the full-rank Gaussian model and keep the components needed to
    reach each threshold of explained variance.

    Shares are the normalised eigenvalues of ``Theta_alpha D_alpha Theta_alpha'``
    (variable level) and of ``Theta_beta_i D_beta_i Theta_beta_i'`` for each
    variable (replicate level), taken from the orthogonalised fit.
    """
    for name, th in (("var_threshold", var_threshold), ("rep_threshold", rep_threshold)):
        if not 0 < th <= 1:
            raise ValueError(f"{name} must lie in (0, 1], got {th}")
    designs = ds if isinstance(ds, Designs) else assemble_designs(ds, basis)
    K, L = full_ranks(designs)
    fit = fit_multilevel_gaussian(designs, None, K, L, config)
    sv = variance_shares(fit.params.D_alpha)
    vtab = VarianceTable("variable", sv, np.cumsum(sv))
    K_hat = rank_for_threshold(sv, var_threshold)
    rtabs, L_hat = [], []
    for vid, d in zip(designs.variable_ids, fit.params.D_beta):
        s = variance_shares(d)
        rtabs.append(VarianceTable(vid, s, np.cumsum(s)))
        L_hat.append(rank_for_threshold(s, rep_threshold))
    return RankSelection(K_hat, L_hat, vtab, rtabs, fit)


def write_scree_csv(selection: RankSelection, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("level", "component", "share", "cumulative"))
        for tab in selection.tables:
            for k, (s, c) in enumerate(zip(tab.shares, tab.cumulative), start=1):
                w.writerow((tab.level, k, repr(float(s)), repr(float(c))))
