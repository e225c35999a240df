"""Simulation of multi-level panels and scoring of fitted curves by fine-grid MSE."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .basis import SplineBasis, build_basis
from .dataset import Dataset, Observation
from .model import FittedCurves, MultiLevelParams, assemble_designs, extract_curves

log = logging.getLogger(__name__)

# Raw cubic B-spline coefficients (one interior knot at the centre of [0, 1]).
# The grand mean rises to a peak early and dips afterwards; the first
# variable-level PC acts on the first half of the time course, the second on
# the second half; the replicate-level PC scales the height of the peak.
GRAND_MEAN_COEF = (0.0, 2.0, -0.8, 0.3, 0.2)
VARIABLE_PC_COEF = ((1.0, 0.8, 0.1, 0.0, 0.0), (0.0, 0.0, 0.1, 0.6, 1.0))
REPLICATE_PC_COEF = ((0.0, 1.0, 0.0, 0.0, 0.0),)


class SimulationError(ValueError):
    pass


@dataclass
class SimDesign:
    """Simulation settings.

    Variances refer to PC functions normalised to unit mean square over the
    fine grid, so ``D_alpha[k]`` is the variance the k-th PC contributes to a
    variable curve at an average time point.
    """

    M: int = 100
    n: int = 5
    times: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    D_alpha: tuple[float, ...] = (0.3, 0.1)
    d_beta: float = 0.075
    sigma2: float = 0.05
    seed: int = 0
    grand_mean: tuple[float, ...] = GRAND_MEAN_COEF
    variable_pcs: tuple[tuple[float, ...], ...] = VARIABLE_PC_COEF
    replicate_pcs: tuple[tuple[float, ...], ...] = REPLICATE_PC_COEF
    interior_knots: tuple[float, ...] | None = None
    fine_grid_length: int | None = None

    def __post_init__(self):
        if self.M < 1 or self.n < 2:
            raise SimulationError("need M >= 1 variables and n >= 2 replicates")
        if len(self.D_alpha) != len(self.variable_pcs):
            raise SimulationError("D_alpha must have one entry per variable-level PC")
        if min(self.D_alpha, default=0) < 0 or self.d_beta < 0 or self.sigma2 < 0:
            raise SimulationError("variances must be nonnegative")

    @property
    def K(self) -> int:
        return len(self.variable_pcs)

    @property
    def L(self) -> int:
        return len(self.replicate_pcs)

    def basis(self) -> SplineBasis:
        t = np.asarray(self.times, float)
        knots = self.interior_knots
        if knots is None:
            knots = ((t.min() + t.max()) / 2.0,)
        return build_basis(
            "bspline-cubic", t, interior_knots=knots, fine_grid_length=self.fine_grid_length
        )


def _orthonormal_columns(raw: Sequence[Sequence[float]], basis: SplineBasis) -> np.ndarray:
    """Library-basis coefficients, Gram-Schmidt orthonormalised in order."""
    X = np.linalg.solve(basis.transform, np.asarray(raw, float).T)  # (p, k)
    Q, R = np.linalg.qr(X)
    return Q * np.sign(np.diag(R))


@dataclass
class SimTruth:
    """Generating parameters, loadings and noiseless curves."""

    basis: SplineBasis
    params: MultiLevelParams
    alpha: np.ndarray  # (M, K) in library units
    beta: np.ndarray  # (M, n, L) in library units
    curves: FittedCurves = field(repr=False)


def true_parameters(design: SimDesign, basis: SplineBasis | None = None) -> MultiLevelParams:
    """Generating parameters expressed in the orthonormalised basis."""
    basis = basis or design.basis()
    # unit mean square over the grid corresponds to coefficient norm c
    c2 = basis.L**2 / basis.g
    theta_mu = np.linalg.solve(basis.transform, np.asarray(design.grand_mean, float))
    Ta = _orthonormal_columns(design.variable_pcs, basis)
    Tb = _orthonormal_columns(design.replicate_pcs, basis)
    return MultiLevelParams(
        theta_mu=theta_mu,
        Theta_alpha=Ta,
        Theta_beta=[Tb.copy() for _ in range(design.M)],
        D_beta=[np.full(design.L, design.d_beta * c2) for _ in range(design.M)],
        sigma2=np.full(design.M, float(design.sigma2)),
        D_alpha=np.asarray(design.D_alpha, float) * c2,
    )


def generate(design: SimDesign) -> tuple[Dataset, SimTruth]:
    """Draw one dataset; every replicate is observed at every design time."""
    basis = design.basis()
    params = true_parameters(design, basis)
    rng = np.random.default_rng(design.seed)
    M, n, K, L = design.M, design.n, design.K, design.L
    alpha = rng.standard_normal((M, K)) * np.sqrt(params.D_alpha)
    beta = rng.standard_normal((M, n, L)) * np.sqrt(params.D_beta[0])
    times = np.asarray(design.times, float)
    eps = rng.standard_normal((M, n, len(times))) * np.sqrt(design.sigma2)

    Bt = basis.evaluate(times)
    var_coef = params.theta_mu + alpha @ params.Theta_alpha.T  # (M, p)
    rep_coef = var_coef[:, None, :] + beta @ params.Theta_beta[0].T  # (M, n, p)
    y = rep_coef @ Bt.T + eps

    vw = len(str(M))
    rw = max(2, len(str(n)))
    vids = [f"v{i + 1:0{vw}d}" for i in range(M)]
    rids = [f"r{j + 1:0{rw}d}" for j in range(n)]
    obs = [
        Observation(vids[i], rids[j], float(t), float(y[i, j, k]))
        for i in range(M)
        for j in range(n)
        for k, t in enumerate(times)
    ]
    ds = Dataset.from_observations(obs)
    designs = assemble_designs(ds, basis)
    curves = extract_curves(params, alpha, beta, basis, designs)
    return ds, SimTruth(basis=basis, params=params, alpha=alpha, beta=beta, curves=curves)


@dataclass
class MSEResult:
    per_variable: np.ndarray
    mean: float
    sd: float


def mse_variable_curves(fitted: FittedCurves, truth: FittedCurves) -> MSEResult:
    """Mean squared difference of variable curves over the fine grid."""
    if fitted.grid.shape != truth.grid.shape or not np.allclose(fitted.grid, truth.grid, atol=1e-12):
        raise SimulationError("fitted and true curves live on different grids")
    if tuple(fitted.variable_ids) != tuple(truth.variable_ids):
        raise SimulationError("fitted and true curves cover different variables")
    per = np.mean((fitted.variable - truth.variable) ** 2, axis=1)
    sd = float(np.std(per, ddof=1)) if len(per) > 1 else 0.0
    return MSEResult(per_variable=per, mean=float(np.mean(per)), sd=sd)


# --- study harness --------------------------------------------------------------

FITTERS = ("multi", "single")
RESULT_COLUMNS = ("M", "n", "fitter", "mean_mse", "sd_mse", "repetitions")


def fit_curves(fitter: str, ds: Dataset, basis: SplineBasis, K: int, L: int, config=None) -> FittedCurves:
    """Fit ``ds`` with the named fitter and return posterior-mean curves."""
    from .gaussian import fit_multilevel_gaussian, fit_singlelevel_gaussian

    designs = assemble_designs(ds, basis)
    if fitter == "multi":
        fit = fit_multilevel_gaussian(designs, None, K, L, config)
    elif fitter == "single":
        fit = fit_singlelevel_gaussian(designs, None, L, config)
    else:
        raise SimulationError(f"unknown fitter {fitter!r}")
    return extract_curves(fit.params, fit.moments.alpha, fit.moments.beta, basis, designs)


def repetition_seed(seed: int, cell: int, rep: int) -> int:
    return int(np.random.SeedSequence([seed, cell, rep]).generate_state(1, np.uint64)[0])


@dataclass
class StudyRow:
    M: int
    n: int
    fitter: str
    mean_mse: float
    sd_mse: float
    repetitions: int
    dataset_means: list[float] = field(default_factory=list, repr=False)


def run_study(
    cells: Iterable[tuple[int, int]] | Iterable[SimDesign],
    repetitions: int = 50,
    fitters: Sequence[str] = FITTERS,
    output: str | Path | None = None,
    *,
    seed: int = 0,
    base: SimDesign | None = None,
    config=None,
    dump_dir: str | Path | None = None,
) -> list[StudyRow]:
    """Generate, fit and score datasets for every design cell.

    Each cell is an ``(M, n)`` pair applied to ``base`` (default settings),
    or a full ``SimDesign``. Both fitters receive the true ranks. ``mean_mse``
    and ``sd_mse`` summarise per-variable MSEs pooled over all successful
    repetitions; failed fits are logged and excluded from ``repetitions``.
    """
    from dataclasses import replace

    from .dataset import write_csv

    base = base or SimDesign()
    rows: list[StudyRow] = []
    for c, cell in enumerate(cells):
        design = cell if isinstance(cell, SimDesign) else replace(base, M=cell[0], n=cell[1])
        pooled = {f: [] for f in fitters}
        per_rep = {f: [] for f in fitters}
        for r in range(repetitions):
            d = replace(design, seed=repetition_seed(seed, c, r))
            ds, truth = generate(d)
            if dump_dir is not None:
                Path(dump_dir).mkdir(parents=True, exist_ok=True)
                write_csv(ds, Path(dump_dir) / f"cell{c}_rep{r}.csv")
            for f in fitters:
                try:
                    curves = fit_curves(f, ds, truth.basis, d.K, d.L, config)
                except Exception as exc:  # recorded, not fatal
                    log.warning("fit %s failed (cell %d, rep %d): %s", f, c, r, exc)
                    continue
                res = mse_variable_curves(curves, truth.curves)
                pooled[f].append(res.per_variable)
                per_rep[f].append(res.mean)
        for f in fitters:
            if pooled[f]:
                allv = np.concatenate(pooled[f])
                mean, sd = float(allv.mean()), float(allv.std(ddof=1)) if allv.size > 1 else 0.0
            else:
                mean = sd = float("nan")
            rows.append(StudyRow(design.M, design.n, f, mean, sd, len(pooled[f]), per_rep[f]))
    if output is not None:
        write_study_csv(rows, output)
    return rows


def write_study_csv(rows: Sequence[StudyRow], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([r.M, r.n, r.fitter, repr(r.mean_mse), repr(r.sd_mse), r.repetitions])
