"""Orthonormalised cubic spline bases evaluated on arbitrary times and a fine grid."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.interpolate import BSpline, CubicSpline

BasisKind = Literal["bspline-cubic", "natural-cubic"]

DEFAULT_GRID_LENGTH = 101
_ORDER = 4  # cubic


class BasisError(ValueError):
    """Invalid knot configuration or evaluation outside the basis range."""


@dataclass(frozen=True)
class SplineBasis:
    """A p-dimensional spline basis with an orthonormalising transform.

    The transform ``T`` is the symmetric inverse square root of
    ``(L/g) * Braw.T @ Braw`` where ``Braw`` is the raw basis on the fine grid,
    so that the transformed grid matrix ``B = Braw @ T`` satisfies
    ``(L/g) * B.T @ B = I``.

    Attributes
    ----------
    kind : {'bspline-cubic', 'natural-cubic'}
    knots : ndarray
        Interior knots for ``bspline-cubic``; all knots for ``natural-cubic``.
    t_min, t_max : float
        Time range; evaluation outside it is refused.
    L : int
        Number of fine-grid points.
    """

    kind: BasisKind
    knots: np.ndarray
    t_min: float
    t_max: float
    L: int
    transform: np.ndarray = field(repr=False)
    grid: np.ndarray = field(repr=False)
    B: np.ndarray = field(repr=False)

    @property
    def p(self) -> int:
        return self.transform.shape[0]

    @property
    def g(self) -> float:
        """Fine-grid spacing."""
        return (self.t_max - self.t_min) / (self.L - 1)

    def raw(self, times) -> np.ndarray:
        """Untransformed basis rows at ``times`` (no range check)."""
        return _raw_basis(self.kind, self.knots, self.t_min, self.t_max, np.asarray(times, float))

    def evaluate(self, times) -> np.ndarray:
        return evaluate(self, times)

    def curve_values(self, coefficients, times=None) -> np.ndarray:
        return curve_values(self, coefficients, self.grid if times is None else times)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "knots": [float(k) for k in self.knots],
            "t_min": float(self.t_min),
            "t_max": float(self.t_max),
            "fine_grid_length": int(self.L),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplineBasis":
        kind = d["kind"]
        knots = d["knots"]
        if kind == "natural-cubic":
            return build_basis(kind, knots, fine_grid_length=d["fine_grid_length"])
        return build_basis(
            kind,
            [d["t_min"], d["t_max"]],
            interior_knots=knots,
            fine_grid_length=d["fine_grid_length"],
        )


def _bspline_knot_vector(interior: np.ndarray, t_min: float, t_max: float) -> np.ndarray:
    return np.concatenate([[t_min] * _ORDER, interior, [t_max] * _ORDER])


def _raw_basis(kind, knots, t_min, t_max, times) -> np.ndarray:
    times = np.atleast_1d(times).astype(float)
    if kind == "bspline-cubic":
        tv = _bspline_knot_vector(knots, t_min, t_max)
        p = len(tv) - _ORDER
        if times.size == 0:
            return np.zeros((0, p))
        return BSpline.design_matrix(times, tv, _ORDER - 1).toarray()
    # natural cubic: cardinal functions interpolating unit vectors at the knots
    k = len(knots)
    if times.size == 0:
        return np.zeros((0, k))
    if k == 2:
        # the natural cubic through two points is the straight line
        w = (times - knots[0]) / (knots[1] - knots[0])
        return np.column_stack([1.0 - w, w])
    return CubicSpline(knots, np.eye(k), bc_type="natural")(times)


def build_basis(
    kind: BasisKind,
    design_times: Sequence[float],
    interior_knots: Sequence[float] | None = None,
    fine_grid_length: int | None = None,
) -> SplineBasis:
    """Construct an orthonormalised spline basis.

    Parameters
    ----------
    kind : {'bspline-cubic', 'natural-cubic'}
        ``natural-cubic`` places a knot at every design time (dimension equals
        the number of distinct design times). ``bspline-cubic`` uses clamped
        cubic B-splines with ``interior_knots`` (default: one knot at the
        centre of the time range), giving dimension ``4 + len(interior_knots)``.
    design_times : sequence of float
        Observation times; their range fixes the basis support.
    interior_knots : sequence of float, optional
        Only for ``bspline-cubic``.
    fine_grid_length : int, optional
        Number of equally spaced grid points. Defaults to ``max(101, 10 p)``.
    """
    times = np.unique(np.asarray(design_times, dtype=float))
    if times.size < 2:
        raise BasisError("at least two distinct design times are required")
    if not np.all(np.isfinite(times)):
        raise BasisError("design times must be finite")
    t_min, t_max = float(times[0]), float(times[-1])

    if kind == "natural-cubic":
        if interior_knots is not None:
            raise BasisError("natural-cubic places its knots at the design times")
        knots = times
        p = len(knots)
    elif kind == "bspline-cubic":
        if interior_knots is None:
            knots = np.array([(t_min + t_max) / 2.0])
        else:
            knots = np.sort(np.asarray(interior_knots, dtype=float))
        if np.any(knots <= t_min) or np.any(knots >= t_max):
            raise BasisError("interior knots must lie strictly inside the time range")
        _, counts = np.unique(knots, return_counts=True)
        if np.any(counts > _ORDER - 1):
            raise BasisError("interior knot multiplicity exceeds 3 for a cubic basis")
        p = _ORDER + len(knots)
    else:
        raise BasisError(f"unknown basis kind {kind!r}")

    L = int(fine_grid_length) if fine_grid_length is not None else max(DEFAULT_GRID_LENGTH, 10 * p)
    if L < 10 * p:
        raise BasisError(f"fine grid length {L} is below 10 * p = {10 * p}")

    grid = np.linspace(t_min, t_max, L)
    raw = _raw_basis(kind, knots, t_min, t_max, grid)
    g = (t_max - t_min) / (L - 1)
    gram = (L / g) * raw.T @ raw
    evals, evecs = np.linalg.eigh(gram)
    if evals[0] <= 1e-12 * evals[-1]:
        raise BasisError("degenerate knot configuration: basis is rank deficient on the grid")
    transform = (evecs / np.sqrt(evals)) @ evecs.T
    transform = 0.5 * (transform + transform.T)
    B = raw @ transform
    return SplineBasis(
        kind=kind,
        knots=np.asarray(knots, dtype=float),
        t_min=t_min,
        t_max=t_max,
        L=L,
        transform=transform,
        grid=grid,
        B=B,
    )


def evaluate(basis: SplineBasis, times) -> np.ndarray:
    """Transformed basis matrix (N x p) at ``times``; no extrapolation."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if times.size == 0:
        return np.zeros((0, basis.p))
    if times.shape == basis.grid.shape and np.array_equal(times, basis.grid):
        return basis.B.copy()
    tol = 1e-12 * max(1.0, basis.t_max - basis.t_min)
    if np.any(times < basis.t_min - tol) or np.any(times > basis.t_max + tol):
        bad = times[(times < basis.t_min - tol) | (times > basis.t_max + tol)][0]
        raise BasisError(
            f"time {bad!r} outside basis range [{basis.t_min}, {basis.t_max}]; "
            "extrapolation is not supported"
        )
    times = np.clip(times, basis.t_min, basis.t_max)
    return basis.raw(times) @ basis.transform


def curve_values(basis: SplineBasis, coefficients, times) -> np.ndarray:
    coefficients = np.asarray(coefficients, dtype=float)
    if coefficients.shape[0] != basis.p:
        raise BasisError(
            f"coefficient length {coefficients.shape[0]} does not match basis dimension {basis.p}"
        )
    return evaluate(basis, times) @ coefficients
