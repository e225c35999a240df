from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlfpca.basis import BasisError, SplineBasis, build_basis, curve_values, evaluate


def _orth_error(b):
    return np.max(np.abs((b.L / b.g) * b.B.T @ b.B - np.eye(b.p)))


@pytest.mark.parametrize(
    "kind,times,knots,p",
    [
        ("bspline-cubic", [0, 1], None, 5),
        ("bspline-cubic", [0, 1, 2, 3, 4], [1.0, 2.5], 6),
        ("bspline-cubic", [0, 10], [], 4),
        ("natural-cubic", [0, 2, 4, 8, 12], None, 5),
        ("natural-cubic", [0.0, 1.0], None, 2),
    ],
)
def test_orthonormal_on_grid(kind, times, knots, p):
    b = build_basis(kind, times, interior_knots=knots)
    assert b.p == p
    assert _orth_error(b) < 1e-10


def test_function_inner_products_scale():
    # g * sum (B th)(B th') = g^2 / L * delta under the grid normalisation
    b = build_basis("bspline-cubic", [0, 1])
    gram = b.g * b.B.T @ b.B
    np.testing.assert_allclose(gram, (b.g**2 / b.L) * np.eye(b.p), atol=1e-15)


def test_bspline_reproduces_cubics():
    b = build_basis("bspline-cubic", [0, 3], interior_knots=[1.0, 2.0])
    t = b.grid
    f = 1 - 2 * t + 0.5 * t**2 - 0.1 * t**3
    coef, *_ = np.linalg.lstsq(b.B, f, rcond=None)
    assert np.max(np.abs(b.B @ coef - f)) < 1e-9


def test_natural_spline_interpolates_and_reproduces_lines():
    knots = [0.0, 0.5, 2.0, 3.0]
    b = build_basis("natural-cubic", knots)
    f = 3.0 - 1.5 * b.grid
    coef, *_ = np.linalg.lstsq(b.B, f, rcond=None)
    assert np.max(np.abs(b.B @ coef - f)) < 1e-9
    # raw cardinal functions equal the identity at the knots
    np.testing.assert_allclose(b.raw(knots), np.eye(4), atol=1e-12)


def test_partition_of_unity():
    b = build_basis("bspline-cubic", [0, 1], interior_knots=[0.3, 0.6])
    np.testing.assert_allclose(b.raw(np.linspace(0, 1, 37)).sum(axis=1), 1.0, atol=1e-12)


def test_evaluate_rules():
    b = build_basis("bspline-cubic", [0, 1])
    assert evaluate(b, []).shape == (0, b.p)
    np.testing.assert_array_equal(evaluate(b, b.grid), b.B)
    np.testing.assert_allclose(evaluate(b, [0.5]), b.B[50:51], atol=1e-13)
    with pytest.raises(BasisError, match="extrapolation"):
        evaluate(b, [1.01])
    with pytest.raises(BasisError, match="extrapolation"):
        evaluate(b, [-1e-6])


def test_invalid_configurations():
    with pytest.raises(BasisError, match="strictly inside"):
        build_basis("bspline-cubic", [0, 1], interior_knots=[1.0])
    with pytest.raises(BasisError, match="multiplicity"):
        build_basis("bspline-cubic", [0, 1], interior_knots=[0.5] * 4)
    with pytest.raises(BasisError, match="10 \\* p"):
        build_basis("bspline-cubic", [0, 1], fine_grid_length=20)
    with pytest.raises(BasisError, match="two distinct"):
        build_basis("natural-cubic", [1.0, 1.0])
    with pytest.raises(BasisError, match="unknown"):
        build_basis("fourier", [0, 1])


def test_default_grid_length():
    assert build_basis("bspline-cubic", [0, 1]).L == 101
    many = build_basis("bspline-cubic", [0, 1], interior_knots=np.linspace(0.05, 0.95, 10))
    assert many.L == 10 * many.p


def test_coefficient_length_checked():
    b = build_basis("bspline-cubic", [0, 1])
    with pytest.raises(BasisError, match="does not match"):
        curve_values(b, np.ones(3), [0.5])


@given(st.lists(st.floats(0.05, 0.95), min_size=0, max_size=4), st.sampled_from(["bspline-cubic", "natural-cubic"]))
def test_dict_round_trip(knots, kind):
    knots = sorted(set(round(k, 3) for k in knots))
    if kind == "natural-cubic":
        b = build_basis(kind, [0.0, *knots, 1.0])
    else:
        b = build_basis(kind, [0.0, 1.0], interior_knots=knots)
    back = SplineBasis.from_dict(b.to_dict())
    np.testing.assert_array_equal(back.B, b.B)
    np.testing.assert_array_equal(back.transform, b.transform)
