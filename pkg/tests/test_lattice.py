import math
from fractions import Fraction

import numpy as np
import pytest

from src.lab.lattice import (
    SquareMatrix,
    dual_matrix,
    dump_matrix,
    lll_reduce,
    minkowski_band,
    parse_matrix,
    short_vectors,
    successive_minima,
    transference_product,
    unit_ball_volume,
)
from src.utils.errors import BudgetExceededError, PreconditionError

F = Fraction


def random_integer_basis(rng, dim):
    while True:
        rows = rng.integers(-6, 7, size=(dim, dim)).tolist()
        g = SquareMatrix.from_rows(rows)
        if g.det() != 0:
            return g


def random_rational_matrix(rng, dim):
    while True:
        rows = [[F(int(rng.integers(-9, 10)), int(rng.integers(1, 5))) for _ in range(dim)] for _ in range(dim)]
        g = SquareMatrix.from_rows(rows)
        if g.det() != 0:
            return g


def test_minima_identity():
    assert successive_minima(SquareMatrix.identity(3), 3).lambdas == pytest.approx([1, 1, 1])


def test_minima_diagonal():
    report = successive_minima(SquareMatrix.diag([3, F(1, 3)]), 2)
    assert report.lambdas == pytest.approx([1 / 3, 3])
    assert not report.approximate


def test_minima_sheared_basis():
    # columns (1, 0) and (0.5, 0.1)
    basis = SquareMatrix.from_rows([[1, 0.5], [0, 0.1]])
    report = successive_minima(basis, 2)
    assert report.lambdas[0] == pytest.approx(0.2)
    assert report.lambdas[1] == pytest.approx(math.hypot(0.5, 0.1), rel=1e-9)
    assert np.allclose(np.abs(report.lattice_vectors[0]), [0.0, 0.2])


def test_minima_rejects_bad_input():
    with pytest.raises(PreconditionError):
        successive_minima(SquareMatrix.from_rows([[1, 2], [2, 4]]))
    with pytest.raises(PreconditionError):
        successive_minima(SquareMatrix.identity(2), 3)


@pytest.mark.parametrize("dim", [2, 3, 4])
def test_minkowski_second_theorem_band(dim, rng):
    low, high = minkowski_band(dim)
    for _ in range(25):
        g = random_integer_basis(rng, dim)
        product = math.prod(successive_minima(g, dim).lambdas)
        ratio = product / abs(float(g.det()))
        assert low * (1 - 1e-9) <= ratio <= high * (1 + 1e-9)


def test_unit_ball_volume():
    assert unit_ball_volume(2) == pytest.approx(math.pi)
    assert unit_ball_volume(3) == pytest.approx(4 * math.pi / 3)


def test_short_vectors_identity():
    found = short_vectors(SquareMatrix.identity(3), 1.5)
    assert len(found) == 2 * 3 + 4 * 3
    assert short_vectors(SquareMatrix.diag([2, 2]), 1) == []


def test_short_vectors_sheared_basis():
    basis = SquareMatrix.from_rows([[1, 0.5], [0, 0.1]])
    vectors = {tuple(np.round(v, 9)) for v, _ in short_vectors(basis, 0.55)}
    for expected in [(0.0, 0.2), (0.0, -0.2), (0.0, 0.4), (0.5, 0.1), (-0.5, -0.1), (0.5, -0.1)]:
        assert expected in vectors


def test_short_vectors_budget():
    with pytest.raises(BudgetExceededError) as info:
        short_vectors(SquareMatrix.identity(4), 6.0, budget=100)
    assert info.value.lambda1_lower_bound == pytest.approx(1.0)


def test_lll_transform(rng):
    g = random_integer_basis(rng, 4)
    reduced, transform = lll_reduce(g)
    assert np.allclose(reduced, g.to_numpy().astype(float) @ transform)
    assert abs(round(np.linalg.det(transform))) == 1


def test_dual_of_diagonal():
    g = SquareMatrix.diag([F(2), F(3), F(5)])
    assert dual_matrix(g).equals(SquareMatrix.diag([F(1, 5), F(1, 3), F(1, 2)]))


@pytest.mark.parametrize("dim", [2, 3, 4])
def test_dual_identities(dim, rng):
    for _ in range(10):
        a = random_rational_matrix(rng, dim)
        b = random_rational_matrix(rng, dim)
        assert dual_matrix(dual_matrix(a)).equals(a)
        assert dual_matrix(a @ b).equals(dual_matrix(a) @ dual_matrix(b))


def test_transference_band(rng):
    for dim in (2, 3):
        for _ in range(10):
            product = transference_product(random_rational_matrix(rng, dim))
            assert 1 - 1e-9 <= product <= dim + 1e-9


def test_matrix_text_round_trip():
    text = "1 1/2\n0 3  # comment\n"
    g = parse_matrix(text)
    assert g.exact
    assert parse_matrix(dump_matrix(g)).equals(g)
    assert not parse_matrix("1.5 0\n0 1\n").exact
