"""Exact linear algebra over the rationals.

Matrices are numpy object arrays of ``fractions.Fraction``. Determinants use
fraction-free Bareiss elimination; rank, inverses and solves use plain
Gaussian elimination over Fractions.
"""

from fractions import Fraction
from math import gcd
from typing import Iterable, Sequence, Union

import numpy as np

Number = Union[int, float, Fraction]


def to_fraction(value: Number) -> Fraction:
    """Exact rational value of an int, Fraction, float or ``p/q`` string."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, (int, np.integer)):
        return Fraction(int(value))
    if isinstance(value, str):
        return Fraction(value.strip())
    return Fraction(float(value))


def fraction_matrix(rows: Iterable[Sequence[Number]]) -> np.ndarray:
    """Object array of Fractions from nested sequences."""
    data = [[to_fraction(v) for v in row] for row in rows]
    out = np.empty((len(data), len(data[0]) if data else 0), dtype=object)
    for i, row in enumerate(data):
        for j, v in enumerate(row):
            out[i, j] = v
    return out


def identity(n: int) -> np.ndarray:
    return fraction_matrix([[int(i == j) for j in range(n)] for i in range(n)])


def rank(matrix: np.ndarray) -> int:
    """Exact rank by Gaussian elimination over the rationals."""
    a = [[to_fraction(v) for v in row] for row in matrix]
    if not a:
        return 0
    n_rows, n_cols = len(a), len(a[0])
    r = 0
    for col in range(n_cols):
        pivot = next((i for i in range(r, n_rows) if a[i][col] != 0), None)
        if pivot is None:
            continue
        a[r], a[pivot] = a[pivot], a[r]
        for i in range(r + 1, n_rows):
            if a[i][col] != 0:
                f = a[i][col] / a[r][col]
                a[i] = [u - f * v for u, v in zip(a[i], a[r])]
        r += 1
        if r == n_rows:
            break
    return r


def det(matrix: np.ndarray) -> Fraction:
    """Exact determinant by Bareiss elimination on a common-denominator copy."""
    n = matrix.shape[0]
    if n == 0:
        return Fraction(1)
    scale = Fraction(1)
    a = []
    for row in matrix:
        fr = [to_fraction(v) for v in row]
        den = 1
        for v in fr:
            den = den * v.denominator // gcd(den, v.denominator)
        scale /= den
        a.append([int(v * den) for v in fr])
    sign = 1
    prev = 1
    for k in range(n - 1):
        if a[k][k] == 0:
            swap = next((i for i in range(k + 1, n) if a[i][k] != 0), None)
            if swap is None:
                return Fraction(0)
            a[k], a[swap] = a[swap], a[k]
            sign = -sign
        for i in range(k + 1, n):
            for j in range(k + 1, n):
                a[i][j] = (a[i][j] * a[k][k] - a[i][k] * a[k][j]) // prev
        prev = a[k][k]
    return sign * Fraction(a[n - 1][n - 1]) * scale


def inverse(matrix: np.ndarray) -> np.ndarray:
    """Exact inverse by Gauss-Jordan elimination.

    Raises:
        ZeroDivisionError: If the matrix is singular
    """
    n = matrix.shape[0]
    x = fraction_matrix(matrix.tolist())
    y = identity(n)
    for i in range(n):
        pivot = next((j for j in range(i, n) if x[j, i] != 0), None)
        if pivot is None:
            raise ZeroDivisionError("matrix is not invertible")
        if pivot != i:
            x[[i, pivot]] = x[[pivot, i]]
            y[[i, pivot]] = y[[pivot, i]]
        p = x[i, i]
        x[i, :] = x[i, :] / p
        y[i, :] = y[i, :] / p
        for j in range(n):
            if j != i and x[j, i] != 0:
                f = x[j, i]
                x[j, :] = x[j, :] - f * x[i, :]
                y[j, :] = y[j, :] - f * y[i, :]
    return y


def solve(matrix: np.ndarray, rhs: Sequence[Number]) -> np.ndarray:
    """Exact solution of ``matrix @ z = rhs``."""
    b = fraction_matrix([[v] for v in rhs])
    return (inverse(matrix) @ b)[:, 0]
