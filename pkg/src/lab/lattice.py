"""Geometry of numbers for unimodular-flow experiments.

The lattice of a square matrix ``g`` is ``g Z^dim``: it is generated by the
columns of ``g``. Successive minima are taken with respect to the closed
Euclidean unit ball.
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import gamma

from src.config import settings
from src.utils import exact
from src.utils.errors import BudgetExceededError, ConfigurationError, PreconditionError
from src.utils.workers import ordered_map

logger = logging.getLogger(__name__)

MAX_DIM = 8
LLL_TINY = 1e-10
LLL_MAX_ITERATIONS = 100000
NORM_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class SquareMatrix:
    """A square matrix with exact rational or binary64 entries.

    ``entries`` is an object array of Fractions when ``exact`` is set and a
    float64 array otherwise.
    """

    entries: np.ndarray
    exact: bool

    def __post_init__(self):
        a = self.entries
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ConfigurationError(f"matrix must be square, got shape {a.shape}")
        if a.shape[0] > MAX_DIM:
            raise ConfigurationError(f"dimension {a.shape[0]} exceeds the supported maximum {MAX_DIM}")
        a = exact.fraction_matrix(a.tolist()) if self.exact else np.asarray(a, dtype=float).copy()
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence], exact_mode: Optional[bool] = None) -> "SquareMatrix":
        """Build from nested rows; exact when every entry is an int, Fraction or ``p/q`` string."""
        flat = [v for row in rows for v in row]
        if exact_mode is None:
            exact_mode = all(isinstance(v, (int, Fraction, str, np.integer)) for v in flat)
        if exact_mode:
            return cls(exact.fraction_matrix(rows), True)
        return cls(np.array([[float(exact.to_fraction(v)) if isinstance(v, str) else float(v) for v in row]
                             for row in rows]), False)

    @classmethod
    def diag(cls, values: Sequence) -> "SquareMatrix":
        n = len(values)
        zero = 0 if all(isinstance(v, (int, Fraction)) for v in values) else 0.0
        return cls.from_rows([[values[i] if i == j else zero for j in range(n)] for i in range(n)])

    @classmethod
    def identity(cls, n: int) -> "SquareMatrix":
        return cls(exact.identity(n), True)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def to_numpy(self) -> np.ndarray:
        return self.entries.astype(float) if self.exact else self.entries.copy()

    def to_float(self) -> "SquareMatrix":
        return SquareMatrix(self.to_numpy(), False)

    def transpose(self) -> "SquareMatrix":
        return SquareMatrix(self.entries.T.copy(), self.exact)

    def det(self) -> Union[Fraction, float]:
        if self.exact:
            return exact.det(self.entries)
        return float(np.linalg.det(self.entries))

    def is_invertible(self) -> bool:
        if self.exact:
            return self.det() != 0
        return np.linalg.matrix_rank(self.entries) == self.dim

    def inverse(self) -> "SquareMatrix":
        if not self.is_invertible():
            raise PreconditionError("matrix is singular")
        if self.exact:
            return SquareMatrix(exact.inverse(self.entries), True)
        return SquareMatrix(np.linalg.inv(self.entries), False)

    def __matmul__(self, other: "SquareMatrix") -> "SquareMatrix":
        if self.exact and other.exact:
            return SquareMatrix(self.entries.dot(other.entries), True)
        return SquareMatrix(self.to_numpy() @ other.to_numpy(), False)

    def apply(self, v: Sequence) -> np.ndarray:
        """Matrix-vector product, exact when both sides are."""
        if self.exact and all(isinstance(x, (int, Fraction, np.integer)) for x in v):
            return self.entries.dot(np.array([exact.to_fraction(x) for x in v], dtype=object))
        return self.to_numpy() @ np.asarray(v, dtype=float)

    def equals(self, other: "SquareMatrix", rtol: float = 0.0) -> bool:
        if self.dim != other.dim:
            return False
        if self.exact and other.exact and rtol == 0.0:
            return all(a == b for a, b in zip(self.entries.flat, other.entries.flat))
        return bool(np.allclose(self.to_numpy(), other.to_numpy(), rtol=rtol, atol=rtol))

    def __repr__(self) -> str:
        return f"SquareMatrix(dim={self.dim}, exact={self.exact})"


def parse_matrix(text: str) -> SquareMatrix:
    """Rows of whitespace-separated entries; ``p/q`` and integer entries stay exact."""
    rows = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            rows.append(line.split())
    if not rows:
        raise ConfigurationError("empty matrix text")
    exact_mode = all(("." not in v and "e" not in v.lower()) for row in rows for v in row)
    if exact_mode:
        return SquareMatrix.from_rows(rows, exact_mode=True)
    return SquareMatrix.from_rows([[float(Fraction(v)) for v in row] for row in rows], exact_mode=False)


def dump_matrix(g: SquareMatrix) -> str:
    return "\n".join(" ".join(str(v) if g.exact else repr(float(v)) for v in row) for row in g.entries) + "\n"


def dual_matrix(g: SquareMatrix) -> SquareMatrix:
    """``sigma^-1 (g^T)^-1 sigma`` with sigma the antidiagonal permutation.

    Raises:
        PreconditionError: If g is singular
    """
    inv_t = g.inverse().transpose()
    return SquareMatrix(inv_t.entries[::-1, ::-1].copy(), g.exact)


def _gram_schmidt(b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    n = b.shape[0]
    bstar = np.zeros_like(b)
    mu = np.zeros((n, n))
    for i in range(n):
        bstar[i] = b[i]
        for j in range(i):
            bj = np.dot(bstar[j], bstar[j])
            mu[i, j] = 0.0 if bj < LLL_TINY ** 2 else np.dot(b[i], bstar[j]) / bj
            bstar[i] = bstar[i] - mu[i, j] * bstar[j]
    return bstar, mu


def lll_reduce(basis: SquareMatrix, delta: float = 0.75) -> Tuple[np.ndarray, np.ndarray]:
    """Floating-point LLL reduction of the generating columns.

    Args:
        basis: Lattice basis (columns are generators)
        delta: Lovasz parameter

    Returns:
        (reduced, transform) with ``reduced = basis @ transform`` and
        ``transform`` an integer unimodular matrix
    """
    b = basis.to_numpy().T.copy()
    n = b.shape[0]
    H = np.eye(n, dtype=np.int64)
    bstar, mu = _gram_schmidt(b)
    k = 1
    iterations = 0
    while k < n:
        iterations += 1
        if iterations > LLL_MAX_ITERATIONS:
            logger.warning(f"LLL stopped after {LLL_MAX_ITERATIONS} iterations in dimension {n}")
            break
        for j in range(k - 1, -1, -1):
            r = int(np.floor(0.5 + mu[k, j]))
            if r:
                b[k] -= r * b[j]
                H[k] -= r * H[j]
                mu[k, : j] -= r * mu[j, : j]
                mu[k, j] -= r
        if np.dot(bstar[k], bstar[k]) >= (delta - mu[k, k - 1] ** 2) * np.dot(bstar[k - 1], bstar[k - 1]):
            k += 1
        else:
            b[[k - 1, k]] = b[[k, k - 1]]
            H[[k - 1, k]] = H[[k, k - 1]]
            bstar, mu = _gram_schmidt(b)
            k = max(k - 1, 1)
    return b.T, H.T


@dataclass
class MinimaReport:
    """Successive minima with integer preimages of attaining vectors."""

    lambdas: List[float]
    attaining_vectors: List[Tuple[int, ...]]
    lattice_vectors: List[np.ndarray]
    search_radius: float
    approximate: bool = False
    lambda1_lower_bound: Optional[float] = None


@dataclass
class _Enumeration:
    vectors: List[np.ndarray] = field(default_factory=list)
    nodes: int = 0


def _enumerate_subtree(R: np.ndarray, r2: float, top: Optional[int], budget: int) -> _Enumeration:
    """Fincke-Pohst enumeration of ``c`` with ``|R c|^2 <= r2``.

    ``top`` fixes the last coordinate when the search is split across workers.
    """
    N = R.shape[0]
    c = np.zeros(N, dtype=np.int64)
    result = _Enumeration()

    def visit(i: int, partial: float):
        center = -float(np.dot(R[i, i + 1:], c[i + 1:])) / R[i, i]
        rem = r2 - partial
        if rem < 0:
            return
        span = math.sqrt(rem) / abs(R[i, i])
        if top is not None and i == N - 1:
            candidates = [top]
        else:
            candidates = range(math.ceil(center - span), math.floor(center + span) + 1)
        for x in candidates:
            result.nodes += 1
            if result.nodes > budget:
                raise BudgetExceededError(
                    "lattice enumeration budget exceeded",
                    budget=budget,
                    required=float(result.nodes),
                    lambda1_lower_bound=float(np.min(np.abs(np.diag(R)))),
                )
            c[i] = x
            value = partial + (R[i, i] * (x - center)) ** 2
            if value > r2:
                continue
            if i == 0:
                if np.any(c):
                    result.vectors.append(c.copy())
            else:
                visit(i - 1, value)
        c[i] = 0

    visit(N - 1, 0.0)
    return result


def _top_range(R: np.ndarray, r2: float) -> range:
    N = R.shape[0]
    span = math.sqrt(r2) / abs(R[N - 1, N - 1])
    return range(-math.floor(span), math.floor(span) + 1)


def _squared_norm(basis: SquareMatrix, c: np.ndarray):
    v = basis.apply([int(x) for x in c])
    if basis.exact:
        return sum(x * x for x in v), v
    return float(np.dot(v, v)), v


def short_vectors(
    basis: SquareMatrix,
    radius: float,
    budget: Optional[int] = None,
    threads: Optional[int] = None
) -> List[Tuple[np.ndarray, Tuple[int, ...]]]:
    """All nonzero lattice vectors of Euclidean norm at most ``radius``.

    Args:
        basis: Invertible basis (columns generate the lattice)
        radius: Search radius
        budget: Enumeration node budget
        threads: Worker count for splitting the top coefficient range

    Returns:
        (lattice vector, integer preimage) pairs sorted by norm, then by
        preimage

    Raises:
        BudgetExceededError: If the enumeration visits more nodes than allowed
    """
    if not basis.is_invertible():
        raise PreconditionError("short_vectors needs an invertible basis")
    if radius <= 0:
        return []
    budget = budget or settings.SHORT_VECTOR_BUDGET
    reduced, transform = lll_reduce(basis)
    R = np.linalg.cholesky(reduced.T @ reduced).T
    r2 = (radius * (1.0 + settings.RADIUS_INFLATION)) ** 2

    parts = ordered_map(
        lambda top: _enumerate_subtree(R, r2, top, budget),
        list(_top_range(R, r2)),
        threads,
    )
    nodes = sum(p.nodes for p in parts)
    if nodes > budget:
        raise BudgetExceededError(
            "lattice enumeration budget exceeded",
            budget=budget,
            required=float(nodes),
            lambda1_lower_bound=float(np.min(np.abs(np.diag(R)))),
        )

    if basis.exact:
        limit = exact.to_fraction(radius) ** 2
    else:
        limit = radius * radius * (1.0 + NORM_RTOL)
    found = []
    for part in parts:
        for c_reduced in part.vectors:
            c = transform @ c_reduced
            norm2, v = _squared_norm(basis, c)
            if norm2 <= limit:
                found.append((norm2, tuple(int(x) for x in c), v))
    found.sort(key=lambda item: (item[0], item[1]))
    logger.debug(f"Enumerated {len(found)} vectors within radius {radius} ({nodes} nodes)")
    return [(np.asarray(v, dtype=float), pre) for _, pre, v in found]


def _canonical(pre: Tuple[int, ...]) -> bool:
    first = next(x for x in pre if x != 0)
    return first > 0


def _greedy_minima(
    candidates: List[Tuple[float, Tuple[int, ...], np.ndarray]],
    k: int
) -> Tuple[List[float], List[Tuple[int, ...]], List[np.ndarray]]:
    lambdas, preimages, vectors = [], [], []
    for norm2, pre, v in candidates:
        if not _canonical(pre):
            continue
        if exact.rank(exact.fraction_matrix(preimages + [list(pre)])) == len(preimages) + 1:
            lambdas.append(math.sqrt(float(norm2)))
            preimages.append(list(pre))
            vectors.append(np.asarray(v, dtype=float))
            if len(preimages) == k:
                break
    return lambdas, [tuple(p) for p in preimages], vectors


def successive_minima(
    basis: SquareMatrix,
    k: Optional[int] = None,
    budget: Optional[int] = None,
    threads: Optional[int] = None
) -> MinimaReport:
    """Successive minima lambda_1..lambda_k of the lattice ``basis Z^dim``.

    The search radius is the k-th smallest column norm of an LLL-reduced
    basis, which bounds lambda_k from above. Vectors are scanned by norm and
    kept when they raise the exact rank of the span. Above the exact
    dimension cap the norms of the reduced basis are reported instead and the
    report is flagged approximate.

    Raises:
        PreconditionError: If the basis is singular or k is out of range
        BudgetExceededError: If enumeration exceeds the budget
    """
    dim = basis.dim
    k = dim if k is None else int(k)
    if not 1 <= k <= dim:
        raise PreconditionError(f"k must lie in [1, {dim}], got {k}")
    if not basis.is_invertible():
        raise PreconditionError("successive_minima needs an invertible basis")

    reduced, transform = lll_reduce(basis)
    norms = np.linalg.norm(reduced, axis=0)
    R = np.linalg.cholesky(reduced.T @ reduced).T
    lower = float(np.min(np.abs(np.diag(R))))

    if dim > settings.EXACT_DIM_CAP:
        logger.warning(f"Dimension {dim} is above the exact cap; reporting LLL norms as approximate minima")
        order = np.argsort(norms, kind="stable")[:k]
        return MinimaReport(
            lambdas=[float(norms[j]) for j in order],
            attaining_vectors=[tuple(int(x) for x in transform[:, j]) for j in order],
            lattice_vectors=[reduced[:, j].copy() for j in order],
            search_radius=float(np.sort(norms)[k - 1]),
            approximate=True,
            lambda1_lower_bound=lower,
        )

    radius = float(np.sort(norms)[k - 1])
    found = short_vectors(basis, radius, budget=budget, threads=threads)
    candidates = []
    for v, pre in found:
        norm2 = _squared_norm(basis, np.array(pre))[0]
        candidates.append((norm2, pre, v))
    lambdas, preimages, vectors = _greedy_minima(candidates, k)
    if len(lambdas) < k:
        # float rounding left a basis column just outside the inflated radius
        for j in np.argsort(norms, kind="stable"):
            pre = tuple(int(x) for x in transform[:, j])
            if not _canonical(pre):
                pre = tuple(-x for x in pre)
            candidates.append((_squared_norm(basis, np.array(pre))[0], pre, None))
        candidates.sort(key=lambda item: (item[0], item[1]))
        lambdas, preimages, vectors = _greedy_minima(
            [(n2, p, v if v is not None else basis.apply(list(p))) for n2, p, v in candidates], k
        )
    return MinimaReport(
        lambdas=lambdas,
        attaining_vectors=preimages,
        lattice_vectors=vectors,
        search_radius=radius,
        approximate=False,
        lambda1_lower_bound=lower,
    )


def unit_ball_volume(dim: int) -> float:
    return math.pi ** (dim / 2) / gamma(dim / 2 + 1)


def minkowski_band(dim: int) -> Tuple[float, float]:
    """Bounds of prod(lambda_i) / |det| from Minkowski's second theorem."""
    v = unit_ball_volume(dim)
    return 2 ** dim / (math.factorial(dim) * v), 2 ** dim / v


def transference_product(g: SquareMatrix) -> float:
    """``lambda_1(g) * lambda_dim(g*)``, bounded above and below in terms of dim only."""
    first = successive_minima(g, 1).lambdas[0]
    last = successive_minima(dual_matrix(g), g.dim).lambdas[-1]
    return first * last
