"""Rational points near charts and the measure estimators built on them.

Covers the rectangle systems of the divergence argument (rational points
``(a/q, b/q)`` with ``|q g_j(a/q) - b_j| < eps_j``), the counting function of
the convergence argument, finite-horizon membership tests for the weighted
and multiplicative approximable sets, the dyadic cover of the
multiplicative case and the measure estimators (grid density, Monte Carlo,
exact rectangle unions).

All inequalities that define witnesses are strict. Boxes passed as the
region ``B`` of a rational-point count are treated as open.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from src.config import settings
from src.lab.approxfn import ApproxFunction, WeightSystem, eval_approx
from src.lab.dynamo import RationalWitness
from src.lab.manifold import Box, Chart, PolynomialChart, eval_chart
from src.utils import exact
from src.utils.context import get_seed
from src.utils.errors import BudgetExceededError, ConfigurationError, PreconditionError
from src.utils.workers import ordered_map

logger = logging.getLogger(__name__)

__all__ = [
    "Box",
    "RationalWitness",
    "UbiquityConfig",
    "DyadicCover",
    "CountResult",
    "CountNResult",
    "CoverRecord",
    "DyadicCoverReport",
    "MCEstimate",
    "UnionMeasure",
    "count_R",
    "neighborhood_union",
    "count_N",
    "near_point_boxes",
    "witness_denominators",
    "approximable_upto",
    "mult_approximable_upto",
    "minkowski_witness",
    "dyadic_cover_check",
    "ubiquity_density",
    "mc_measure",
    "rect_union_measure",
    "ubiquity_ratio_sum",
]

SCAN_CHUNK = 1 << 16
COVER_SLACK = math.e
CONFIDENCE = 0.95


@dataclass(frozen=True)
class UbiquityConfig:
    """Radii ``rho`` evaluated along the scales ``u_t`` with the constants k0 and lambda."""

    rho: Callable[[float], Sequence[float]]
    u_t: Tuple[int, ...]
    k0: float
    lam: float

    def __post_init__(self):
        object.__setattr__(self, "u_t", tuple(int(u) for u in self.u_t))
        if not self.u_t:
            raise ConfigurationError("a ubiquity configuration needs at least one scale")
        if any(b <= a for a, b in zip(self.u_t, self.u_t[1:])):
            raise ConfigurationError(f"scales must be strictly increasing, got {self.u_t}")
        for label, value in (("k0", self.k0), ("lambda", self.lam)):
            if not 0 < value < 1:
                raise ConfigurationError(f"{label} must lie in (0, 1), got {value}")

    def radii(self, index: int) -> np.ndarray:
        return np.asarray(self.rho(self.u_t[index]), dtype=float)

    def rho_decays(self) -> bool:
        """Whether max rho(u_t) is non-increasing and strictly smaller at the last scale."""
        sizes = [float(np.max(self.radii(k))) for k in range(len(self.u_t))]
        monotone = all(b <= a for a, b in zip(sizes, sizes[1:]))
        return monotone and (len(sizes) == 1 or sizes[-1] < sizes[0])


@dataclass(frozen=True)
class DyadicCover:
    """The family ``eps(t, k)`` for ``k`` in ``{0 <= k_i <= w0 t}``.

    ``eps_i = e^(-k_i)`` for the first n - 1 coordinates and
    ``eps_n = level * prod e^(k_i + 1)``, so the product over all n
    coordinates is ``e^(n-1) * level`` whatever k is.
    """

    t: int
    w0: float
    n: int
    level: float

    def __post_init__(self):
        if self.t < 1:
            raise PreconditionError(f"t must be at least 1, got {self.t}")
        if not self.w0 > 1:
            raise PreconditionError(f"w0 must exceed 1, got {self.w0}")
        if self.n < 1:
            raise PreconditionError(f"n must be positive, got {self.n}")

    @classmethod
    def at_level(cls, psi: ApproxFunction, t: int, w0: float, n: int, shift: int = 0) -> "DyadicCover":
        """Cover with ``level = psi(e^(t - shift))``."""
        return cls(t, w0, n, eval_approx(psi, math.exp(t - shift)))

    @property
    def k_max(self) -> int:
        return math.floor(self.w0 * self.t)

    @property
    def size(self) -> int:
        return (self.k_max + 1) ** (self.n - 1)

    def k_vectors(self) -> Iterator[Tuple[int, ...]]:
        return itertools.product(range(self.k_max + 1), repeat=self.n - 1)

    def k_array(self) -> np.ndarray:
        """All k vectors as a (size, n - 1) integer array, in ``k_vectors`` order."""
        if self.n == 1:
            return np.zeros((1, 0), dtype=np.int64)
        axes = np.meshgrid(*[np.arange(self.k_max + 1)] * (self.n - 1), indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=1)

    def eps_of_k(self, k: Sequence[int]) -> np.ndarray:
        k = np.asarray(k, dtype=float).reshape(-1, self.n - 1) if self.n > 1 else np.zeros((1, 0))
        eps = np.empty((k.shape[0], self.n))
        eps[:, : self.n - 1] = np.exp(-k)
        eps[:, self.n - 1] = self.level * np.exp(np.sum(k + 1.0, axis=1))
        return eps[0] if eps.shape[0] == 1 else eps

    def product_error(self, k: Sequence[int]) -> float:
        """Relative deviation of ``prod eps(t, k)`` from ``e^(n-1) * level``."""
        target = math.exp(self.n - 1) * self.level
        return abs(float(np.prod(self.eps_of_k(k))) - target) / target


# Rational points near the chart


@dataclass
class CountResult:
    count: int
    pairs: int
    witnesses: List[RationalWitness] = field(default_factory=list)
    uncertain: int = 0
    certified: bool = True


def _q_range(Q) -> range:
    Qf = exact.to_fraction(Q)
    return range(math.ceil(Qf / 2), math.floor(Qf) + 1)


def _open_numerators(q: int, lo: Fraction, hi: Fraction) -> range:
    """Integers a with ``lo < a / q < hi``."""
    return range(math.floor(q * lo) + 1, math.ceil(q * hi))


def _grid(ranges: Sequence[range]) -> np.ndarray:
    """Lexicographic product of integer ranges as an (N, len(ranges)) array."""
    axes = np.meshgrid(*[np.arange(r.start, r.stop, dtype=np.int64) for r in ranges], indexing="ij")
    return np.stack([a.ravel() for a in axes], axis=1)


def _exact_hit(form, a: Sequence[int], q: int, b: int, eps: Fraction) -> bool:
    """``|q P(a/q) - b| < eps`` in integer arithmetic."""
    L, D, terms = form
    num = 0
    for e, coeff in terms:
        term = coeff * q ** (D - sum(e))
        for ai, ei in zip(a, e):
            if ei:
                term *= int(ai) ** ei
        num += term
    den = L * q ** (D - 1)
    return abs(num - b * den) * eps.denominator < eps.numerator * den


def _count_level(c: Chart, q: int, eps: List[Fraction], lo: List[Fraction], hi: List[Fraction], collect: bool):
    ranges = [_open_numerators(q, l, h) for l, h in zip(lo, hi)]
    if any(len(r) == 0 for r in ranges):
        return 0, 0, [], 0
    A = _grid(ranges)
    values = q * c.dependent_many(A / q) if c.m else np.zeros((len(A), 0))
    forms = [p.integer_form() for p in c.polys] if isinstance(c, PolynomialChart) else None

    per_row = np.ones(len(A), dtype=np.int64)
    hits_by_j = []
    uncertain = 0
    for j, e in enumerate(eps):
        ef = float(e)
        v = values[:, j]
        start = np.floor(v - ef).astype(np.int64)
        width = math.floor(2 * ef) + 2
        cand = start[:, None] + np.arange(width)[None, :]
        margin = ef - np.abs(v[:, None] - cand)
        tol = settings.GUARD_BAND * np.maximum(1.0, np.abs(v))[:, None]
        hits = margin > tol
        close = np.abs(margin) <= tol
        if np.any(close):
            rows, cols = np.nonzero(close)
            uncertain += len(rows)
            for r, k in zip(rows, cols):
                if forms is not None:
                    hits[r, k] = _exact_hit(forms[j], A[r], q, int(cand[r, k]), e)
                else:
                    hits[r, k] = margin[r, k] > 0
        per_row *= hits.sum(axis=1)
        hits_by_j.append((cand, hits))

    witnesses = []
    if collect:
        for r in np.flatnonzero(per_row):
            choices = [Bj[r, hj[r]].tolist() for Bj, hj in hits_by_j]
            for b in itertools.product(*choices):
                witnesses.append(RationalWitness(q, tuple(int(v) for v in A[r]), tuple(int(v) for v in b)))
    return int(per_row.sum()), len(A), witnesses, uncertain


def count_R(c: Chart, Q, eps_J: Sequence, B: Box, collect: bool = False, threads: Optional[int] = None) -> CountResult:
    """Count ``(q, a, b)`` with ``Q/2 <= q <= Q``, ``a/q`` in B and ``|q g_j(a/q) - b_j| < eps_j``.

    Candidate b are screened in binary64; comparisons within the guard band
    are settled in integer arithmetic on polynomial charts and flagged as
    uncertain otherwise.

    Args:
        c: Chart
        Q: Upper end of the denominator range, at least 2
        eps_J: One bound in (0, 1) per dependent coordinate
        B: Open box of parameters, inside the chart domain
        collect: Also return the witnesses, ordered by q then a then b
        threads: Worker count override

    Returns:
        CountResult with the count, the number of (q, a) pairs examined and
        whether every comparison was decided exactly

    Raises:
        PreconditionError: On Q < 2, eps out of range or B outside the domain
        BudgetExceededError: If the number of (q, a) pairs exceeds the budget
    """
    if Q < 2:
        raise PreconditionError(f"Q must be at least 2, got {Q}")
    if len(eps_J) != c.m:
        raise PreconditionError(f"{c.name} has {c.m} dependent coordinates, got {len(eps_J)} bounds")
    if any(not 0 < e < 1 for e in eps_J):
        raise PreconditionError(f"eps_J must lie in (0, 1)^m, got {list(eps_J)}")
    if B.dim != c.d or not c.domain.contains_box(B):
        raise PreconditionError(f"box {B} is not inside the domain of {c.name}")

    lo, hi = B.fraction_bounds()
    eps = [exact.to_fraction(e) for e in eps_J]
    qs = list(_q_range(Q))
    pairs = sum(math.prod(len(_open_numerators(q, l, h)) for l, h in zip(lo, hi)) for q in qs)
    if pairs > settings.COUNT_BUDGET:
        raise BudgetExceededError(
            f"count_R on {c.name} needs {pairs} (q, a) pairs", budget=settings.COUNT_BUDGET, required=pairs
        )

    levels = ordered_map(lambda q: _count_level(c, q, eps, lo, hi, collect), qs, threads)
    result = CountResult(0, 0)
    for count, examined, witnesses, uncertain in levels:
        result.count += count
        result.pairs += examined
        result.witnesses.extend(witnesses)
        result.uncertain += uncertain
    result.certified = result.uncertain == 0 or c.is_polynomial
    if not result.certified:
        logger.warning(f"count_R on {c.name}: {result.uncertain} comparisons fell inside the guard band")
    logger.debug(f"count_R({c.name}, Q={float(Q)}): {result.count} witnesses over {result.pairs} pairs")
    return result


def neighborhood_union(
    c: Chart,
    Q,
    eps_J: Sequence,
    B: Box,
    rho: Sequence[float],
    threads: Optional[int] = None
) -> List[Box]:
    """Rectangles ``prod B(a_i/q, rho_i)`` around every rational point counted by count_R.

    Witnesses sharing ``(q, a)`` give one rectangle whose multiplicity is the
    number of distinct b.
    """
    rho = tuple(float(r) for r in np.broadcast_to(np.asarray(rho, dtype=float), (c.d,)))
    result = count_R(c, Q, eps_J, B, collect=True, threads=threads)
    grouped: Dict[Tuple[int, Tuple[int, ...]], int] = {}
    for w in result.witnesses:
        key = (w.q, w.a)
        grouped[key] = grouped.get(key, 0) + 1
    boxes = [Box(tuple(ai / q for ai in a), rho, multiplicity=mult) for (q, a), mult in grouped.items()]
    merged = sum(1 for b in boxes if b.multiplicity > 1)
    if merged:
        logger.info(f"neighborhood_union: {merged} rectangles carry more than one b")
    return boxes


@dataclass
class CountNResult:
    count: int
    exact: bool


def _check_near_args(c: Chart, Delta: Box, eps: Sequence[float], t: float) -> None:
    if len(eps) != c.n:
        raise PreconditionError(f"{c.name} needs {c.n} bounds, got {len(eps)}")
    if Delta.dim != c.d or not c.domain.contains_box(Delta):
        raise PreconditionError(f"box {Delta} is not inside the domain of {c.name}")
    required = math.exp(t * (c.d + 1))
    if required > settings.COUNT_BUDGET:
        raise BudgetExceededError(
            f"counting near {c.name} at t={t} needs about {required:.3g} candidates",
            budget=settings.COUNT_BUDGET,
            required=int(required),
        )


def _near_points(c: Chart, Delta: Box, eps: Sequence[float], t: float) -> Iterator[Tuple[int, Tuple[int, ...], int, bool]]:
    """Yield ``(q, p_I, number of p_J, enclosure exact)`` for every admissible q and p_I."""
    layout = c.layout
    scale = math.exp(-t)
    h = [Fraction(float(e) * scale) for e in eps]
    h_I = [h[pos] for pos in layout.variable_position]
    h_J = [h[pos] for pos in layout.dependent_position]
    lo, hi = Delta.fraction_bounds()

    for q in range(1, math.floor(math.exp(t)) + 1):
        ranges = [_open_numerators(q, l - hv, u + hv) for l, u, hv in zip(lo, hi, h_I)]
        for p_I in itertools.product(*ranges):
            x_lo = [max(l, Fraction(p, q) - hv) for l, p, hv in zip(lo, p_I, h_I)]
            x_hi = [min(u, Fraction(p, q) + hv) for u, p, hv in zip(hi, p_I, h_I)]
            combos = 1
            exact_here = True
            for j in range(c.m):
                if isinstance(c, PolynomialChart):
                    g_lo, g_hi, enclosure_exact = c.polys[j].interval(x_lo, x_hi)
                else:
                    box = Box.from_bounds([float(v) for v in x_lo], [float(v) for v in x_hi])
                    g_lo, g_hi, enclosure_exact = c.dependent_range(j, box)
                    g_lo, g_hi = Fraction(g_lo), Fraction(g_hi)
                exact_here = exact_here and enclosure_exact
                combos *= len(_open_numerators(q, g_lo - h_J[j], g_hi + h_J[j]))
                if not combos:
                    break
            yield q, p_I, combos, exact_here


def count_N(c: Chart, Delta: Box, eps: Sequence[float], t: float) -> CountNResult:
    """Count ``(p, q)``, ``1 <= q <= e^t``, such that some x in Delta has
    ``|F_i(x) - p_i/q| < eps_i / e^t`` for every coordinate.

    For each independent numerator the admissible x form a box; the
    dependent numerators are counted against an enclosure of g_j over it.
    The count is exact when the chart has one dependent coordinate with an
    exact enclosure, and an over-count otherwise.

    Raises:
        PreconditionError: If Delta is outside the domain or eps has the wrong length
        BudgetExceededError: If e^(t(d+1)) exceeds the budget
    """
    _check_near_args(c, Delta, eps, t)
    is_exact = c.m <= 1
    total = 0
    for _, _, combos, exact_here in _near_points(c, Delta, eps, t):
        total += combos
        is_exact = is_exact and exact_here
    if not is_exact:
        logger.debug(f"count_N on {c.name} used interval enclosures; the count is an upper bound")
    return CountNResult(total, is_exact)


def near_point_boxes(c: Chart, Delta: Box, eps: Sequence[float], t: float, radii: Sequence[float]) -> List[Box]:
    """Boxes ``prod (p_i/q - r_i, p_i/q + r_i)`` over the points counted by count_N.

    One box per ``(q, p_I)`` admitting at least one ``p_J``; the multiplicity
    records how many ``p_J`` it stands for.
    """
    _check_near_args(c, Delta, eps, t)
    radii = tuple(float(r) for r in np.broadcast_to(np.asarray(radii, dtype=float), (c.d,)))
    return [
        Box(tuple(p / q for p in p_I), radii, multiplicity=combos)
        for q, p_I, combos, _ in _near_points(c, Delta, eps, t)
        if combos
    ]


# Finite-horizon membership


def _chart_point(c: Chart, x: Sequence) -> np.ndarray:
    return np.asarray(eval_chart(c, [float(v) for v in x]), dtype=float)


def _witness_at(c: Chart, y: np.ndarray, q: int) -> RationalWitness:
    p = np.rint(q * y).astype(np.int64)
    return RationalWitness(
        int(q),
        tuple(int(p[pos]) for pos in c.layout.I),
        tuple(int(p[pos]) for pos in c.layout.J),
    )


def _scan(y: np.ndarray, q_lo: int, q_hi: int, accept: Callable[[np.ndarray, np.ndarray], np.ndarray],
          first_only: bool) -> np.ndarray:
    if q_lo < 1 or q_lo > q_hi:
        raise PreconditionError(f"need 1 <= q_lo <= q_hi, got [{q_lo}, {q_hi}]")
    found = []
    for start in range(q_lo, q_hi + 1, SCAN_CHUNK):
        qs = np.arange(start, min(start + SCAN_CHUNK, q_hi + 1), dtype=np.int64)
        qy = qs[:, None] * y[None, :]
        dist = np.abs(qy - np.rint(qy))
        hits = qs[accept(qs, dist)]
        if len(hits):
            found.append(hits)
            if first_only:
                break
    return np.concatenate(found) if found else np.zeros(0, dtype=np.int64)


def _weighted_accept(c: Chart, ws: WeightSystem) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    if ws.n != c.n:
        raise PreconditionError(f"{c.name} needs {c.n} approximation functions, got {ws.n}")

    def accept(qs: np.ndarray, dist: np.ndarray) -> np.ndarray:
        bounds = np.vstack([psi.values(qs) for psi in ws.psis]).T
        return np.all(dist < bounds, axis=1)

    return accept


def witness_denominators(c: Chart, x: Sequence, ws: WeightSystem, q_lo: int, q_hi: int) -> np.ndarray:
    """Every q in ``[q_lo, q_hi]`` with ``||q y_i|| < psi_i(q)`` for all i, ``y = F(x)``."""
    accept = _weighted_accept(c, ws)
    return _scan(_chart_point(c, x), q_lo, q_hi, accept, first_only=False)


def approximable_upto(c: Chart, x: Sequence, ws: WeightSystem, q_lo: int, q_hi: int) -> Optional[RationalWitness]:
    """First weighted witness with denominator in ``[q_lo, q_hi]``, if any."""
    accept = _weighted_accept(c, ws)
    y = _chart_point(c, x)
    hits = _scan(y, q_lo, q_hi, accept, first_only=True)
    return _witness_at(c, y, hits[0]) if len(hits) else None


def mult_approximable_upto(
    c: Chart,
    x: Sequence,
    psi: ApproxFunction,
    q_lo: int,
    q_hi: int
) -> Optional[RationalWitness]:
    """First q in range with ``prod_i ||q y_i|| < psi(q)``, if any."""
    y = _chart_point(c, x)

    def accept(qs: np.ndarray, dist: np.ndarray) -> np.ndarray:
        return np.prod(dist, axis=1) < psi.values(qs)

    hits = _scan(y, q_lo, q_hi, accept, first_only=True)
    return _witness_at(c, y, hits[0]) if len(hits) else None


def minkowski_witness(y: Sequence, eps: Sequence, Q) -> Optional[RationalWitness]:
    """Smallest ``q <= Q`` with ``|q y_i - p_i| < eps_i`` for all i.

    Minkowski's linear forms theorem guarantees a solution once
    ``Q * prod(eps) >= 1`` and every ``eps_i <= 1``; the search is the
    certificate. Exact when y, eps and Q are rationals.

    Returns:
        Witness with ``a = p`` and empty ``b``, or None if the search fails

    Raises:
        PreconditionError: If ``Q * prod(eps) < 1``
    """
    if len(y) != len(eps):
        raise PreconditionError("y and eps differ in length")
    rational = all(isinstance(v, (int, Fraction)) for v in (*y, *eps, Q))
    if rational:
        if Fraction(Q) * math.prod(Fraction(e) for e in eps) < 1:
            raise PreconditionError("Q * prod(eps) < 1: no solution is guaranteed")
        for q in range(1, math.floor(Fraction(Q)) + 1):
            p = [round(q * Fraction(v)) for v in y]
            if all(abs(q * Fraction(v) - pi) < Fraction(e) for v, pi, e in zip(y, p, eps)):
                return RationalWitness(q, tuple(int(v) for v in p), ())
        return None

    if float(Q) * math.prod(float(e) for e in eps) < 1:
        raise PreconditionError("Q * prod(eps) < 1: no solution is guaranteed")
    yv = np.asarray(y, dtype=float)
    ev = np.asarray(eps, dtype=float)

    def accept(qs: np.ndarray, dist: np.ndarray) -> np.ndarray:
        return np.all(dist < ev, axis=1)

    hits = _scan(yv, 1, math.floor(float(Q)), accept, first_only=True)
    if not len(hits):
        return None
    q = int(hits[0])
    return RationalWitness(q, tuple(int(v) for v in np.rint(q * yv)), ())


# Multiplicative dyadic cover


@dataclass
class CoverRecord:
    """One multiplicative witness at level t and how the cover accounts for it."""

    q: int
    p: Tuple[int, ...]
    residuals: Tuple[float, ...]
    in_tilde: bool
    k: Optional[Tuple[int, ...]] = None
    slack: Optional[float] = None
    min_slack: Optional[float] = None


@dataclass
class DyadicCoverReport:
    t: int
    w0: float
    level: float
    slack_bound: float
    records: List[CoverRecord]

    @property
    def counterexamples(self) -> List[CoverRecord]:
        return [r for r in self.records if not r.in_tilde and r.k is None]

    @property
    def passed(self) -> bool:
        return not self.counterexamples

    @property
    def max_slack(self) -> Optional[float]:
        """Largest over witnesses of the smallest slack any k achieves."""
        slacks = [r.min_slack if r.min_slack is not None else r.slack for r in self.records if not r.in_tilde]
        slacks = [s for s in slacks if s is not None]
        return max(slacks) if slacks else None


def _slacks(delta: np.ndarray, q: int, t: int, eps: np.ndarray) -> np.ndarray:
    """``max_i delta_i e^t / (q eps_i)`` for each row of eps."""
    return np.max(delta[None, :] * math.exp(t) / (q * np.atleast_2d(eps)), axis=1)


def dyadic_cover_check(
    c: Chart,
    x: Sequence,
    psi: ApproxFunction,
    t: int,
    w0: float,
    exhaustive: bool = True
) -> DyadicCoverReport:
    """Check that every multiplicative witness at level t is covered.

    Witnesses are ``(q, p)`` with ``e^(t-1) < q <= e^t``,
    ``prod |q y_i - p_i| < psi(e^(t-1))`` and ``max |q y_i - p_i| < 1``.
    A witness whose smallest residual is below ``e^(-t w0)`` belongs to the
    small-residual set and needs no cover; any other must satisfy
    ``|y_i - p_i/q| < e * eps_i(t, k) / e^t`` for some k. The canonical
    ``k_i = floor(-log |q y_i - p_i|)`` is tried first and the whole family
    searched if it fails.

    Args:
        c: Chart
        x: Parameter point
        psi: Approximation function
        t: Level, at least 1
        w0: Exponent of the small-residual threshold, above 1
        exhaustive: Also measure the smallest slack over the whole family

    Returns:
        Report with one record per witness
    """
    cover = DyadicCover.at_level(psi, t, w0, c.n, shift=1)
    y = _chart_point(c, x)
    n = c.n
    q_lo = math.floor(math.exp(t - 1)) + 1
    q_hi = math.floor(math.exp(t))
    threshold = math.exp(-t * w0)
    ks = cover.k_array() if exhaustive else None
    all_eps = np.atleast_2d(cover.eps_of_k(ks)) if exhaustive else None

    records: List[CoverRecord] = []
    for q in range(q_lo, q_hi + 1):
        qy = q * y
        base = np.floor(qy)
        for choice in itertools.product((0, 1), repeat=n):
            p = base + np.asarray(choice)
            delta = np.abs(qy - p)
            if np.max(delta) >= 1 or np.prod(delta) >= cover.level:
                continue
            record = CoverRecord(q, tuple(int(v) for v in p), tuple(float(v) for v in delta), bool(np.min(delta) < threshold))
            if not record.in_tilde:
                k = tuple(int(math.floor(-math.log(d))) for d in delta[: n - 1])
                slack = float(_slacks(delta, q, t, cover.eps_of_k(k))[0])
                if slack < COVER_SLACK:
                    record.k, record.slack = k, slack
                if all_eps is not None:
                    slacks = _slacks(delta, q, t, all_eps)
                    best = int(np.argmin(slacks))
                    record.min_slack = float(slacks[best])
                    if record.k is None and slacks[best] < COVER_SLACK:
                        record.k, record.slack = tuple(int(v) for v in ks[best]), float(slacks[best])
            records.append(record)

    report = DyadicCoverReport(t, w0, cover.level, COVER_SLACK, records)
    if not report.passed:
        logger.warning(f"dyadic cover at t={t}: {len(report.counterexamples)} uncovered witnesses for x={list(x)}")
    return report


# Measures


def ubiquity_density(boxes: Sequence[Box], B: Box, grid: int) -> float:
    """Fraction of the cell centers of a regular grid on B covered by the closed boxes."""
    if grid < 10:
        raise PreconditionError(f"grid must have at least 10 points per dimension, got {grid}")
    d = B.dim
    lo, hi = B.lo, B.hi
    step = (hi - lo) / grid
    covered = np.zeros((grid,) * d, dtype=bool)
    for box in boxes:
        if box.dim != d:
            raise PreconditionError("box dimension differs from the region")
        first = np.ceil((box.lo - lo) / step - 0.5).astype(int)
        last = np.floor((box.hi - lo) / step - 0.5).astype(int)
        first = np.clip(first, 0, grid)
        last = np.clip(last, -1, grid - 1)
        if np.any(last < first):
            continue
        covered[tuple(slice(f, l + 1) for f, l in zip(first, last))] = True
    return float(covered.mean())


@dataclass
class MCEstimate:
    estimate: float
    lower: float
    upper: float
    hits: int
    samples: int
    volume: float

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def mc_measure(
    predicate: Callable,
    B: Box,
    samples: int,
    seed: Optional[int] = None,
    vectorized: bool = False,
    stream: int = 0,
    threads: Optional[int] = None
) -> MCEstimate:
    """Monte Carlo estimate of the measure of ``{x in B : predicate(x)}``.

    Samples are drawn in fixed blocks, block b from a Philox generator keyed
    by ``(seed, stream, b)``, so the estimate does not depend on the worker
    count. The interval is the normal approximation to the binomial at 95%.

    Args:
        predicate: Callable on a point, or on an (N, d) array when ``vectorized``
        B: Sampling box
        samples: Number of samples, at least 100
        seed: Base seed; defaults to the run context, then DEFAULT_SEED
        vectorized: Whether the predicate takes a whole block at once
        stream: Stream index separating estimators that share a seed
        threads: Worker count override
    """
    if samples < 100:
        raise PreconditionError(f"mc_measure needs at least 100 samples, got {samples}")
    if seed is None:
        seed = get_seed() if get_seed() is not None else settings.DEFAULT_SEED
    block = settings.MC_BLOCK_SIZE
    lo, hi = B.lo, B.hi

    def run_block(b: int) -> int:
        size = min(block, samples - b * block)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, b])))
        pts = lo + (hi - lo) * rng.random((size, B.dim))
        if vectorized:
            return int(np.count_nonzero(predicate(pts)))
        return sum(1 for pt in pts if predicate(pt))

    hits = sum(ordered_map(run_block, range(math.ceil(samples / block)), threads))
    frac = hits / samples
    half = norm.ppf(0.5 + CONFIDENCE / 2) * math.sqrt(frac * (1 - frac) / samples)
    vol = B.volume
    return MCEstimate(frac * vol, max(0.0, frac - half) * vol, min(1.0, frac + half) * vol, hits, samples, vol)


@dataclass
class UnionMeasure:
    measure: float
    exact: bool
    method: str


def _union_length(lo: np.ndarray, hi: np.ndarray) -> float:
    if not len(lo):
        return 0.0
    order = np.argsort(lo, kind="stable")
    lo, hi = lo[order], hi[order]
    reach = np.maximum.accumulate(hi)
    prev = np.concatenate(([-np.inf], reach[:-1]))
    return float(np.sum(np.maximum(0.0, reach - np.maximum(lo, prev))))


def rect_union_measure(boxes: Sequence[Box], B: Box, grid: int = 256) -> UnionMeasure:
    """Measure of ``B`` intersected with the union of the boxes.

    Exact by sweeping in dimensions 1 and 2 and by coordinate compression
    in higher dimensions while the compressed grid fits the rectangle
    budget; beyond that a regular grid estimate is returned and flagged.

    Raises:
        BudgetExceededError: If there are more boxes than the rectangle budget
    """
    if len(boxes) > settings.RECT_BUDGET:
        raise BudgetExceededError(
            f"{len(boxes)} rectangles exceed the budget", budget=settings.RECT_BUDGET, required=len(boxes)
        )
    clipped = [r for r in (box.intersect(B) for box in boxes) if r is not None]
    if not clipped:
        return UnionMeasure(0.0, True, "empty")
    lo = np.array([r.lo for r in clipped])
    hi = np.array([r.hi for r in clipped])
    d = B.dim

    if d == 1:
        return UnionMeasure(_union_length(lo[:, 0], hi[:, 0]), True, "sweep")

    if d == 2:
        edges = np.unique(np.concatenate([lo[:, 0], hi[:, 0]]))
        total = 0.0
        for left, right in zip(edges[:-1], edges[1:]):
            active = (lo[:, 0] <= left) & (hi[:, 0] >= right)
            if np.any(active):
                total += (right - left) * _union_length(lo[active, 1], hi[active, 1])
        return UnionMeasure(total, True, "sweep")

    coords = [np.unique(np.concatenate([lo[:, i], hi[:, i]])) for i in range(d)]
    cells = math.prod(len(cs) - 1 for cs in coords)
    if cells <= settings.RECT_BUDGET:
        covered = np.zeros(tuple(len(cs) - 1 for cs in coords), dtype=bool)
        for l, h in zip(lo, hi):
            covered[tuple(slice(np.searchsorted(cs, a), np.searchsorted(cs, b))
                          for cs, a, b in zip(coords, l, h))] = True
        widths = np.ix_(*[np.diff(cs) for cs in coords])
        volume = np.ones(covered.shape)
        for w in widths:
            volume = volume * w
        return UnionMeasure(float(np.sum(volume[covered])), True, "compression")

    logger.warning(f"rect_union_measure: {cells} compressed cells exceed the budget; using a {grid}-point grid")
    return UnionMeasure(ubiquity_density(clipped, B, grid) * B.volume, False, "grid")


def ubiquity_ratio_sum(ws: WeightSystem, t_list: Sequence[int], d: int = 1) -> float:
    """``sum_t prod_{i <= d} Psi_i(2^t) / rho_i(2^t)`` with ``Psi_i(q) = psi_i(q) / (2q)``.

    ``rho_1(q) = (q psi_2(q) ... psi_n(q))^-1 / q`` and ``rho_i(q) = psi_i(q) / q``
    for ``2 <= i <= d``; each term equals ``2^(t-d) psi_1(2^t) ... psi_n(2^t)``.
    """
    if not 1 <= d <= ws.n:
        raise PreconditionError(f"d must lie in [1, {ws.n}], got {d}")
    total = 0.0
    for t in t_list:
        q = 2.0 ** t
        psi = ws.at(q)
        rho = psi[:d] / q
        rho[0] = 1.0 / (q * float(np.prod(psi[1:]))) / q
        Psi = psi[:d] / (2 * q)
        total += float(np.prod(Psi / rho))
    return total
