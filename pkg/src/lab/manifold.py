"""Nondegenerate charts in Monge and block form.

A chart is a map ``x -> (x_1, g_1(x_1), x_2, g_2(x_1, x_2), ...)`` on an
axis-aligned box U of R^d. Coordinates are interleaved block by block: the
independent variables of block k occupy the positions I(k) and the
dependent coordinates of g_k the positions J(k) right after them. The Monge
form (x, f(x)) is the single-block case.

Positions and variable indices are 0-based throughout the code.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations_with_replacement
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import settings
from src.utils import exact
from src.utils.errors import ConfigurationError, PreconditionError

logger = logging.getLogger(__name__)

# Box bounds given as decimals are read back as the rationals they name
BOUND_DENOMINATOR = 10**12

Exponent = Tuple[int, ...]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``prod_i [center_i - radii_i, center_i + radii_i]``.

    ``multiplicity`` counts how many witnesses produced the same rectangle
    when boxes come out of a rectangle system.
    """

    center: Tuple[float, ...]
    radii: Tuple[float, ...]
    multiplicity: int = 1

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        if len(self.center) != len(self.radii):
            raise ConfigurationError("box center and radii differ in dimension")
        if any(not r > 0 for r in self.radii):
            raise ConfigurationError(f"box radii must be positive, got {self.radii}")

    @classmethod
    def from_bounds(cls, lo: Sequence[float], hi: Sequence[float]) -> "Box":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        return cls(tuple((lo + hi) / 2), tuple((hi - lo) / 2))

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.radii)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.radii)

    @property
    def volume(self) -> float:
        return float(np.prod(2 * np.asarray(self.radii)))

    def contains(self, x: Sequence, closed: bool = True) -> bool:
        x = np.asarray([float(v) for v in x])
        if closed:
            return bool(np.all(x >= self.lo) and np.all(x <= self.hi))
        return bool(np.all(x > self.lo) and np.all(x < self.hi))

    def contains_box(self, other: "Box") -> bool:
        return bool(np.all(other.lo >= self.lo) and np.all(other.hi <= self.hi))

    def shrink(self, r: Sequence[float]) -> "Box":
        """The set V^(r) of centers whose r-box stays inside this box."""
        r = np.broadcast_to(np.asarray(r, dtype=float), (self.dim,))
        radii = np.asarray(self.radii) - r
        if np.any(radii <= 0):
            raise PreconditionError(f"shrinking by {r.tolist()} empties the box")
        return Box(self.center, tuple(radii))

    def intersect(self, other: "Box") -> Optional["Box"]:
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        if np.any(hi <= lo):
            return None
        return Box.from_bounds(lo, hi)

    def fraction_bounds(self) -> Tuple[List[Fraction], List[Fraction]]:
        """Bounds as rationals, snapped to the nearest fraction with denominator at most 10^12."""
        lo = [Fraction(float(v)).limit_denominator(BOUND_DENOMINATOR) for v in self.lo]
        hi = [Fraction(float(v)).limit_denominator(BOUND_DENOMINATOR) for v in self.hi]
        return lo, hi


@dataclass(frozen=True)
class IndexLayout:
    """Index sets of a block layout ``[(d_1, m_1), ..., (d_s, m_s)]``.

    ``I_k[k]``/``J_k[k]`` hold the positions of block k; ``I``/``J`` their
    unions. ``variable_position[i]`` is the position of variable x_i and
    ``dependent_position[j]`` that of the j-th dependent coordinate.
    """

    blocks: Tuple[Tuple[int, int], ...]
    I_k: Tuple[Tuple[int, ...], ...] = field(init=False)
    J_k: Tuple[Tuple[int, ...], ...] = field(init=False)
    variable_block: Tuple[int, ...] = field(init=False)
    dependent_block: Tuple[int, ...] = field(init=False)

    def __post_init__(self):
        blocks = tuple((int(dk), int(mk)) for dk, mk in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if not blocks:
            raise ConfigurationError("a layout needs at least one block")
        for k, (dk, mk) in enumerate(blocks):
            if dk < 1:
                raise ConfigurationError(f"block {k + 1} has no independent variables")
            if mk < 0 or (mk == 0 and k != len(blocks) - 1):
                raise ConfigurationError(f"only the last block may have no dependent coordinates (block {k + 1})")
        I_k, J_k, vb, db = [], [], [], []
        pos = 0
        for k, (dk, mk) in enumerate(blocks):
            I_k.append(tuple(range(pos, pos + dk)))
            pos += dk
            J_k.append(tuple(range(pos, pos + mk)))
            pos += mk
            vb.extend([k] * dk)
            db.extend([k] * mk)
        object.__setattr__(self, "I_k", tuple(I_k))
        object.__setattr__(self, "J_k", tuple(J_k))
        object.__setattr__(self, "variable_block", tuple(vb))
        object.__setattr__(self, "dependent_block", tuple(db))

    @classmethod
    def monge(cls, d: int, m: int) -> "IndexLayout":
        return cls(((d, m),))

    @property
    def s(self) -> int:
        return len(self.blocks)

    @property
    def d(self) -> int:
        return sum(dk for dk, _ in self.blocks)

    @property
    def m(self) -> int:
        return sum(mk for _, mk in self.blocks)

    @property
    def n(self) -> int:
        return self.d + self.m

    @property
    def is_monge(self) -> bool:
        return self.s == 1

    @property
    def I(self) -> Tuple[int, ...]:
        return tuple(p for block in self.I_k for p in block)

    @property
    def J(self) -> Tuple[int, ...]:
        return tuple(p for block in self.J_k for p in block)

    @property
    def variable_position(self) -> Tuple[int, ...]:
        return self.I

    @property
    def dependent_position(self) -> Tuple[int, ...]:
        return self.J

    def I_bar(self, k: int) -> Tuple[int, ...]:
        """Positions of I(1) ∪ ... ∪ I(k) (k is 0-based, inclusive)."""
        return tuple(p for block in self.I_k[: k + 1] for p in block)

    def J_bar(self, k: int) -> Tuple[int, ...]:
        """Positions of J(k) ∪ ... ∪ J(s) (k is 0-based, inclusive)."""
        return tuple(p for block in self.J_k[k:] for p in block)

    def variables_of_block_prefix(self, k: int) -> Tuple[int, ...]:
        """Variable indices of blocks 0..k."""
        return tuple(i for i, b in enumerate(self.variable_block) if b <= k)


@dataclass(frozen=True)
class Polynomial:
    """A polynomial with exact rational coefficients in ``nvars`` variables."""

    terms: Tuple[Tuple[Exponent, Fraction], ...]
    nvars: int

    def __post_init__(self):
        merged: Dict[Exponent, Fraction] = {}
        for e, c in self.terms:
            e = tuple(int(v) for v in e)
            if len(e) != self.nvars or any(v < 0 for v in e):
                raise ConfigurationError(f"bad exponent vector {e} for {self.nvars} variables")
            merged[e] = merged.get(e, Fraction(0)) + exact.to_fraction(c)
        terms = tuple(sorted((e, c) for e, c in merged.items() if c != 0))
        object.__setattr__(self, "terms", terms)

    @classmethod
    def monomial(cls, exponent: Exponent, coeff=1) -> "Polynomial":
        return cls(((tuple(exponent), Fraction(coeff)),), len(exponent))

    @property
    def degree(self) -> int:
        return max((sum(e) for e, _ in self.terms), default=0)

    def depends_on(self, i: int) -> bool:
        return any(e[i] > 0 for e, _ in self.terms)

    def evaluate(self, x: Sequence):
        """Exact when every coordinate is a Fraction or int, float otherwise."""
        exact_input = all(isinstance(v, (Fraction, int)) for v in x)
        total = Fraction(0) if exact_input else 0.0
        for e, c in self.terms:
            term = c if exact_input else float(c)
            for xi, ei in zip(x, e):
                if ei:
                    term = term * xi ** ei
            total = total + term
        return total

    def evaluate_many(self, xs: np.ndarray) -> np.ndarray:
        """Float evaluation at the rows of an (N, nvars) array."""
        xs = np.asarray(xs, dtype=float)
        out = np.zeros(xs.shape[0])
        for e, c in self.terms:
            term = np.full(xs.shape[0], float(c))
            for i, ei in enumerate(e):
                if ei:
                    term = term * xs[:, i] ** ei
            out += term
        return out

    def derivative(self, i: int) -> "Polynomial":
        terms = []
        for e, c in self.terms:
            if e[i]:
                de = list(e)
                de[i] -= 1
                terms.append((tuple(de), c * e[i]))
        return Polynomial(tuple(terms), self.nvars)

    def coefficient_bound(self, lo: Sequence[float], hi: Sequence[float]) -> Fraction:
        """Upper bound of |P| on a box: sum of |c_e| prod max(|lo_i|, |hi_i|)^e_i."""
        reach = [max(abs(exact.to_fraction(a)), abs(exact.to_fraction(b))) for a, b in zip(lo, hi)]
        total = Fraction(0)
        for e, c in self.terms:
            term = abs(c)
            for r, ei in zip(reach, e):
                term *= r ** ei
            total += term
        return total

    def interval(self, lo: Sequence[Fraction], hi: Sequence[Fraction]) -> Tuple[Fraction, Fraction, bool]:
        """Rational interval enclosure of P over a box.

        Returns:
            (low, high, exact); the enclosure is the exact range when P has a
            single term, since its variables vary independently
        """
        low = Fraction(0)
        high = Fraction(0)
        for e, c in self.terms:
            t_lo, t_hi = Fraction(1), Fraction(1)
            for a, b, ei in zip(lo, hi, e):
                if not ei:
                    continue
                p_lo, p_hi = _power_interval(a, b, ei)
                products = (t_lo * p_lo, t_lo * p_hi, t_hi * p_lo, t_hi * p_hi)
                t_lo, t_hi = min(products), max(products)
            if c < 0:
                t_lo, t_hi = c * t_hi, c * t_lo
            else:
                t_lo, t_hi = c * t_lo, c * t_hi
            low += t_lo
            high += t_hi
        return low, high, len(self.terms) <= 1

    def integer_form(self) -> Tuple[int, int, Tuple[Tuple[Exponent, int], ...]]:
        """Data for exact evaluation of ``q * P(a / q)`` with integer arithmetic.

        Returns:
            (L, D, terms) with ``q * P(a/q) = N / (L * q^(D-1))`` where
            ``N = sum C_e a^e q^(D - |e|)`` over the integer ``terms``
            ``(e, C_e)`` and ``D >= 1``
        """
        L = 1
        for _, c in self.terms:
            L = L * c.denominator // math.gcd(L, c.denominator)
        D = max(self.degree, 1)
        return L, D, tuple((e, int(c * L)) for e, c in self.terms)


def _power_interval(a: Fraction, b: Fraction, e: int) -> Tuple[Fraction, Fraction]:
    if e % 2 == 1 or a >= 0:
        return a ** e, b ** e
    if b <= 0:
        return b ** e, a ** e
    return Fraction(0), max(a ** e, b ** e)


class Chart(ABC):
    """A chart F: U -> R^n in block form."""

    def __init__(self, name: str, layout: IndexLayout, domain: Box, order: int):
        if domain.dim != layout.d:
            raise ConfigurationError(f"domain of {name} has dimension {domain.dim}, expected {layout.d}")
        self.name = name
        self.layout = layout
        self.domain = domain
        self.order = int(order)

    @property
    def d(self) -> int:
        return self.layout.d

    @property
    def m(self) -> int:
        return self.layout.m

    @property
    def n(self) -> int:
        return self.layout.n

    @property
    def is_polynomial(self) -> bool:
        return False

    @abstractmethod
    def dependent(self, x: Sequence) -> np.ndarray:
        """Dependent coordinates (g values) in layout order, as floats."""

    @abstractmethod
    def dependent_jacobian(self, x: Sequence) -> np.ndarray:
        """d x m matrix of partials d g_j / d x_i as floats."""

    def dependent_many(self, xs: np.ndarray) -> np.ndarray:
        """Dependent coordinates at the rows of an (N, d) array."""
        return np.array([self.dependent(x) for x in np.asarray(xs, dtype=float)]).reshape(len(xs), self.m)

    @abstractmethod
    def second_order_bound(self, box: Box) -> float:
        """Certified upper bound on all second partials of the g_j over ``box``."""

    @abstractmethod
    def first_order_bound(self, box: Box) -> float:
        """Certified upper bound on all first partials of the g_j over ``box``."""

    @abstractmethod
    def dependent_range(self, j: int, box: Box) -> Tuple[float, float, bool]:
        """Enclosure (lo, hi, exact) of the j-th dependent coordinate over ``box``."""

    def check_domain(self, x: Sequence) -> None:
        if len(x) != self.d:
            raise PreconditionError(f"{self.name} expects {self.d} parameters, got {len(x)}")
        if not self.domain.contains([float(v) for v in x]):
            raise PreconditionError(f"point {[float(v) for v in x]} lies outside the domain of {self.name}")

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r}, blocks={self.layout.blocks})"


class PolynomialChart(Chart):
    """Chart whose dependent coordinates are polynomials with rational coefficients."""

    def __init__(
        self,
        name: str,
        layout: IndexLayout,
        polys: Sequence[Polynomial],
        domain: Box,
        order: int = 2
    ):
        super().__init__(name, layout, domain, order)
        if len(polys) != layout.m:
            raise ConfigurationError(f"{name}: {len(polys)} polynomials for {layout.m} dependent coordinates")
        for j, poly in enumerate(polys):
            if poly.nvars != layout.d:
                raise ConfigurationError(f"{name}: polynomial {j + 1} uses {poly.nvars} variables, expected {layout.d}")
            allowed = set(layout.variables_of_block_prefix(layout.dependent_block[j]))
            for i in range(layout.d):
                if i not in allowed and poly.depends_on(i):
                    raise ConfigurationError(
                        f"{name}: dependent coordinate {j + 1} uses variable x{i + 1} of a later block"
                    )
        self.polys = tuple(polys)
        self._grad = tuple(tuple(p.derivative(i) for p in self.polys) for i in range(layout.d))

    @property
    def is_polynomial(self) -> bool:
        return True

    def dependent(self, x: Sequence) -> np.ndarray:
        xf = [float(v) for v in x]
        return np.array([p.evaluate(xf) for p in self.polys], dtype=float)

    def dependent_many(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        if not self.polys:
            return np.zeros((len(xs), 0))
        return np.column_stack([p.evaluate_many(xs) for p in self.polys])

    def dependent_exact(self, x: Sequence[Fraction]) -> List[Fraction]:
        return [p.evaluate([exact.to_fraction(v) for v in x]) for p in self.polys]

    def dependent_jacobian(self, x: Sequence) -> np.ndarray:
        xf = [float(v) for v in x]
        return np.array([[g.evaluate(xf) for g in row] for row in self._grad], dtype=float).reshape(self.d, self.m)

    def dependent_jacobian_exact(self, x: Sequence[Fraction]) -> List[List[Fraction]]:
        xe = [exact.to_fraction(v) for v in x]
        return [[g.evaluate(xe) for g in row] for row in self._grad]

    def second_order_bound(self, box: Box) -> float:
        bound = Fraction(0)
        for p in self.polys:
            for i, k in combinations_with_replacement(range(self.d), 2):
                bound = max(bound, p.derivative(i).derivative(k).coefficient_bound(box.lo, box.hi))
        return float(bound)

    def first_order_bound(self, box: Box) -> float:
        bound = Fraction(0)
        for row in self._grad:
            for g in row:
                bound = max(bound, g.coefficient_bound(box.lo, box.hi))
        return float(bound)

    def dependent_range(self, j: int, box: Box) -> Tuple[float, float, bool]:
        lo, hi = box.fraction_bounds()
        a, b, is_exact = self.polys[j].interval(lo, hi)
        return a, b, is_exact

    def affine_relation(self) -> bool:
        """True iff 1, F_1, ..., F_n are linearly dependent as polynomials."""
        coords: List[Polynomial] = [Polynomial.monomial((0,) * self.d)]
        poly_iter = iter(self.polys)
        var_iter = iter(range(self.d))
        for pos in range(self.n):
            if pos in self.layout.I:
                e = [0] * self.d
                e[next(var_iter)] = 1
                coords.append(Polynomial.monomial(tuple(e)))
            else:
                coords.append(next(poly_iter))
        monomials = sorted({e for p in coords for e, _ in p.terms})
        rows = [[dict(p.terms).get(e, Fraction(0)) for e in monomials] for p in coords]
        return exact.rank(exact.fraction_matrix(rows)) < len(coords)


class SphericalCapChart(Chart):
    """Charts with the single dependent coordinate sqrt(1 - sum of squares).

    ``cap_vars`` lists the variables entering the square root; the circle,
    the sphere patch and the cylinder are instances.
    """

    def __init__(self, name: str, layout: IndexLayout, domain: Box, cap_vars: Sequence[int], order: int = 2):
        super().__init__(name, layout, domain, order)
        if layout.m != 1:
            raise ConfigurationError(f"{name}: a spherical cap has exactly one dependent coordinate")
        self.cap_vars = tuple(cap_vars)
        allowed = set(layout.variables_of_block_prefix(layout.dependent_block[0]))
        if not set(self.cap_vars) <= allowed:
            raise ConfigurationError(f"{name}: cap variables must belong to the first blocks")
        if self._s_min(domain) <= 0:
            raise ConfigurationError(f"{name}: the domain leaves the unit ball")

    def _square_range(self, box: Box) -> Tuple[float, float]:
        lo, hi = box.lo, box.hi
        r2_max = sum(max(lo[i] ** 2, hi[i] ** 2) for i in self.cap_vars)
        r2_min = sum(0.0 if lo[i] <= 0 <= hi[i] else min(lo[i] ** 2, hi[i] ** 2) for i in self.cap_vars)
        return r2_min, r2_max

    def _s_min(self, box: Box) -> float:
        return 1.0 - self._square_range(box)[1]

    def _s(self, x: Sequence) -> float:
        return 1.0 - sum(float(x[i]) ** 2 for i in self.cap_vars)

    def dependent(self, x: Sequence) -> np.ndarray:
        return np.array([math.sqrt(self._s(x))])

    def dependent_many(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        return np.sqrt(1.0 - np.sum(xs[:, list(self.cap_vars)] ** 2, axis=1))[:, None]

    def dependent_jacobian(self, x: Sequence) -> np.ndarray:
        root = math.sqrt(self._s(x))
        jac = np.zeros((self.d, 1))
        for i in self.cap_vars:
            jac[i, 0] = -float(x[i]) / root
        return jac

    def second_order_bound(self, box: Box) -> float:
        # |d_ik g| <= (s + r^2) / s^(3/2) = s^(-3/2)
        return self._s_min(box) ** -1.5

    def first_order_bound(self, box: Box) -> float:
        lo, hi = box.lo, box.hi
        reach = max(max(abs(lo[i]), abs(hi[i])) for i in self.cap_vars)
        return reach / math.sqrt(self._s_min(box))

    def dependent_range(self, j: int, box: Box) -> Tuple[float, float, bool]:
        r2_min, r2_max = self._square_range(box)
        return math.sqrt(1.0 - r2_max), math.sqrt(1.0 - r2_min), True


def _veronese(n: int) -> PolynomialChart:
    polys = [Polynomial.monomial((k,)) for k in range(2, n + 1)]
    return PolynomialChart(f"veronese{n}", IndexLayout.monge(1, n - 1), polys, Box((0.0,), (2.0,)), order=n)


def _build_builtins() -> Dict[str, Chart]:
    charts: Dict[str, Chart] = {
        "parabola": PolynomialChart(
            "parabola", IndexLayout.monge(1, 1), [Polynomial.monomial((2,))], Box((0.0,), (2.0,)), order=2
        ),
        "cubic": PolynomialChart(
            "cubic", IndexLayout.monge(1, 1), [Polynomial.monomial((3,))], Box((0.0,), (2.0,)), order=3
        ),
        "line": PolynomialChart(
            "line", IndexLayout.monge(1, 1), [Polynomial.monomial((1,))], Box((0.0,), (2.0,)), order=1
        ),
        "circle": SphericalCapChart(
            "circle", IndexLayout.monge(1, 1), Box((0.0,), (0.95,)), cap_vars=(0,)
        ),
        "sphere": SphericalCapChart(
            "sphere", IndexLayout.monge(2, 1), Box((0.0, 0.0), (0.6, 0.6)), cap_vars=(0, 1)
        ),
        "cylinder": SphericalCapChart(
            "cylinder", IndexLayout(((1, 1), (1, 0))), Box((0.0, 0.0), (0.95, 10.0)), cap_vars=(0,)
        ),
    }
    for n in range(2, 7):
        charts[f"veronese{n}"] = _veronese(n)
    return charts


BUILTINS: Dict[str, Chart] = _build_builtins()


def builtin_chart(name: str) -> Chart:
    try:
        return BUILTINS[name]
    except KeyError:
        raise ConfigurationError(f"unknown builtin chart {name!r}; known: {sorted(BUILTINS)}") from None


def parse_chart(text: str, name: str = "chart") -> Chart:
    """Parse a chart definition.

    Format (``#`` starts a comment)::

        builtin parabola

    or::

        blocks 1 1          # d_1 m_1 [d_2 m_2 ...]
        domain -1 1         # lo_1 hi_1 [lo_2 hi_2 ...]
        order 2             # optional nondegeneracy order
        poly                # one section per dependent coordinate
        1/2 2               # coefficient p/q, then the exponent vector
        3 1
    """
    blocks = None
    bounds = None
    order = 2
    polys: List[List[Tuple[Exponent, Fraction]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        try:
            if head == "builtin":
                return builtin_chart(rest[0])
            if head == "blocks":
                sizes = [int(v) for v in rest]
                if len(sizes) % 2:
                    raise ValueError("blocks need (d_k, m_k) pairs")
                blocks = tuple(zip(sizes[0::2], sizes[1::2]))
            elif head == "domain":
                values = [float(v) for v in rest]
                bounds = (values[0::2], values[1::2])
            elif head == "order":
                order = int(rest[0])
            elif head == "poly":
                polys.append([])
            else:
                if not polys:
                    raise ValueError("term before the first 'poly' header")
                polys[-1].append((tuple(int(v) for v in rest), Fraction(head)))
        except (ValueError, IndexError) as e:
            raise ConfigurationError(f"{name}, line {lineno}: {e}") from e
    if blocks is None or bounds is None:
        raise ConfigurationError(f"{name}: chart definitions need 'blocks' and 'domain' lines")
    layout = IndexLayout(blocks)
    return PolynomialChart(
        name,
        layout,
        [Polynomial(tuple(terms), layout.d) for terms in polys],
        Box.from_bounds(*bounds),
        order=order,
    )


def resolve_chart(ref: Union[str, Chart]) -> Chart:
    """A builtin name, a ``builtin <name>`` line or a path to a definition file."""
    if isinstance(ref, Chart):
        return ref
    if ref in BUILTINS:
        return BUILTINS[ref]
    path = Path(ref)
    if not path.is_absolute() and settings.CHART_DIR and not path.exists():
        path = Path(settings.CHART_DIR) / path
    if path.exists():
        return parse_chart(path.read_text(), name=path.stem)
    raise ConfigurationError(f"cannot resolve chart {ref!r}")


def eval_chart(c: Chart, x: Sequence) -> np.ndarray:
    """Point F(x) in R^n with coordinates in layout order.

    Polynomial charts evaluated at Fraction inputs return an object array of
    Fractions; everything else returns floats.

    Raises:
        PreconditionError: If x lies outside the chart domain
    """
    c.check_domain(x)
    exact_mode = c.is_polynomial and all(isinstance(v, (Fraction, int)) for v in x)
    dependent = c.dependent_exact(x) if exact_mode else c.dependent(x).tolist()
    y = np.empty(c.n, dtype=object if exact_mode else float)
    for i, pos in enumerate(c.layout.I):
        y[pos] = x[i] if exact_mode else float(x[i])
    for j, pos in enumerate(c.layout.J):
        y[pos] = dependent[j]
    return y


def chart_points(c: Chart, xs: np.ndarray) -> np.ndarray:
    """F at the rows of an (N, d) array, as an (N, n) float array (no domain check)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.empty((xs.shape[0], c.n))
    ys[:, list(c.layout.I)] = xs
    if c.m:
        ys[:, list(c.layout.J)] = c.dependent_many(xs)
    return ys


def chart_jacobian(c: Chart, x: Sequence) -> np.ndarray:
    """The d x n matrix of partials d F_p / d x_i, columns in layout order.

    Exact (object array of Fractions) for polynomial charts at Fraction input.
    """
    c.check_domain(x)
    exact_mode = c.is_polynomial and all(isinstance(v, (Fraction, int)) for v in x)
    if exact_mode:
        jac = np.empty((c.d, c.n), dtype=object)
        jac[:, :] = Fraction(0)
        dep = c.dependent_jacobian_exact(x)
    else:
        jac = np.zeros((c.d, c.n))
        dep = c.dependent_jacobian(x).tolist()
    for i, pos in enumerate(c.layout.I):
        jac[i, pos] = Fraction(1) if exact_mode else 1.0
    for j, pos in enumerate(c.layout.J):
        for i in range(c.d):
            jac[i, pos] = dep[i][j]
    return jac


def second_order_bound(c: Chart, box: Optional[Box] = None) -> float:
    """The constant M bounding every second partial of the g_j on ``box``."""
    box = box or c.domain
    if not c.domain.contains_box(box):
        raise PreconditionError(f"box {box} is not inside the domain of {c.name}")
    return c.second_order_bound(box)


def first_order_bound(c: Chart, box: Optional[Box] = None) -> float:
    """Upper bound on every first partial of the g_j on ``box``."""
    box = box or c.domain
    if not c.domain.contains_box(box):
        raise PreconditionError(f"box {box} is not inside the domain of {c.name}")
    return c.first_order_bound(box)


def dependent_range(c: Chart, j: int, box: Box) -> Tuple[float, float, bool]:
    """Enclosure of the j-th dependent coordinate over ``box``."""
    return c.dependent_range(j, box)


@dataclass
class RankReport:
    """Outcome of the sampled first-derivative rank check."""

    chart: str
    samples: int
    failures: List[Tuple[float, ...]]
    affine_relation: Optional[bool]

    @property
    def passed(self) -> bool:
        return not self.failures


def sample_rank_check(c: Chart, samples: int, seed: int) -> RankReport:
    """Check rank d of the Jacobian and nonzero coordinate gradients at random points.

    Args:
        c: Chart
        samples: Number of uniform samples in the domain
        seed: Seed of the counter-based generator

    Returns:
        Report listing failing points and, for polynomial charts, whether an
        exact affine relation among 1, F_1, ..., F_n exists
    """
    if samples < 1:
        raise PreconditionError("samples must be positive")
    rng = np.random.Generator(np.random.Philox(seed))
    lo, hi = c.domain.lo, c.domain.hi
    failures = []
    for _ in range(samples):
        x = lo + (hi - lo) * rng.random(c.d)
        jac = chart_jacobian(c, x)
        full_rank = np.linalg.matrix_rank(jac) == c.d
        nonzero = np.all(np.any(jac != 0, axis=0))
        if not (full_rank and nonzero):
            failures.append(tuple(float(v) for v in x))

    relation = c.affine_relation() if isinstance(c, PolynomialChart) else None
    if failures:
        logger.warning(f"Rank check on {c.name}: {len(failures)} of {samples} samples failed")
    if relation:
        logger.warning(f"Chart {c.name} satisfies an affine relation; it is degenerate")
    return RankReport(c.name, samples, failures, relation)
