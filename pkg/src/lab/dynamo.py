"""Flows, embeddings and the sets they cut out of the parameter domain.

Matrices act on ``R^(n+1)`` with coordinates in reversed layout order
``(y_n, ..., y_1, 1)``; their duals ``sigma (M^T)^-1 sigma`` are indexed in
layout order ``(1, y_1, ..., y_n)``.
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import settings
from src.lab.lattice import SquareMatrix, successive_minima
from src.lab.manifold import (
    Box,
    Chart,
    IndexLayout,
    chart_jacobian,
    eval_chart,
    first_order_bound,
    second_order_bound,
)
from src.utils import exact
from src.utils.errors import (
    BudgetExceededError,
    CertificationError,
    ConfigurationError,
    PreconditionError,
)
from src.utils.workers import ordered_map, resolve_threads

logger = logging.getLogger(__name__)

Real = Union[float, Fraction]

CONSTRAINT_RTOL = 1e-12
SF_CHUNK = 1 << 16
EMBEDDING_KINDS = ("single_direction", "full", "block")
CONSTANTS_MODES = ("unit", "certified")


def _is_exact(values: Sequence) -> bool:
    return all(isinstance(v, (int, Fraction)) and not isinstance(v, bool) for v in values)


def _check_chain(eps: Sequence[Real], closed_top: bool = True) -> None:
    for i, e in enumerate(eps):
        if not (0 < e <= 1 if closed_top else 0 < e < 1):
            raise PreconditionError(f"eps_{i + 1} = {float(e)} is out of range")
    for i in range(len(eps) - 1):
        if eps[i] > eps[i + 1]:
            raise PreconditionError(f"eps is not a chain: eps_{i + 1} > eps_{i + 2}")


def transference_constant(n: int) -> int:
    """Upper bound for lambda_1(L*) lambda_(n+1)(L) in dimension n+1."""
    return n + 1


@dataclass(frozen=True)
class DivergenceParams:
    """Parameters of the diagonal flow used to locate rational points."""

    c: Real
    Q: Real
    eps: Tuple[Real, ...]
    eps_prime: Tuple[Real, ...]

    def __post_init__(self):
        object.__setattr__(self, "eps", tuple(self.eps))
        object.__setattr__(self, "eps_prime", tuple(self.eps_prime))
        if not 0 < self.c < 1:
            raise ConfigurationError(f"c must lie in (0, 1), got {float(self.c)}")
        if not self.Q > 0:
            raise ConfigurationError(f"Q must be positive, got {float(self.Q)}")
        _check_chain(self.eps)
        if any(not e > 0 for e in self.eps_prime):
            raise ConfigurationError("eps_prime must be positive")

    @property
    def n(self) -> int:
        return len(self.eps)

    @property
    def exact(self) -> bool:
        return _is_exact([self.c, self.Q, *self.eps, *self.eps_prime])

    def constraint_value(self, layout: IndexLayout) -> Real:
        """``prod(eps_prime) * prod(eps_J) * Q``, which must equal 1."""
        value = self.Q
        for e in self.eps_prime:
            value = value * e
        for p in layout.J:
            value = value * self.eps[p]
        return value

    def check(self, layout: IndexLayout) -> None:
        if layout.n != self.n or layout.d != len(self.eps_prime):
            raise ConfigurationError(f"parameters of size n={self.n}, d={len(self.eps_prime)} do not fit {layout.blocks}")
        value = self.constraint_value(layout)
        ok = value == 1 if self.exact else abs(float(value) - 1.0) <= CONSTRAINT_RTOL
        if not ok:
            raise PreconditionError(f"prod(eps') * prod(eps_J) * Q = {float(value)} instead of 1")


@dataclass(frozen=True)
class ConvergenceParams:
    """Parameters of the flow ``g_conv`` at scale ``e^t``."""

    t: int
    eps: Tuple[float, ...]
    eps_prime: Tuple[float, ...]
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "eps", tuple(float(e) for e in self.eps))
        object.__setattr__(self, "eps_prime", tuple(float(e) for e in self.eps_prime))
        if int(self.t) != self.t or self.t < 1:
            raise ConfigurationError(f"t must be a positive integer, got {self.t}")
        _check_chain(self.eps, closed_top=False)
        if any(not e > 0 for e in self.eps_prime):
            raise ConfigurationError("eps_prime must be positive")
        expected = math.exp(self.t) * math.prod(self.eps)
        if abs(self.phi ** (self.n + 1) / expected - 1.0) > CONSTRAINT_RTOL:
            raise PreconditionError(f"phi^(n+1) = {self.phi ** (self.n + 1)} does not match e^t prod(eps) = {expected}")

    @classmethod
    def create(cls, t: int, eps: Sequence[float], eps_prime: Sequence[float]) -> "ConvergenceParams":
        n = len(eps)
        log_phi = (t + sum(math.log(e) for e in eps)) / (n + 1)
        return cls(int(t), tuple(eps), tuple(eps_prime), math.exp(log_phi))

    @property
    def n(self) -> int:
        return len(self.eps)


def bkm_alpha(d: int, l: int, n: int) -> float:
    """Exponent ``1 / (d (2l - 1) (n + 1))`` of the nondivergence bound."""
    return 1.0 / (d * (2 * l - 1) * (n + 1))


@dataclass(frozen=True)
class SFParams:
    """Parameters of the set of points admitting a small linear form.

    ``T`` follows layout order. ``layout`` tells which positions are
    independent; without it the first ``len(K)`` positions are.
    """

    delta: float
    K: Tuple[float, ...]
    T: Tuple[float, ...]
    alpha: float
    E: float = 1.0
    r: float = 1.0
    layout: Optional[IndexLayout] = None

    def __post_init__(self):
        object.__setattr__(self, "K", tuple(float(k) for k in self.K))
        object.__setattr__(self, "T", tuple(float(t) for t in self.T))
        if not self.delta > 0:
            raise ConfigurationError(f"delta must be positive, got {self.delta}")
        if any(not k > 0 for k in self.K) or any(not t > 0 for t in self.T):
            raise ConfigurationError("K and T must be positive")
        if not 0 < self.r <= 1:
            raise ConfigurationError(f"ball radius must lie in (0, 1], got {self.r}")
        if self.layout is not None and (self.layout.d != len(self.K) or self.layout.n != len(self.T)):
            raise ConfigurationError("K and T do not match the layout")

    @classmethod
    def with_order(
        cls,
        delta: float,
        K: Sequence[float],
        T: Sequence[float],
        l: int,
        E: float = 1.0,
        r: float = 1.0,
        layout: Optional[IndexLayout] = None
    ) -> "SFParams":
        return cls(delta, tuple(K), tuple(T), bkm_alpha(len(K), l, len(T)), E, r, layout)

    @property
    def n(self) -> int:
        return len(self.T)

    @property
    def d(self) -> int:
        return len(self.K)

    @property
    def independent_positions(self) -> Tuple[int, ...]:
        return self.layout.I if self.layout is not None else tuple(range(self.d))

    def condition_margin(self) -> Tuple[float, float]:
        """(lhs, rhs) of ``delta^n < max(K) * prod(T) / max(T)``."""
        return self.delta ** self.n, max(self.K) * math.prod(self.T) / max(self.T)

    def satisfies_condition(self) -> bool:
        lhs, rhs = self.condition_margin()
        return lhs < rhs


@dataclass(frozen=True)
class WitnessCandidate:
    """Integer vector ``(a0, a)`` with ``a != 0``."""

    a0: int
    a: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(int(v) for v in self.a))
        if not any(self.a):
            raise PreconditionError("a witness needs a nonzero integer vector a")


@dataclass
class Predicate:
    """One inequality evaluated on concrete parameters."""

    name: str
    holds: Optional[bool]
    lhs: Optional[float] = None
    rhs: Optional[float] = None


@dataclass
class WeightSelection:
    eps_prime: Tuple[Real, ...]
    predicates: Dict[str, Predicate] = field(default_factory=dict)


@dataclass
class KTParameters:
    K: Tuple[float, ...]
    T: Tuple[float, ...]
    max_T: float
    max_T_reference: float

    @property
    def max_T_ratio(self) -> float:
        return self.max_T / self.max_T_reference


@dataclass
class BKMBound:
    term1: float
    term2: float

    @property
    def total(self) -> float:
        return self.term1 + self.term2


@dataclass
class RationalWitness:
    """Rational point ``(a / q, b / q)`` close to the manifold.

    ``a`` are the numerators of the independent coordinates in variable
    order, ``b`` those of the dependent coordinates in layout order.
    """

    q: int
    a: Tuple[int, ...]
    b: Tuple[int, ...]
    bounds: Dict[str, float] = field(default_factory=dict)

    def as_row(self) -> List[int]:
        return [self.q, *self.a, *self.b]


@dataclass
class TransportReport:
    linear_holds: bool
    linear_ratios: Tuple[float, ...]
    dependent_ratio: float


# Embeddings


def _point_data(c: Chart, x: Sequence):
    """Values, Jacobian and exactness flag at x."""
    y = eval_chart(c, x)
    jac = chart_jacobian(c, x)
    return y, jac, y.dtype == object


def build_embedding(kind: str, c: Chart, x: Sequence) -> SquareMatrix:
    """Unipotent matrix attached to the tangent data of the chart at x.

    Args:
        kind: ``single_direction`` (only the first partial derivative),
            ``full`` (Monge charts) or ``block`` (any block layout)
        c: Chart
        x: Point of the domain; Fractions give an exact matrix on
            polynomial charts

    Returns:
        The matrix in reversed layout order

    Raises:
        ConfigurationError: If the kind does not fit the chart
    """
    if kind not in EMBEDDING_KINDS:
        raise ConfigurationError(f"unknown embedding kind {kind!r}")
    layout = c.layout
    if kind in ("single_direction", "full") and not layout.is_monge:
        raise ConfigurationError(f"embedding kind {kind!r} needs a Monge chart, {c.name} has {layout.s} blocks")

    y, jac, exact_mode = _point_data(c, x)
    n = layout.n
    one, zero = (Fraction(1), Fraction(0)) if exact_mode else (1.0, 0.0)
    rows = [[zero] * (n + 1) for _ in range(n + 1)]
    directions = (0,) if kind == "single_direction" else tuple(range(layout.d))
    xs = [y[p] for p in layout.I]

    for r in range(n):
        p = n - 1 - r
        rows[r][r] = one
        if p in layout.I:
            rows[r][n] = y[p]
            continue
        value = y[p]
        for i in directions:
            partial = jac[i, p]
            rows[r][n - 1 - layout.I[i]] = -partial
            value = value - xs[i] * partial
        rows[r][n] = value
    rows[n][n] = one
    return SquareMatrix.from_rows(rows, exact_mode=exact_mode)


def monge_order(layout: IndexLayout) -> Tuple[int, ...]:
    """Layout positions listed as all independent positions, then all dependent ones."""
    return layout.I + layout.J


def dual_closed_form(c: Chart, x: Sequence, kind: str = "full") -> SquareMatrix:
    """The dual of the embedding written down directly, in Monge coordinates.

    ``full`` gives ``[[1, -x, -g], [0, I_d, J], [0, 0, I_m]]`` with ``J`` the
    Jacobian of g; ``single_direction`` keeps only the row of the first
    partial derivative.
    """
    y, jac, exact_mode = _point_data(c, x)
    layout = c.layout
    d, m, n = layout.d, layout.m, layout.n
    one, zero = (Fraction(1), Fraction(0)) if exact_mode else (1.0, 0.0)
    rows = [[zero] * (n + 1) for _ in range(n + 1)]
    for k in range(n + 1):
        rows[k][k] = one
    order = monge_order(layout)
    for col, p in enumerate(order, start=1):
        rows[0][col] = -y[p]
    for i in range(d):
        if kind == "single_direction" and i > 0:
            continue
        for j, p in enumerate(layout.J):
            rows[1 + i][1 + d + j] = jac[i, p]
    return SquareMatrix.from_rows(rows, exact_mode=exact_mode)


def permutation_factors(layout: IndexLayout) -> Tuple[SquareMatrix, SquareMatrix]:
    """Permutations (w1, w2) with ``dual(U_1(x)) = w1 dual_closed_form(x) w2``."""
    n = layout.n
    position = {p: k + 1 for k, p in enumerate(monge_order(layout))}
    P = [[0] * (n + 1) for _ in range(n + 1)]
    P[0][0] = 1
    for p in range(n):
        P[position[p]][p + 1] = 1
    w2 = SquareMatrix.from_rows(P, exact_mode=True)
    return w2.transpose(), w2


# Diagonal flows


def build_g_divergence(p: DivergenceParams, layout: IndexLayout) -> SquareMatrix:
    """``c^-1 diag`` over reversed layout order of eps_j (dependent) and eps'_i
    (independent), followed by ``c^(n+1) Q``.

    Raises:
        PreconditionError: If ``prod(eps') prod(eps_J) Q != 1``
    """
    p.check(layout)
    n = layout.n
    entries: List[Real] = []
    for r in range(n):
        pos = n - 1 - r
        if pos in layout.I:
            entries.append(p.eps_prime[layout.I.index(pos)])
        else:
            entries.append(p.eps[pos])
    entries.append(p.c ** (n + 1) * p.Q)
    return SquareMatrix.diag([v / p.c for v in entries])


def _scaling_entry(eps_i: float, eps_prime_i: float, t: int) -> float:
    return eps_i / max(eps_i, math.sqrt(eps_prime_i * math.exp(t)))


def _scaling_matrix(p: ConvergenceParams, layout: IndexLayout, positions: Sequence[int]) -> SquareMatrix:
    n = layout.n
    entries = []
    for pos in reversed(positions):
        if pos in layout.I:
            i = layout.I.index(pos)
            entries.append(_scaling_entry(p.eps[pos], p.eps_prime[i], p.t))
        else:
            entries.append(1.0)
    entries.append(1.0)
    return SquareMatrix.diag(entries[: n + 1])


def build_g_convergence(
    p: ConvergenceParams,
    layout: Optional[IndexLayout] = None
) -> Tuple[SquareMatrix, SquareMatrix, SquareMatrix]:
    """The flow ``g_conv = phi diag(eps_n^-1, ..., eps_1^-1, e^-t)`` and its scalings.

    Returns:
        (g_conv, a, frak_a): ``a`` scales the independent coordinates of the
        Monge reordering, ``frak_a`` does the same in layout order; both
        have entries ``eps_i / max(eps_i, sqrt(eps'_i e^t))`` there and 1
        elsewhere
    """
    layout = layout or IndexLayout.monge(len(p.eps_prime), p.n - len(p.eps_prime))
    if layout.n != p.n or layout.d != len(p.eps_prime):
        raise ConfigurationError("convergence parameters do not fit the layout")
    entries = [p.phi / e for e in reversed(p.eps)] + [p.phi * math.exp(-p.t)]
    g_conv = SquareMatrix.diag(entries)
    a = _scaling_matrix(p, layout, monge_order(layout))
    frak_a = _scaling_matrix(p, layout, tuple(range(layout.n)))
    return g_conv, a, frak_a


# Weight selection


def _eps_J_min(eps: Sequence[Real], layout: IndexLayout, k: int) -> Optional[Real]:
    values = [eps[j] for j in layout.J_k[k]]
    return min(values) if values else None


def select_weights(
    mode: str,
    eps: Sequence[Real],
    Q_or_t: Real,
    layout: IndexLayout,
    c: Optional[Real] = None,
    s: Optional[float] = None
) -> WeightSelection:
    """Choose eps' and evaluate the conditions the constructions rely on.

    Divergence takes ``eps'_1 = eps_1 / (eps_1 ... eps_n Q)`` and
    ``eps'_i = eps_i`` otherwise. Convergence takes ``eps'_i`` equal to the
    smallest dependent weight of the block of x_i, or to eps_i itself when
    that block has no dependent coordinates.

    Args:
        mode: ``divergence`` or ``convergence``
        eps: Chain of weights in layout order
        Q_or_t: Q for divergence, t for convergence
        layout: Index layout
        c: Flow constant; enables the nondivergence condition check
        s: Exponent of the growth condition ``eps_2 ... eps_n Q > Q^s``

    Returns:
        eps' and named predicates; predicates are reported, never enforced
    """
    eps = tuple(eps)
    if len(eps) != layout.n:
        raise ConfigurationError(f"{len(eps)} weights for n = {layout.n}")
    _check_chain(eps)
    predicates: Dict[str, Predicate] = {}

    if mode == "divergence":
        Q = Q_or_t
        product = math.prod(eps)
        eps_prime = [eps[pos] for pos in layout.I]
        eps_prime[0] = eps[layout.I[0]] / (product * Q)
        eps_prime = tuple(eps_prime)

        predicates["goal1"] = Predicate(
            "eps'_i >= eps_i",
            all(ep >= eps[pos] for ep, pos in zip(eps_prime, layout.I)),
            float(min(ep / eps[pos] for ep, pos in zip(eps_prime, layout.I))), 1.0,
        )
        predicates["standing_product"] = Predicate(
            "eps_1 ... eps_n Q <= 1", bool(product * Q <= 1), float(product * Q), 1.0
        )
        pairs = []
        for k in range(layout.s):
            j_min = _eps_J_min(eps, layout, k)
            if j_min is None:
                continue
            ep_max = max(eps_prime[layout.I.index(pos)] for pos in layout.I_bar(k))
            pairs.append((j_min, ep_max * ep_max / Q))
        tight = min(pairs, key=lambda lr: lr[0] / lr[1]) if pairs else (None, None)
        predicates["goal2"] = Predicate(
            "min eps_J(k) > max eps'_i eps'_i' / Q",
            all(lhs > rhs for lhs, rhs in pairs),
            None if tight[0] is None else float(tight[0]),
            None if tight[1] is None else float(tight[1]),
        )
        if layout.m:
            eps_d1 = eps[layout.J[0]]
            rest = [eps_prime[i] for i in range(1, layout.d)]
            predicates["eps_prime_le_eps_d1"] = Predicate(
                "eps'_i <= eps_(d+1) for i >= 2",
                all(ep <= eps_d1 for ep in rest),
                float(max(rest)) if rest else None,
                float(eps_d1),
            )
        if s is not None:
            tail = product / eps[0] * Q
            predicates["standing_power"] = Predicate(
                "eps_2 ... eps_n Q > Q^s", bool(tail > float(Q) ** s), float(tail), float(Q) ** s
            )
        if c is not None:
            kt = kT_parameters(c, eps, eps_prime, layout)
            lhs = float(Q) ** (-layout.n)
            rhs = max(kt.K) * math.prod(kt.T) / max(kt.T)
            predicates["goal3"] = Predicate("Q^-n < max K prod T / max T", lhs < rhs, lhs, rhs)
        return WeightSelection(eps_prime, predicates)

    if mode == "convergence":
        t = Q_or_t
        eps_prime = []
        for k in range(layout.s):
            j_min = _eps_J_min(eps, layout, k)
            for pos in layout.I_k[k]:
                eps_prime.append(j_min if j_min is not None else eps[pos])
        eps_prime = tuple(eps_prime)
        et = math.exp(t)
        le_d1 = []
        for k in range(layout.s):
            j_min = _eps_J_min(eps, layout, k)
            if j_min is not None:
                le_d1.extend(eps_prime[layout.I.index(pos)] <= j_min for pos in layout.I_k[k])
        predicates["eps_prime_le_eps_d1"] = Predicate("max eps'_i <= eps_(d+1)", all(le_d1))
        ratios = [float(eps[pos]) / math.sqrt(float(ep) * et) for ep, pos in zip(eps_prime, layout.I)]
        predicates["eps_le_sqrt"] = Predicate("eps_i <= (eps'_i e^t)^(1/2)", max(ratios) <= 1.0, max(ratios), 1.0)
        if layout.m:
            eps_d1 = float(eps[layout.J[0]])
            K = [1.0 / math.sqrt(float(ep) * et) for ep in eps_prime]
            predicates["K_le_inverse_eps_d1"] = Predicate(
                "K_i <= eps_(d+1)^-1", max(K) <= 1.0 / eps_d1, max(K), 1.0 / eps_d1
            )
        return WeightSelection(eps_prime, predicates)

    raise ConfigurationError(f"unknown weight selection mode {mode!r}")


def kT_parameters(
    c: Real,
    eps: Sequence[Real],
    eps_prime: Sequence[Real],
    layout: IndexLayout,
    constants_mode: str = "unit",
    derivative_bound: float = 1.0
) -> KTParameters:
    """K and T of the linear-form set that contains the complement of the good set.

    Monge layouts follow the single-direction embedding: x_1 carries the
    Jacobian term in T, the other variables carry it in K. Block layouts
    follow the full embedding: every T_i carries the Jacobian term of the
    dependent coordinates of its own and later blocks.

    ``unit`` sets all implied constants to 1. ``certified`` multiplies by
    the transference constant n + 1 and uses ``derivative_bound`` for the
    first partials, which makes the containment provable.
    """
    if constants_mode not in CONSTANTS_MODES:
        raise ConfigurationError(f"unknown constants mode {constants_mode!r}")
    n, d, m = layout.n, layout.d, layout.m
    cn = float(c) ** (n + 1)
    eps = [float(e) for e in eps]
    eps_prime = [float(e) for e in eps_prime]
    certified = constants_mode == "certified"
    kappa = transference_constant(n) if certified else 1.0
    L = float(derivative_bound) if certified else 1.0

    T = [0.0] * n
    K = [0.0] * d
    for j in layout.J:
        T[j] = kappa * cn / eps[j]

    if layout.is_monge:
        eps_d1 = eps[layout.J[0]] if m else None
        jac_term = (cn / eps_d1) if eps_d1 is not None else 0.0
        K[0] = kappa * cn / eps_prime[0]
        T[layout.I[0]] = K[0] + kappa * L * m * jac_term
        count = m if certified else 1
        for i in range(1, d):
            T[layout.I[i]] = kappa * cn / eps_prime[i]
            K[i] = T[layout.I[i]] + kappa * L * count * jac_term
    else:
        for k in range(layout.s):
            j_bar = layout.J_bar(k)
            j_min = _eps_J_min(eps, layout, k)
            for pos in layout.I_k[k]:
                i = layout.I.index(pos)
                K[i] = kappa * cn / eps_prime[i]
                extra = 0.0
                if j_min is not None:
                    count = len(j_bar) if certified else 1
                    extra = kappa * L * count * cn / j_min
                T[pos] = K[i] + extra

    eps_d1 = eps[layout.J[0]] if m else math.inf
    reference = max(max(1.0 / e for e in eps_prime), 1.0 / eps_d1)
    return KTParameters(tuple(K), tuple(T), max(T), reference)


# Sets defined by successive minima


def _lattice_matrix_good(c: Chart, x: Sequence, p: DivergenceParams) -> SquareMatrix:
    g = build_g_divergence(p, c.layout)
    kind = "single_direction" if c.layout.is_monge else "block"
    u = build_embedding(kind, c, x)
    if not (g.exact and u.exact):
        g, u = g.to_float(), u.to_float()
    return g.inverse() @ u


def good_set_lambda(c: Chart, x: Sequence, p: DivergenceParams) -> float:
    """``lambda_(n+1)(g^-1 u(x) Z^(n+1))``."""
    basis = _lattice_matrix_good(c, x, p)
    return successive_minima(basis, basis.dim).lambdas[-1]


def in_good_set(c: Chart, x: Sequence, p: DivergenceParams) -> bool:
    """Whether ``lambda_(n+1)(g^-1 u(x) Z^(n+1)) <= c^-n``.

    Monge charts use the single-direction embedding, block charts the block
    embedding.
    """
    return good_set_lambda(c, x, p) <= float(p.c) ** (-c.n)


def minor_set_lambda(c: Chart, x: Sequence, p: ConvergenceParams) -> float:
    layout = c.layout
    g_conv, a, frak_a = build_g_convergence(p, layout)
    u = build_embedding("full" if layout.is_monge else "block", c, x)
    scale = a if layout.is_monge else frak_a
    basis = scale @ g_conv @ u.to_float()
    return successive_minima(basis, basis.dim).lambdas[-1]


def in_minor_set(c: Chart, x: Sequence, p: ConvergenceParams) -> bool:
    """Whether ``lambda_(n+1)(a g_conv u_1(x) Z^(n+1)) > phi``."""
    return minor_set_lambda(c, x, p) > p.phi


# Linear-form witnesses


def _zigzag(digits: np.ndarray) -> np.ndarray:
    """0, 1, -1, 2, -2, ... for digits 0, 1, 2, 3, 4, ..."""
    half = (digits + 1) // 2
    return np.where(digits % 2 == 1, half, -half)


def _scan_chunk(
    start: int,
    stop: int,
    shape: Tuple[int, ...],
    y: np.ndarray,
    jac: np.ndarray,
    p: SFParams
) -> Optional[WitnessCandidate]:
    idx = np.arange(start, stop, dtype=np.int64)
    digits = np.stack(np.unravel_index(idx, shape, order="F"), axis=1)
    A = _zigzag(digits)
    nonzero = A != 0
    has = nonzero.any(axis=1)
    first = np.argmax(nonzero, axis=1)
    lead = A[np.arange(len(A)), first]
    A = A[has & (lead > 0)]
    if not len(A):
        return None
    s = A @ y
    a0 = -np.rint(s)
    ok = np.abs(a0 + s) < p.delta
    if p.d:
        ok &= np.all(np.abs(A @ jac.T) < np.asarray(p.K), axis=1)
    hits = np.flatnonzero(ok)
    if not len(hits):
        return None
    h = hits[0]
    return WitnessCandidate(int(a0[h]), tuple(int(v) for v in A[h]))


def in_SF(
    c: Chart,
    x: Sequence,
    p: SFParams,
    budget: Optional[int] = None,
    threads: Optional[int] = None
) -> Optional[WitnessCandidate]:
    """First ``(a0, a)`` with ``|a0 + F(x) a| < delta``, ``|d_i F(x) a| < K_i``
    and ``|a_k| < T_k``.

    Candidates are scanned in zig-zag order per coordinate with the first
    coordinate varying fastest, one sign representative per pair ``+-a``;
    ``a0`` is the negated nearest integer to ``F(x) a`` (ties to even).

    Raises:
        BudgetExceededError: If the candidate box exceeds the budget
    """
    budget = budget or settings.SF_BUDGET
    if len(p.T) != c.n or len(p.K) != c.d:
        raise ConfigurationError(f"parameters do not fit chart {c.name}")
    radii = [max(0, math.ceil(t) - 1) for t in p.T]
    shape = tuple(2 * r + 1 for r in radii)
    total = math.prod(shape)
    if total > budget:
        raise BudgetExceededError("linear-form candidate box exceeds the budget", budget=budget, required=float(total))

    y = np.asarray(eval_chart(c, x), dtype=float)
    jac = np.asarray(chart_jacobian(c, x), dtype=float)
    bounds = [(lo, min(lo + SF_CHUNK, total)) for lo in range(0, total, SF_CHUNK)]
    batch = resolve_threads(threads)
    for b in range(0, len(bounds), batch):
        results = ordered_map(
            lambda se: _scan_chunk(se[0], se[1], shape, y, jac, p),
            bounds[b: b + batch],
            threads,
        )
        for hit in results:
            if hit is not None:
                return hit
    return None


def bkm_bound(p: SFParams, d: int, ball_measure: float, enforce_condition: bool = True) -> BKMBound:
    """Both terms of the nondivergence estimate with unit implied constant.

    ``delta prod_i min(K_i, T_i) prod_(k dependent) T_k mu(B)`` and
    ``E (delta min(K, 1/r) prod(T) / max(T))^alpha``.

    Raises:
        PreconditionError: If ``delta^n < K prod(T) / max(T)`` fails, delta
            exceeds 1 or some T_k is below 1 (unless ``enforce_condition``
            is off)
    """
    if d != p.d:
        raise PreconditionError(f"d = {d} does not match {p.d} K parameters")
    if enforce_condition:
        lhs, rhs = p.condition_margin()
        if not lhs < rhs:
            raise PreconditionError(f"nondivergence condition fails: {lhs} >= {rhs}")
        if p.delta > 1 or min(p.T) < 1:
            raise PreconditionError("nondivergence bound needs delta <= 1 and T_k >= 1")
    independent = p.independent_positions
    term1 = p.delta * ball_measure
    for i, pos in enumerate(independent):
        term1 *= min(p.K[i], p.T[pos])
    for k in range(p.n):
        if k not in independent:
            term1 *= p.T[k]
    K = max(p.K)
    inner = p.delta * min(K, 1.0 / p.r) * math.prod(p.T) / max(p.T)
    return BKMBound(term1, p.E * inner ** p.alpha)


def minor_set_sf_params(
    c: Chart,
    p: ConvergenceParams,
    box: Optional[Box] = None,
    constants_mode: str = "unit"
) -> SFParams:
    """Parameters of a linear-form set containing the minor set.

    ``delta = e^-t``, ``K_i = (eps'_i e^t)^(-1/2)``, ``T_i = K_i + eps_d1^-1``
    (d1 the smallest dependent weight of the block) and ``T_j = eps_j^-1``.
    The certified version multiplies by n + 1 and weighs the Jacobian term
    with the first-derivative bound.
    """
    if constants_mode not in CONSTANTS_MODES:
        raise ConfigurationError(f"unknown constants mode {constants_mode!r}")
    layout = c.layout
    n = layout.n
    certified = constants_mode == "certified"
    kappa = transference_constant(n) if certified else 1.0
    L = first_order_bound(c, box) if certified else 1.0
    et = math.exp(p.t)
    if certified and et < kappa:
        raise PreconditionError(f"certified constants need e^t >= {kappa}")

    K_unit = [1.0 / math.sqrt(ep * et) for ep in p.eps_prime]
    T = [0.0] * n
    for j in layout.J:
        T[j] = kappa / p.eps[j]
    for k in range(layout.s):
        j_min = _eps_J_min(p.eps, layout, k)
        count = len(layout.J_bar(k)) if certified else 1
        for pos in layout.I_k[k]:
            i = layout.I.index(pos)
            extra = L * count / j_min if j_min is not None else 0.0
            T[pos] = kappa * (K_unit[i] + extra)
    K = [kappa * v for v in K_unit]
    return SFParams(kappa / et, tuple(K), tuple(T), bkm_alpha(layout.d, c.order, n), layout=layout)


def good_set_sf_params(
    c: Chart,
    p: DivergenceParams,
    box: Optional[Box] = None,
    constants_mode: str = "unit"
) -> SFParams:
    """Parameters of a linear-form set containing the complement of the good set.

    ``delta = 1/Q`` (times n + 1 when certified) with K and T from
    :func:`kT_parameters`.
    """
    layout = c.layout
    certified = constants_mode == "certified"
    L = first_order_bound(c, box) if certified else 1.0
    kappa = transference_constant(layout.n) if certified else 1.0
    if certified and float(p.Q) < kappa:
        raise PreconditionError(f"certified constants need Q >= {kappa}")
    kt = kT_parameters(p.c, p.eps, p.eps_prime, layout, constants_mode, derivative_bound=L)
    return SFParams(kappa / float(p.Q), kt.K, kt.T, bkm_alpha(layout.d, c.order, layout.n), layout=layout)


def minor_set_bound(p: ConvergenceParams, d: int, l: int, layout: Optional[IndexLayout] = None) -> float:
    """``(eps_d1^(1/2) e^(-t/2) e^-t eps_d1^-d prod_J eps_j^-1)^alpha`` with unit constant."""
    layout = layout or IndexLayout.monge(d, p.n - d)
    if not layout.m:
        raise PreconditionError("the minor-set bound needs dependent coordinates")
    eps_d1 = p.eps[layout.J[0]]
    inner = math.sqrt(eps_d1) * math.exp(-p.t / 2) * math.exp(-p.t) * eps_d1 ** (-d)
    for j in layout.J:
        inner /= p.eps[j]
    return inner ** bkm_alpha(d, l, p.n)


def sf_measure_split(
    p: ConvergenceParams,
    d: int,
    ball_measure: float,
    l: int = 2,
    layout: Optional[IndexLayout] = None
) -> Tuple[float, float]:
    """(rational-point term ``e^t prod(eps) mu(B)``, minor-set term)."""
    m1 = math.exp(p.t) * math.prod(p.eps) * ball_measure
    return m1, minor_set_bound(p, d, l, layout)


def transport_check(
    c: Chart,
    x0: Sequence[float],
    x: Sequence[float],
    p: Sequence[int],
    q: int,
    eps: Sequence[float],
    eps_prime: Sequence[float],
    t: int
) -> TransportReport:
    """Move an approximation from x to the centre x0 of its small box.

    Checks ``|q x0_i - p_i| < 2 max(eps_i, (eps'_i e^t)^(1/2))`` and measures
    the dependent remainder ``|q g_j(x0) - sum_i d_i g_j(x0)(q x0_i - p_i) - p_j|``
    relative to ``max(eps_j, max eps')``.

    Raises:
        PreconditionError: If x is not in the box around x0 or (p, q) is not
            an approximation at x
    """
    layout = c.layout
    et = math.exp(t)
    if not 1 <= q <= et:
        raise PreconditionError(f"q = {q} outside [1, e^t]")
    for i in range(layout.d):
        if not abs(x[i] - x0[i]) < math.sqrt(eps_prime[i] / et):
            raise PreconditionError(f"x_{i + 1} is outside the box around x0")
    y = np.asarray(eval_chart(c, x), dtype=float)
    for pos in range(layout.n):
        if not abs(y[pos] - p[pos] / q) < eps[pos] / et:
            raise PreconditionError(f"(p, q) is not an approximation at x in coordinate {pos + 1}")

    y0 = np.asarray(eval_chart(c, x0), dtype=float)
    jac0 = np.asarray(chart_jacobian(c, x0), dtype=float)
    ratios = []
    for i, pos in enumerate(layout.I):
        bound = 2 * max(eps[pos], math.sqrt(eps_prime[i] * et))
        ratios.append(abs(q * y0[pos] - p[pos]) / bound)
    scale = max(eps_prime)
    worst = 0.0
    for pos in layout.J:
        residual = q * y0[pos] - p[pos]
        for i, ipos in enumerate(layout.I):
            residual -= jac0[i, pos] * (q * y0[ipos] - p[ipos])
        worst = max(worst, abs(residual) / max(eps[pos], scale))
    return TransportReport(all(r < 1 for r in ratios), tuple(ratios), worst)


# Projection onto rational points


def projection_radii(p: DivergenceParams, n: int) -> Tuple[float, ...]:
    """Radii r_i = eps'_i / (c^(n+1) Q) of the margin the centre must keep inside U."""
    return tuple(float(ep) / (float(p.c) ** (n + 1) * float(p.Q)) for ep in p.eps_prime)


def project_to_rational(c: Chart, x: Sequence, p: DivergenceParams, box: Optional[Box] = None) -> RationalWitness:
    """Rational point near F(x) built from n+1 short independent lattice vectors.

    Writes ``w = 2(n+1)Q (y_n, ..., y_1, -1)`` in the basis of short vectors,
    floors the coefficients and reads ``(a, q)`` off the resulting lattice
    point. The witness is verified before it is returned:
    ``|q x_i - a_i| <= (n+1) c^-(n+1) eps'_i``,
    ``|q g_j(a/q) - b_j| <= (n+1) M c^-(n+1) eps_j`` and
    ``(n+1) Q <= q <= 3 (n+1) Q``, where M bounds the second partials (at
    least 1) plus, for single-direction embeddings, ``(d - 1)`` times the
    first-partial bound.

    Raises:
        PreconditionError: If x is not a good point or lies too close to the
            boundary of the domain
        CertificationError: If the constructed witness fails verification
    """
    layout = c.layout
    n, d = layout.n, layout.d
    N = n + 1
    r = projection_radii(p, n)
    try:
        inner = c.domain.shrink(r)
    except PreconditionError:
        raise PreconditionError(f"Q = {float(p.Q)} is too small for the domain of {c.name}") from None
    if not inner.contains([float(v) for v in x]):
        raise PreconditionError("x is too close to the boundary of the domain")

    basis = _lattice_matrix_good(c, x, p)
    report = successive_minima(basis, N)
    threshold = float(p.c) ** (-n)
    if report.lambdas[-1] > threshold:
        raise PreconditionError(f"x is not in the good set: lambda_(n+1) = {report.lambdas[-1]} > {threshold}")

    Z = exact.fraction_matrix([list(col) for col in zip(*report.attaining_vectors)])
    if exact.rank(Z) < N:
        raise PreconditionError("short vectors are dependent")
    y = eval_chart(c, x)
    scale = 2 * N * exact.to_fraction(p.Q)
    w = [scale * exact.to_fraction(y[n - 1 - k]) for k in range(n)] + [-scale]
    eta = exact.solve(Z, w)
    t = [math.floor(v) for v in eta]
    z = [-sum(Z[i, k] * t[k] for k in range(N)) for i in range(N)]
    q = int(z[n])
    a = tuple(int(-z[n - 1 - pos]) for pos in layout.I)
    b = tuple(int(-z[n - 1 - pos]) for pos in layout.J)

    witness = RationalWitness(q, a, b)
    M = max(second_order_bound(c, box), 1.0)
    if layout.is_monge and d > 1:
        M += (d - 1) * first_order_bound(c, box)
    _verify_witness(c, x, p, witness, M)
    return witness


def _verify_witness(c: Chart, x: Sequence, p: DivergenceParams, w: RationalWitness, M: float) -> None:
    layout = c.layout
    n = layout.n
    N = n + 1
    cinv = float(p.c) ** (-(n + 1))
    Q = float(p.Q)

    if not N * Q <= w.q <= 3 * N * Q:
        raise CertificationError(f"q = {w.q} outside [{N * Q}, {3 * N * Q}]", {"q": w.q})
    linear = max(abs(w.q * float(x[i]) - w.a[i]) / (N * cinv * float(p.eps_prime[i])) for i in range(layout.d))
    if linear > 1:
        raise CertificationError(f"linear approximation bound exceeded by factor {linear}", {"q": w.q})

    centre = [Fraction(ai, w.q) for ai in w.a]
    if not c.domain.contains([float(v) for v in centre]):
        raise CertificationError("rational centre a/q left the domain", {"q": w.q})
    if c.is_polynomial:
        values = [w.q * v for v in c.dependent_exact(centre)]
    else:
        values = [w.q * v for v in c.dependent([float(v) for v in centre])]
    dependent = 0.0
    for j, pos in enumerate(layout.J):
        ratio = float(abs(values[j] - w.b[j])) / (N * M * cinv * float(p.eps[pos]))
        dependent = max(dependent, ratio)
    if dependent > 1:
        raise CertificationError(f"dependent approximation bound exceeded by factor {dependent}", {"q": w.q})
    w.bounds = {"linear_ratio": linear, "dependent_ratio": dependent, "M": M}
    logger.debug(f"Projected x={[float(v) for v in x]} to q={w.q} (ratios {linear:.3g}, {dependent:.3g})")
