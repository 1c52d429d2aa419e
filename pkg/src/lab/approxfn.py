"""Approximation-function algebra.

Non-increasing step functions ``q -> (0, 1]``, weight systems of n such
functions, the chain condition psi_1 <= ... <= psi_n, the splitting of a
weight system along sorting permutations, the regularization that lifts the
product of a chain up to an auxiliary function, series partial sums and the
dyadic divergence schedule.

Every "for all q" statement is checked on a finite horizon.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import settings
from src.utils.errors import ConfigurationError, PreconditionError

logger = logging.getLogger(__name__)

# Values within this relative distance of 1 are treated as 1 when splitting
# the schedule, so float noise never moves a boundary t out of T2.
BOUNDARY_RTOL = 1e-12

FAMILY_RTOL = 1e-12


@dataclass(frozen=True)
class PowerLogFamily:
    """The closed form ``q -> min(1, C * q**(-a) * log(q + 1)**(-b))``."""

    C: float
    a: float
    b: float

    def __post_init__(self):
        if not self.C > 0:
            raise ConfigurationError(f"family constant must be positive, got {self.C}")
        if self.a < 0 or self.b < 0:
            raise ConfigurationError(
                f"family exponents must be non-negative for a non-increasing function, got a={self.a}, b={self.b}"
            )

    def values(self, qs: np.ndarray) -> np.ndarray:
        qs = np.asarray(qs, dtype=float)
        out = self.C * np.power(qs, -self.a)
        if self.b:
            out = out * np.power(np.log(qs + 1.0), -self.b)
        # values above 1 are capped
        return np.minimum(out, 1.0)


@dataclass(frozen=True)
class ApproxFunction:
    """A non-increasing step function on the positive integers.

    The function is constant on each interval ``(q_{j-1}, q_j]`` between
    consecutive breakpoints. Past the last breakpoint it follows the symbolic
    family when one is attached, otherwise ``tail_value``. A function with a
    family and no breakpoints is evaluated by formula everywhere.
    """

    breakpoints: Tuple[Tuple[int, float], ...] = ()
    tail_value: Optional[float] = None
    family: Optional[PowerLogFamily] = None
    name: str = ""
    _bq: np.ndarray = field(init=False, repr=False, compare=False)
    _bv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        bq = np.array([q for q, _ in self.breakpoints], dtype=np.int64)
        bv = np.array([v for _, v in self.breakpoints], dtype=float)
        object.__setattr__(self, "_bq", bq)
        object.__setattr__(self, "_bv", bv)

        if self.family is None and self.tail_value is None:
            raise ConfigurationError("a step function without a family needs a tail value")
        if len(bq):
            if bq[0] < 1 or np.any(np.diff(bq) <= 0):
                raise ConfigurationError("breakpoints must be strictly increasing positive integers")
            if np.any(np.diff(bv) > 0):
                raise ConfigurationError("breakpoint values must be non-increasing")
            if np.any(bv <= 0) or np.any(bv > 1):
                raise ConfigurationError("breakpoint values must lie in (0, 1]")
        if self.tail_value is not None:
            if not 0 < self.tail_value <= 1:
                raise ConfigurationError(f"tail value must lie in (0, 1], got {self.tail_value}")
            if len(bv) and self.tail_value > bv[-1]:
                raise ConfigurationError("tail value exceeds the last breakpoint value")
        if self.family is not None and len(bq):
            expected = self.family.values(bq)
            if not np.allclose(bv, expected, rtol=FAMILY_RTOL, atol=0.0):
                raise ConfigurationError("symbolic family disagrees with the breakpoint table")

    @classmethod
    def constant(cls, value: float, name: str = "") -> "ApproxFunction":
        return cls(tail_value=float(value), name=name or f"const:{value}")

    @classmethod
    def from_family(cls, C: float, a: float, b: float = 0.0, name: str = "") -> "ApproxFunction":
        return cls(family=PowerLogFamily(float(C), float(a), float(b)), name=name or f"family:{C},{a},{b}")

    @classmethod
    def from_values(cls, values: Sequence[float], tail_value: Optional[float] = None, name: str = "") -> "ApproxFunction":
        """Compress a table of values at ``q = 1..len(values)`` into breakpoints.

        Args:
            values: Non-increasing values at consecutive q starting from 1
            tail_value: Value past the table; defaults to the last value
            name: Display name

        Returns:
            Step function agreeing with the table on its range
        """
        vals = np.asarray(values, dtype=float)
        if vals.size == 0:
            raise ConfigurationError("empty value table")
        # a breakpoint closes every run of equal values
        ends = np.flatnonzero(np.diff(vals) != 0)
        ends = np.append(ends, vals.size - 1)
        breakpoints = tuple((int(i) + 1, float(vals[i])) for i in ends)
        tail = float(vals[-1]) if tail_value is None else float(tail_value)
        return cls(breakpoints=breakpoints, tail_value=tail, name=name)

    @classmethod
    def tabulate(cls, fn: Callable[[int], float], horizon: int, name: str = "") -> "ApproxFunction":
        """Sample a Python callable at ``q = 1..horizon``."""
        return cls.from_values([fn(q) for q in range(1, horizon + 1)], name=name)

    def values(self, qs) -> np.ndarray:
        """Vectorized evaluation at integer or real arguments ``q >= 1``."""
        qs = np.asarray(qs, dtype=float)
        if not len(self._bq):
            if self.family is not None:
                return self.family.values(qs)
            return np.full(qs.shape, self.tail_value, dtype=float)

        idx = np.searchsorted(self._bq, qs, side="left")
        inside = idx < len(self._bq)
        out = np.empty(qs.shape, dtype=float)
        out[inside] = self._bv[idx[inside]]
        outside = ~inside
        if np.any(outside):
            if self.family is not None:
                out[outside] = self.family.values(qs[outside])
            else:
                out[outside] = self.tail_value
        return out

    def __call__(self, q: Union[int, float]) -> float:
        return eval_approx(self, q)


@dataclass(frozen=True)
class WeightSystem:
    """An ordered tuple of n approximation functions.

    ``chain_horizon`` is set only by constructors that have certified the
    chain condition psi_1(q) <= ... <= psi_n(q) for every q up to it.
    """

    psis: Tuple[ApproxFunction, ...]
    chain_horizon: Optional[int] = None

    def __post_init__(self):
        if not self.psis:
            raise ConfigurationError("a weight system needs at least one function")

    @property
    def n(self) -> int:
        return len(self.psis)

    def table(self, q_lo: int, q_hi: int) -> np.ndarray:
        """Values ``psi_i(q)`` for ``q_lo <= q <= q_hi`` as an (n, len) array."""
        return _weight_table(self, int(q_lo), int(q_hi))

    def at(self, q: Union[int, float]) -> np.ndarray:
        return np.array([psi.values(np.array([q], dtype=float))[0] for psi in self.psis])


@lru_cache(maxsize=64)
def _weight_table(ws: WeightSystem, q_lo: int, q_hi: int) -> np.ndarray:
    qs = np.arange(q_lo, q_hi + 1, dtype=np.int64)
    table = np.vstack([psi.values(qs) for psi in ws.psis])
    table.flags.writeable = False
    return table


@dataclass(frozen=True, eq=False)
class PermutationSplit:
    """Splitting of the positive integers by the sorting order of a weight system.

    ``permutations[k]`` lists the 1-based indices in ascending order of value;
    ``sequences[k]`` holds the q at which that order occurs; ``derived[k]``
    is the weight system psi^pi that copies psi_i on its sequence and is
    constant in between.
    """

    permutations: Tuple[Tuple[int, ...], ...]
    sequences: Tuple[np.ndarray, ...]
    derived: Tuple[WeightSystem, ...]
    horizon: int


@dataclass(frozen=True, eq=False)
class RegularizationTrace:
    """Regularized weights with the case used at each step.

    ``cases[q - 1]`` is 1, 2 or 3 for the step that produced psi'(q) from
    psi'(q - 1) (0 for the base value at q = 1 and for n = 1). ``q_star`` is
    the first q at which the product of psi' equals max(prod psi, Phi).
    """

    weights: WeightSystem
    cases: np.ndarray
    q_star: Optional[int]
    products: np.ndarray
    targets: np.ndarray


@dataclass(frozen=True)
class ScheduleRecord:
    t: int
    lhs_growth: float
    rhs_growth: float
    lhs_standing: float
    rhs_standing: float
    standing_holds: bool
    klass: str


@dataclass(frozen=True)
class DivergenceSchedule:
    """Dyadic exponents t at which the product grows fast enough, split into T1/T2."""

    s_prime: float
    s: float
    t_list: Tuple[int, ...]
    class_of_t: Dict[int, str]
    records: Tuple[ScheduleRecord, ...]

    @property
    def t1(self) -> Tuple[int, ...]:
        return tuple(t for t in self.t_list if self.class_of_t[t] == "T1")

    @property
    def t2(self) -> Tuple[int, ...]:
        return tuple(t for t in self.t_list if self.class_of_t[t] == "T2")


def eval_approx(f: ApproxFunction, q: Union[int, float]) -> float:
    """Value of an approximation function at q.

    Args:
        f: Approximation function
        q: Argument, at least 1

    Returns:
        f(q)

    Raises:
        PreconditionError: If q < 1
    """
    if q < 1:
        raise PreconditionError(f"approximation functions are defined for q >= 1, got {q}")
    return float(f.values(np.array([q], dtype=float))[0])


def check_chain(ws: WeightSystem, horizon: int) -> bool:
    """True iff psi_1(q) <= ... <= psi_n(q) for every q <= horizon."""
    if horizon < 1:
        raise PreconditionError(f"horizon must be at least 1, got {horizon}")
    if ws.n == 1:
        return True
    table = ws.table(1, horizon)
    return bool(np.all(np.diff(table, axis=0) >= 0))


def certify_chain(ws: WeightSystem, horizon: int) -> WeightSystem:
    """Return ``ws`` with its chain flag set, or raise if the chain fails."""
    if not check_chain(ws, horizon):
        raise PreconditionError(f"chain condition fails below horizon {horizon}")
    return WeightSystem(ws.psis, chain_horizon=horizon)


def permutation_split(ws: WeightSystem, horizon: int) -> PermutationSplit:
    """Split 1..horizon by the ascending order of ``(psi_i(q))_i``.

    Ties are ordered by index. For every permutation pi the derived functions
    satisfy psi^pi_i <= psi_i on the horizon with equality on the sequence of
    pi, and are chained in the order pi.

    Args:
        ws: Weight system
        horizon: Last q considered

    Returns:
        The split with one derived weight system per permutation
    """
    if horizon < 1:
        raise PreconditionError(f"horizon must be at least 1, got {horizon}")
    table = ws.table(1, horizon)
    order = np.argsort(table, axis=0, kind="stable").T
    perms, inverse = np.unique(order, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    qs = np.arange(1, horizon + 1, dtype=np.int64)
    floor_value = float(table[:, -1].min())

    permutations = []
    sequences = []
    derived = []
    for k, perm in enumerate(perms):
        seq = qs[inverse == k]
        seq.flags.writeable = False
        psis = []
        for i in range(ws.n):
            vals = table[i, seq - 1]
            psis.append(ApproxFunction(
                breakpoints=tuple(zip(seq.tolist(), vals.tolist())),
                tail_value=floor_value,
                name=f"{ws.psis[i].name}^{tuple(int(p) + 1 for p in perm)}"
            ))
        permutations.append(tuple(int(p) + 1 for p in perm))
        sequences.append(seq)
        derived.append(WeightSystem(tuple(psis)))

    logger.debug(f"Split horizon {horizon} into {len(permutations)} permutation classes")
    return PermutationSplit(tuple(permutations), tuple(sequences), tuple(derived), horizon)


def _segment_solve(lo: List[float], hi: List[float], target: float, rtol: float) -> List[float]:
    """Point on the segment from ``lo`` to ``hi`` whose coordinate product is ``target``."""
    s_lo, s_hi = 0.0, 1.0
    point = hi
    for _ in range(200):
        s = 0.5 * (s_lo + s_hi)
        point = [a + s * (b - a) for a, b in zip(lo, hi)]
        value = math.prod(point)
        if abs(value - target) <= rtol * target:
            break
        if value < target:
            s_lo = s
        else:
            s_hi = s
    # keep lo <= point <= hi and the chain despite rounding
    clamped = [min(max(p, a), b) for p, a, b in zip(point, lo, hi)]
    return list(np.maximum.accumulate(clamped))


def regularize_trace(ws: WeightSystem, phi: ApproxFunction, horizon: int) -> RegularizationTrace:
    """Regularize a chained weight system against ``phi`` and keep the case trace.

    Starting from psi'(1) = psi(1), each step compares
    d0 = prod psi'(q), d1 = prod psi(q + 1) and d2 = phi(q + 1):

    - Case 1 (d0 <= max(d1, d2)): psi'(q + 1) = psi'(q)
    - Case 2 (d0 > d1 >= d2): psi'(q + 1) = psi(q + 1)
    - Case 3 (d0 > d2 > d1): the point of the segment from psi(q + 1) to
      psi'(q) whose product equals d2, found by bisection

    For n = 1 the result is max(psi, phi) pointwise.

    Args:
        ws: Chained weight system
        phi: Auxiliary non-increasing function
        horizon: Last q constructed

    Returns:
        Trace holding the regularized weights, step cases and q*
    """
    if horizon < 1:
        raise PreconditionError(f"horizon must be at least 1, got {horizon}")
    if (ws.chain_horizon or 0) < horizon:
        ws = certify_chain(ws, horizon)

    table = ws.table(1, horizon)
    phis = phi.values(np.arange(1, horizon + 1))
    columns = [tuple(col) for col in table.T.tolist()]
    products = np.array([math.prod(col) for col in columns])
    targets = np.maximum(products, phis)

    if ws.n == 1:
        out = np.maximum(table[0], phis)[None, :]
        cases = np.zeros(horizon, dtype=np.int8)
    else:
        rtol = settings.BISECTION_RTOL
        out_cols = [list(columns[0])]
        cases = np.zeros(horizon, dtype=np.int8)
        for k in range(horizon - 1):
            current = out_cols[-1]
            d0 = math.prod(current)
            d1 = products[k + 1]
            d2 = phis[k + 1]
            if d0 <= max(d1, d2):
                out_cols.append(current)
                cases[k + 1] = 1
            elif d1 >= d2:
                out_cols.append(list(columns[k + 1]))
                cases[k + 1] = 2
            else:
                out_cols.append(_segment_solve(list(columns[k + 1]), current, d2, rtol))
                cases[k + 1] = 3
        out = np.array(out_cols, dtype=float).T

    out_products = np.array([math.prod(col) for col in out.T.tolist()])
    hits = np.flatnonzero(np.abs(out_products - targets) <= 1e-9 * targets)
    q_star = int(hits[0]) + 1 if hits.size else None

    psis = tuple(
        ApproxFunction.from_values(out[i], name=f"{ws.psis[i].name}'") for i in range(ws.n)
    )
    counts = np.bincount(cases, minlength=4)
    logger.info(
        f"Regularized n={ws.n} to horizon {horizon}: "
        f"case1={counts[1]} case2={counts[2]} case3={counts[3]} q*={q_star}"
    )
    return RegularizationTrace(
        weights=WeightSystem(psis, chain_horizon=horizon),
        cases=cases,
        q_star=q_star,
        products=out_products,
        targets=targets,
    )


def regularize_psi(ws: WeightSystem, phi: ApproxFunction, horizon: int) -> WeightSystem:
    """Regularized weight system psi' (see ``regularize_trace``)."""
    return regularize_trace(ws, phi, horizon).weights


def partial_sum_series(ws: WeightSystem, Q: float, mode: str = "plain", n: Optional[int] = None) -> float:
    """Partial sums of the series whose divergence drives the dichotomy.

    Args:
        ws: Weight system
        Q: Upper summation bound
        mode: ``plain`` sums prod psi_i(q) over q <= Q; ``dyadic`` sums
            2^t prod psi_i(2^t) over 2^t <= Q; ``log_weighted`` sums
            psi_1(q) (log q)^(n - 1) over q <= Q
        n: Dimension used by ``log_weighted``; defaults to ``ws.n``

    Returns:
        The partial sum
    """
    if Q < 1:
        raise PreconditionError(f"Q must be at least 1, got {Q}")
    top = int(math.floor(Q))
    if mode == "plain":
        return float(np.sum(np.prod(ws.table(1, top), axis=0)))
    if mode == "dyadic":
        ts = np.arange(0, top.bit_length())
        qs = 2.0 ** ts
        products = np.prod(np.vstack([psi.values(qs) for psi in ws.psis]), axis=0)
        return float(np.sum(qs * products))
    if mode == "log_weighted":
        dim = ws.n if n is None else n
        qs = np.arange(1, top + 1, dtype=float)
        return float(np.sum(ws.psis[0].values(qs) * np.log(qs) ** (dim - 1)))
    raise ConfigurationError(f"unknown series mode {mode!r}")


def series_verdict(ws: WeightSystem, mode: str = "plain", n: Optional[int] = None) -> str:
    """Closed-form convergence verdict for weight systems of power-log families.

    The summand behaves like q^(-A) (log q)^(-B); the series converges iff
    A > 1, or A = 1 and B > 1.
    """
    families = [psi.family for psi in ws.psis]
    if any(f is None or len(psi.breakpoints) for f, psi in zip(families, ws.psis)):
        raise ConfigurationError("a closed-form verdict needs pure power-log families")
    if mode in ("plain", "dyadic"):
        A = sum(f.a for f in families)
        B = sum(f.b for f in families)
    elif mode == "log_weighted":
        dim = ws.n if n is None else n
        A = families[0].a
        B = families[0].b - (dim - 1)
    else:
        raise ConfigurationError(f"unknown series mode {mode!r}")
    return "convergent" if A > 1 or (A == 1 and B > 1) else "divergent"


def divergence_schedule(ws: WeightSystem, s_prime: float, t_max: int) -> DivergenceSchedule:
    """Dyadic exponents t <= t_max where the weighted product grows fast enough.

    A t qualifies when, at q = 2^t,
    ``q * prod psi_i(q) > q^(-(1/(n-1) - s'))``. Qualifying t with
    ``q * prod psi_i(q) < 1`` form T1, the rest T2. The derived exponent
    ``s = (n-1) s' / n`` and the standing bound ``q * psi_2...psi_n(q) > q^s``
    are recorded for every returned t.

    Args:
        ws: Chained weight system with n >= 2
        s_prime: Exponent in (0, 1/(n-1))
        t_max: Largest dyadic exponent

    Returns:
        The schedule; an empty one is logged as a warning
    """
    n = ws.n
    if n < 2:
        raise PreconditionError("the divergence schedule needs n >= 2")
    if not 0 < s_prime < 1.0 / (n - 1):
        raise PreconditionError(f"s' must lie in (0, {1.0 / (n - 1)}), got {s_prime}")
    horizon = 2 ** t_max
    if horizon <= settings.SCALAR_HORIZON:
        chained = check_chain(ws, horizon)
    else:
        dyadic = np.vstack([psi.values(2.0 ** np.arange(t_max + 1)) for psi in ws.psis])
        chained = bool(np.all(np.diff(dyadic, axis=0) >= 0))
    if not chained:
        raise PreconditionError("the divergence schedule needs the chain condition")

    s = (n - 1) * s_prime / n
    t_list = []
    class_of_t = {}
    records = []
    for t in range(1, t_max + 1):
        q = 2.0 ** t
        vals = ws.at(q)
        growth = q * math.prod(vals.tolist())
        rhs_growth = q ** (-(1.0 / (n - 1) - s_prime))
        if not growth > rhs_growth:
            continue
        standing = q * math.prod(vals[1:].tolist())
        rhs_standing = q ** s
        holds = standing > rhs_standing
        if not holds:
            logger.warning(f"Standing bound fails at t={t}: {standing} <= {rhs_standing}")
        klass = "T1" if growth < 1.0 - BOUNDARY_RTOL else "T2"
        t_list.append(t)
        class_of_t[t] = klass
        records.append(ScheduleRecord(t, growth, rhs_growth, standing, rhs_standing, holds, klass))

    if not t_list:
        logger.warning(f"Empty divergence schedule for s'={s_prime}, t_max={t_max}")
    return DivergenceSchedule(s_prime, s, tuple(t_list), class_of_t, tuple(records))


def dump_approx(f: ApproxFunction) -> str:
    """Text form: ``family C a b`` or ``q,value`` lines followed by ``tail v``."""
    lines = []
    if f.family is not None and not f.breakpoints:
        return f"family {f.family.C!r} {f.family.a!r} {f.family.b!r}\n"
    for q, v in f.breakpoints:
        lines.append(f"{q},{v!r}")
    if f.tail_value is not None:
        lines.append(f"tail {f.tail_value!r}")
    if f.family is not None:
        lines.append(f"family {f.family.C!r} {f.family.a!r} {f.family.b!r}")
    return "\n".join(lines) + "\n"


def load_approx(text: str, name: str = "") -> ApproxFunction:
    """Parse the text form written by ``dump_approx``."""
    breakpoints = []
    tail = None
    family = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            if line.startswith("tail"):
                tail = float(line.split()[1])
            elif line.startswith("family"):
                C, a, b = (float(v) for v in line.split()[1:4])
                family = PowerLogFamily(C, a, b)
            else:
                q, v = line.split(",")
                breakpoints.append((int(q), float(v)))
        except (ValueError, IndexError) as e:
            raise ConfigurationError(f"line {lineno}: cannot parse {raw!r}") from e
    return ApproxFunction(tuple(breakpoints), tail, family, name=name)


def parse_psi_spec(spec: str, base_dir: Optional[Path] = None) -> ApproxFunction:
    """Build a function from ``family:C,a,b``, ``const:v`` or ``table:<path>``."""
    kind, _, arg = spec.partition(":")
    kind = kind.strip().lower()
    try:
        if kind == "family":
            parts = [float(v) for v in arg.split(",")]
            if len(parts) == 2:
                parts.append(0.0)
            C, a, b = parts
            return ApproxFunction.from_family(C, a, b, name=spec)
        if kind == "const":
            return ApproxFunction.constant(float(arg), name=spec)
        if kind == "table":
            path = Path(arg)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return load_approx(path.read_text(), name=spec)
    except (ValueError, OSError) as e:
        raise ConfigurationError(f"invalid function spec {spec!r}: {e}") from e
    raise ConfigurationError(f"unknown function spec kind {kind!r} in {spec!r}")


def weight_system_from_specs(specs: Sequence[str], base_dir: Optional[Path] = None) -> WeightSystem:
    return WeightSystem(tuple(parse_psi_spec(s, base_dir) for s in specs))
