import contextvars
import math
from fractions import Fraction

import numpy as np
import pytest

from src.lab.approxfn import ApproxFunction, WeightSystem
from src.lab.counting import (
    DyadicCover,
    UbiquityConfig,
    approximable_upto,
    count_N,
    count_R,
    dyadic_cover_check,
    mc_measure,
    minkowski_witness,
    mult_approximable_upto,
    near_point_boxes,
    neighborhood_union,
    rect_union_measure,
    ubiquity_density,
    ubiquity_ratio_sum,
    witness_denominators,
)
from src.lab.manifold import Box, builtin_chart
from src.utils.context import set_run_context
from src.utils.errors import ConfigurationError, PreconditionError

F = Fraction
GOLDEN = (math.sqrt(5) - 1) / 2
UNIT = Box.from_bounds([0.0], [1.0])


def brute_count_R(poly, Q, eps, lo, hi):
    total = 0
    for q in range(math.ceil(F(Q) / 2), math.floor(F(Q)) + 1):
        for a in range(math.floor(q * lo) - 1, math.ceil(q * hi) + 2):
            if not lo < F(a, q) < hi:
                continue
            v = q * poly(F(a, q))
            total += sum(1 for b in range(math.floor(v) - 2, math.ceil(v) + 3) if abs(v - b) < eps)
    return total


def brute_count_N(g, lo, hi, h, q_max):
    """Near points of an increasing function g on [lo, hi], counted interval by interval."""
    total = 0
    for q in range(1, q_max + 1):
        for p1 in range(math.floor(q * (lo - h)) - 1, math.ceil(q * (hi + h)) + 2):
            x_lo = max(lo, p1 / q - h)
            x_hi = min(hi, p1 / q + h)
            if x_lo >= x_hi:
                continue
            g_lo, g_hi = g(x_lo) - h, g(x_hi) + h
            for p2 in range(math.floor(q * g_lo) - 1, math.ceil(q * g_hi) + 2):
                if g_lo < p2 / q < g_hi:
                    total += 1
    return total


def test_count_R_parabola(parabola):
    assert count_R(parabola, 10, [F(1, 2)], UNIT).count == 35
    assert count_R(parabola, 2, [F(2, 5)], UNIT).count == 0


def test_count_R_matches_brute_force(rng):
    cubic = builtin_chart("cubic")
    box = Box.from_bounds([0.1], [0.9])
    for Q in (7, 16, 31):
        for eps in (F(1, 3), F(1, 10)):
            expected = brute_count_R(lambda x: x ** 3, Q, eps, F(1, 10), F(9, 10))
            assert count_R(cubic, Q, [eps], box).count == expected


def test_count_R_witnesses(veronese3):
    result = count_R(veronese3, 20, [F(1, 4), F(1, 4)], Box.from_bounds([0.0], [1.5]), collect=True)
    assert len(result.witnesses) == result.count
    assert result.certified
    for w in result.witnesses:
        x = F(w.a[0], w.q)
        assert 10 <= w.q <= 20
        assert 0 < x < F(3, 2)
        assert abs(w.q * x ** 2 - w.b[0]) < F(1, 4)
        assert abs(w.q * x ** 3 - w.b[1]) < F(1, 4)
    keys = [(w.q, w.a, w.b) for w in result.witnesses]
    assert keys == sorted(keys)


def test_count_R_thread_independent(parabola):
    box = Box.from_bounds([-1.0], [1.0])
    assert count_R(parabola, 60, [0.2], box, threads=1).count == count_R(parabola, 60, [0.2], box, threads=4).count


def test_count_R_preconditions(parabola):
    with pytest.raises(PreconditionError):
        count_R(parabola, 1, [F(1, 2)], UNIT)
    with pytest.raises(PreconditionError):
        count_R(parabola, 10, [F(3, 2)], UNIT)
    with pytest.raises(PreconditionError):
        count_R(parabola, 10, [F(1, 2)], Box.from_bounds([1.0], [3.0]))


def test_neighborhood_union(parabola):
    boxes = neighborhood_union(parabola, 10, [F(1, 2)], UNIT, [0.01])
    assert len(boxes) == 35
    assert all(b.multiplicity == 1 and b.radii == (0.01,) for b in boxes)


def test_count_N_matches_brute_force(parabola):
    eps = (0.3, 0.3)
    t = 2
    result = count_N(parabola, Box.from_bounds([0.2], [0.3]), eps, t)
    h = 0.3 * math.exp(-t)
    assert result.exact
    assert result.count == brute_count_N(lambda x: x * x, 0.2, 0.3, h, math.floor(math.exp(t)))


def test_near_point_boxes_multiplicity(parabola):
    delta = Box.from_bounds([0.1], [0.6])
    total = count_N(parabola, delta, (0.5, 0.5), 3).count
    boxes = near_point_boxes(parabola, delta, (0.5, 0.5), 3, [0.001])
    assert sum(b.multiplicity for b in boxes) == total


def test_count_N_wrong_length(parabola):
    with pytest.raises(PreconditionError):
        count_N(parabola, UNIT, (0.3,), 2)


def test_minkowski_examples():
    witness = minkowski_witness([F(1, 3)], [F(1, 3)], 3)
    assert (witness.q, witness.a) == (3, (1,))
    assert minkowski_witness([F(2, 7), F(5, 9)], [1, 1], 1).q == 1
    with pytest.raises(PreconditionError):
        minkowski_witness([F(1, 3)], [F(1, 4)], 3)


def test_minkowski_random_points(rng):
    for _ in range(200):
        y = rng.uniform(0, 1, size=2)
        witness = minkowski_witness(list(y), [0.2, 0.2], 25)
        assert witness is not None
        assert 1 <= witness.q <= 25
        assert np.all(np.abs(witness.q * y - np.array(witness.a)) < 0.2)


def test_golden_ratio_denominators():
    line = builtin_chart("line")
    ws = WeightSystem((ApproxFunction.from_family(1, 1), ApproxFunction.from_family(1, 1)))
    assert witness_denominators(line, [GOLDEN], ws, 1, 13).tolist() == [1, 2, 3, 5, 8, 13]
    witness = approximable_upto(line, [GOLDEN], ws, 4, 7)
    assert witness.as_row() == [5, 3, 3]
    assert approximable_upto(line, [GOLDEN], ws, 9, 12) is None


def test_mult_approximable_upto():
    line = builtin_chart("line")
    psi = ApproxFunction.from_family(1, 2)
    assert mult_approximable_upto(line, [GOLDEN], psi, 4, 7).as_row() == [5, 3, 3]
    assert mult_approximable_upto(line, [GOLDEN], psi, 6, 7) is None


def test_approximable_upto_size_mismatch(parabola):
    with pytest.raises(PreconditionError):
        approximable_upto(parabola, [0.5], WeightSystem((ApproxFunction.constant(0.1),)), 1, 10)


def test_dyadic_cover_product():
    cover = DyadicCover(4, 1.5, 3, 1e-3)
    assert cover.size == 7 ** 2
    for k in cover.k_vectors():
        assert cover.product_error(k) < 1e-12


@pytest.mark.parametrize("t", [2, 3, 4])
def test_dyadic_cover_has_no_counterexamples(t, rng):
    psi = ApproxFunction.from_family(1, 1, 1)
    for name in ("parabola", "veronese3"):
        chart = builtin_chart(name)
        for _ in range(5):
            x = [float(rng.uniform(-1.5, 1.5))]
            report = dyadic_cover_check(chart, x, psi, t, 2.0)
            assert report.passed
            for record in report.records:
                if not record.in_tilde:
                    assert record.slack < math.e
                    assert record.min_slack <= record.slack


def test_mc_measure_constant_predicates():
    box = Box.from_bounds([0.0, 0.0], [2.0, 1.0])
    always = mc_measure(lambda x: True, box, 1000, seed=1)
    assert (always.estimate, always.lower, always.upper) == pytest.approx((2.0, 2.0, 2.0))
    never = mc_measure(lambda x: False, box, 1000, seed=1)
    assert never.estimate == 0.0 and never.upper == 0.0


def test_mc_measure_half_space():
    box = Box.from_bounds([0.0, 0.0], [1.0, 1.0])
    estimate = mc_measure(lambda pts: pts[:, 0] < 0.5, box, 20000, seed=7, vectorized=True)
    assert abs(estimate.estimate - 0.5) < 0.02
    assert estimate.lower <= estimate.estimate <= estimate.upper


def test_mc_measure_thread_independent():
    box = Box.from_bounds([0.0], [1.0])
    pred = lambda pts: pts[:, 0] ** 2 < 0.3
    one = mc_measure(pred, box, 5000, seed=3, vectorized=True, threads=1)
    four = mc_measure(pred, box, 5000, seed=3, vectorized=True, threads=4)
    assert one.hits == four.hits


def test_mc_measure_seed_from_run_context():
    box = Box.from_bounds([0.0], [1.0])
    pred = lambda pts: pts[:, 0] < 0.4

    def seeded():
        set_run_context(seed=11)
        return mc_measure(pred, box, 2000, vectorized=True)

    from_context = contextvars.copy_context().run(seeded)
    assert from_context.hits == mc_measure(pred, box, 2000, seed=11, vectorized=True).hits


def test_rect_union_one_dimension():
    boxes = [Box.from_bounds([0.0], [0.6]), Box.from_bounds([0.4], [1.0])]
    union = rect_union_measure(boxes, UNIT)
    assert union.measure == pytest.approx(1.0)
    assert union.exact and union.method == "sweep"


def test_rect_union_two_dimensions():
    square = Box.from_bounds([0.0, 0.0], [1.0, 1.0])
    same = [Box.from_bounds([0.0, 0.0], [0.5, 0.5])] * 2
    assert rect_union_measure(same, square).measure == pytest.approx(0.25)
    apart = [Box.from_bounds([0.0, 0.0], [0.2, 0.2]), Box.from_bounds([0.5, 0.5], [0.7, 0.6])]
    assert rect_union_measure(apart, square).measure == pytest.approx(0.06)
    outside = [Box.from_bounds([2.0, 2.0], [3.0, 3.0])]
    assert rect_union_measure(outside, square).method == "empty"


def test_rect_union_compression(rng):
    cube = Box.from_bounds([0.0] * 3, [1.0] * 3)
    for _ in range(20):
        lo = rng.uniform(0, 0.5, size=(2, 3))
        hi = lo + rng.uniform(0.1, 0.5, size=(2, 3))
        a, b = Box.from_bounds(lo[0], hi[0]), Box.from_bounds(lo[1], hi[1])
        overlap = a.intersect(b)
        expected = a.volume + b.volume - (overlap.volume if overlap else 0.0)
        union = rect_union_measure([a, b], cube)
        assert union.method == "compression"
        assert union.measure == pytest.approx(expected)


def test_ubiquity_density():
    assert ubiquity_density([UNIT], UNIT, 10) == 1.0
    assert ubiquity_density([], UNIT, 10) == 0.0
    assert ubiquity_density([Box.from_bounds([0.0], [0.5])], UNIT, 10) == pytest.approx(0.5)
    with pytest.raises(PreconditionError):
        ubiquity_density([], UNIT, 5)


def test_ubiquity_ratio_sum():
    ws = WeightSystem((ApproxFunction.constant(0.5), ApproxFunction.constant(0.5)))
    assert ubiquity_ratio_sum(ws, [1, 2]) == pytest.approx(0.75)
    with pytest.raises(PreconditionError):
        ubiquity_ratio_sum(ws, [1], d=3)


def test_ubiquity_config():
    config = UbiquityConfig(lambda u: [1.0 / u], (1, 2, 4), 0.5, 0.5)
    assert config.rho_decays()
    assert config.radii(2).tolist() == [0.25]
    with pytest.raises(ConfigurationError):
        UbiquityConfig(lambda u: [1.0 / u], (2, 1), 0.5, 0.5)
