from fractions import Fraction

import numpy as np
import pytest

from src.lab.manifold import (
    BUILTINS,
    Box,
    IndexLayout,
    Polynomial,
    builtin_chart,
    chart_jacobian,
    chart_points,
    eval_chart,
    parse_chart,
    resolve_chart,
    sample_rank_check,
    second_order_bound,
)
from src.utils.errors import ConfigurationError, PreconditionError

F = Fraction


def test_eval_chart_exact(parabola, veronese3):
    assert list(eval_chart(parabola, [F(1, 3)])) == [F(1, 3), F(1, 9)]
    assert list(eval_chart(veronese3, [2])) == [2, 4, 8]


def test_eval_chart_cylinder():
    y = eval_chart(builtin_chart("cylinder"), [0.6, 5.0])
    assert y == pytest.approx([0.6, 0.8, 5.0])


def test_eval_chart_outside_domain(parabola):
    with pytest.raises(PreconditionError):
        eval_chart(parabola, [3.0])


def test_chart_points_matches_eval(veronese3, rng):
    xs = rng.uniform(-1.5, 1.5, size=(20, 1))
    ys = chart_points(veronese3, xs)
    for x, y in zip(xs, ys):
        assert y == pytest.approx(eval_chart(veronese3, list(x)))


def test_jacobian_values(parabola, veronese3):
    assert chart_jacobian(parabola, [F(1, 2)]).tolist() == [[1, 1]]
    assert chart_jacobian(veronese3, [F(1)]).tolist() == [[1, 2, 3]]


@pytest.mark.parametrize("name", ["parabola", "cubic", "veronese3", "veronese4", "circle", "sphere"])
def test_jacobian_central_difference(name, rng):
    chart = builtin_chart(name)
    h = 1e-6
    for _ in range(10):
        x = chart.domain.lo + (chart.domain.hi - chart.domain.lo) * rng.uniform(0.1, 0.9, size=chart.d)
        jac = chart_jacobian(chart, x)
        for i in range(chart.d):
            step = np.zeros(chart.d)
            step[i] = h
            diff = (eval_chart(chart, x + step) - eval_chart(chart, x - step)) / (2 * h)
            assert np.allclose(jac[i], diff, rtol=1e-6, atol=1e-6)


def test_second_order_bound(parabola):
    unit = Box.from_bounds([0.0], [1.0])
    assert second_order_bound(parabola) == pytest.approx(2.0)
    assert second_order_bound(builtin_chart("cubic"), unit) == pytest.approx(6.0)
    assert second_order_bound(builtin_chart("veronese3"), unit) == pytest.approx(6.0)


def test_rank_check_passes_on_builtins():
    for name in ("parabola", "veronese3", "sphere"):
        report = sample_rank_check(builtin_chart(name), 100, seed=7)
        assert report.passed
    cylinder = sample_rank_check(builtin_chart("cylinder"), 100, seed=7)
    assert cylinder.passed and cylinder.affine_relation is None


def test_rank_check_flags_affine_relation():
    report = sample_rank_check(builtin_chart("line"), 50, seed=1)
    assert report.passed
    assert report.affine_relation is True
    assert sample_rank_check(builtin_chart("parabola"), 10, seed=1).affine_relation is False


def test_layout_positions():
    layout = IndexLayout(((1, 1), (1, 0)))
    assert layout.I == (0, 2)
    assert layout.J == (1,)
    assert (layout.d, layout.m, layout.n, layout.s) == (2, 1, 3, 2)
    with pytest.raises(ConfigurationError):
        IndexLayout(((1, 0), (1, 1)))


def test_polynomial_interval_and_integer_form():
    p = Polynomial(((( 2,), F(1, 2)), ((1,), F(1, 3))), 1)
    low, high, exact = p.interval([F(0)], [F(1)])
    assert (low, high, exact) == (F(0), F(5, 6), False)
    L, D, terms = p.integer_form()
    assert (L, D) == (6, 2)
    q, a = 7, 3
    numerator = sum(c * a ** e[0] * q ** (D - sum(e)) for e, c in terms)
    assert F(numerator, L * q ** (D - 1)) == q * p.evaluate([F(a, q)])


def test_box_operations():
    box = Box.from_bounds([0.1], [0.9])
    lo, hi = box.fraction_bounds()
    assert (lo, hi) == ([F(1, 10)], [F(9, 10)])
    assert box.volume == pytest.approx(0.8)
    assert box.contains([0.5]) and not box.contains([0.95])
    assert box.intersect(Box.from_bounds([0.95], [1.0])) is None
    with pytest.raises(PreconditionError):
        box.shrink([0.5])


def test_parse_chart(tmp_path):
    text = "blocks 1 1\ndomain -1 1\norder 2\npoly\n1/2 2\n3 1\n"
    chart = parse_chart(text, "half")
    assert chart.n == 2
    assert eval_chart(chart, [F(1, 2)])[1] == F(1, 8) + F(3, 2)

    path = tmp_path / "half.chart"
    path.write_text(text)
    assert resolve_chart(str(path)).name == "half"
    assert resolve_chart("parabola") is BUILTINS["parabola"]
    with pytest.raises(ConfigurationError):
        resolve_chart("no-such-chart")
    with pytest.raises(ConfigurationError):
        parse_chart("blocks 1 1\npoly\n1 2\n")
