import math
from fractions import Fraction

import numpy as np
import pytest

from src.lab.dynamo import (
    ConvergenceParams,
    DivergenceParams,
    SFParams,
    bkm_alpha,
    bkm_bound,
    build_embedding,
    build_g_convergence,
    build_g_divergence,
    dual_closed_form,
    good_set_lambda,
    good_set_sf_params,
    in_SF,
    in_good_set,
    in_minor_set,
    kT_parameters,
    minor_set_bound,
    minor_set_lambda,
    minor_set_sf_params,
    permutation_factors,
    project_to_rational,
    select_weights,
    sf_measure_split,
    transport_check,
)
from src.lab.lattice import SquareMatrix, dual_matrix
from src.lab.manifold import Box, builtin_chart
from src.utils.errors import BudgetExceededError, ConfigurationError, PreconditionError

F = Fraction
E = math.e


def divergence_params(c):
    return DivergenceParams(c, 100, (F(1, 10), F(1, 10)), (F(1, 10),))


def random_point(chart, rng):
    return list(chart.domain.lo + (chart.domain.hi - chart.domain.lo) * rng.uniform(0.05, 0.95, size=chart.d))


def test_full_embedding_parabola(parabola):
    u = build_embedding("full", parabola, [1])
    assert u.exact
    assert u.equals(SquareMatrix.from_rows([[1, -2, -1], [0, 1, 1], [0, 0, 1]]))


def test_embedding_at_flat_point(parabola, veronese3):
    for chart in (parabola, veronese3):
        u = build_embedding("full", chart, [F(0)])
        assert u.equals(SquareMatrix.identity(chart.n + 1))


@pytest.mark.parametrize("name", ["parabola", "cubic", "veronese4", "circle", "sphere", "cylinder"])
def test_embedding_is_unipotent(name, rng):
    chart = builtin_chart(name)
    for _ in range(20):
        u = build_embedding("block", chart, random_point(chart, rng))
        a = u.to_numpy()
        assert np.allclose(np.tril(a, -1), 0)
        assert np.allclose(np.diag(a), 1)


def test_embedding_kind_mismatch():
    cylinder = builtin_chart("cylinder")
    with pytest.raises(ConfigurationError):
        build_embedding("full", cylinder, [0.5, 1.0])
    with pytest.raises(ConfigurationError):
        build_embedding("diagonal", builtin_chart("parabola"), [0.5])


@pytest.mark.parametrize("name", ["parabola", "cubic", "veronese3", "veronese5"])
def test_dual_closed_form_exact(name):
    chart = builtin_chart(name)
    for x in (F(-3, 2), F(1, 3), F(7, 5)):
        assert dual_matrix(build_embedding("full", chart, [x])).equals(dual_closed_form(chart, [x]))


def test_dual_block_factorization(rng):
    cylinder = builtin_chart("cylinder")
    w1, w2 = permutation_factors(cylinder.layout)
    for _ in range(10):
        x = random_point(cylinder, rng)
        lhs = dual_matrix(build_embedding("block", cylinder, x))
        rhs = w1 @ dual_closed_form(cylinder, x) @ w2
        assert lhs.equals(rhs, rtol=1e-12)


def test_permutation_factors_monge(parabola):
    w1, w2 = permutation_factors(parabola.layout)
    assert w1.equals(SquareMatrix.identity(3))
    assert w2.equals(SquareMatrix.identity(3))


def test_g_divergence(parabola):
    g = build_g_divergence(divergence_params(F(1, 2)), parabola.layout)
    assert g.equals(SquareMatrix.diag([F(1, 5), F(1, 5), F(25)]))


def test_g_divergence_dual_is_conjugate(parabola):
    g = build_g_divergence(divergence_params(F(1, 2)), parabola.layout)
    flipped = SquareMatrix(g.entries[::-1, ::-1].copy(), True)
    assert dual_matrix(g.inverse()).equals(flipped)


def test_g_divergence_rejects_constraint(parabola):
    p = DivergenceParams(F(1, 2), 50, (F(1, 10), F(1, 10)), (F(1, 10),))
    with pytest.raises(PreconditionError):
        build_g_divergence(p, parabola.layout)


def test_g_convergence():
    p = ConvergenceParams.create(1, (1 / E, 1 / E), (1 / E,))
    assert p.phi == pytest.approx(math.exp(-1 / 3))
    g_conv, a, frak_a = build_g_convergence(p)
    assert g_conv.det() == pytest.approx(1.0)
    assert a.equals(frak_a)


def test_scaling_is_identity_on_balanced_weights():
    t = 1
    eps = (0.2, 0.3)
    p = ConvergenceParams.create(t, eps, (0.2 ** 2 / E,))
    _, a, _ = build_g_convergence(p)
    assert np.allclose(a.to_numpy(), np.eye(3))


def test_convergence_params_reject_bad_chain():
    with pytest.raises(PreconditionError):
        ConvergenceParams.create(1, (0.5, 0.2), (0.2,))
    with pytest.raises(PreconditionError):
        ConvergenceParams.create(1, (0.5, 1.0), (0.5,))


def test_select_weights_divergence(parabola):
    selection = select_weights("divergence", (F(1, 10), F(1, 10)), 100, parabola.layout)
    assert selection.eps_prime == (F(1, 10),)
    p = DivergenceParams(F(1, 2), 100, (F(1, 10), F(1, 10)), selection.eps_prime)
    assert p.constraint_value(parabola.layout) == 1
    assert selection.predicates["goal1"].holds


def test_goal1_matches_product_condition(parabola, rng):
    for _ in range(1000):
        eps = sorted(rng.uniform(0.01, 1.0, size=2))
        Q = float(rng.uniform(1.0, 200.0))
        selection = select_weights("divergence", eps, Q, parabola.layout)
        assert selection.predicates["goal1"].holds == (eps[0] * eps[1] * Q <= 1)
        p = DivergenceParams(0.5, Q, tuple(eps), selection.eps_prime)
        assert p.constraint_value(parabola.layout) == pytest.approx(1.0, rel=1e-12)


def test_select_weights_convergence():
    layout = builtin_chart("sphere").layout
    selection = select_weights("convergence", (0.1, 0.2, 0.3), 2, layout)
    assert selection.eps_prime == (0.3, 0.3)
    assert "eps_le_sqrt" in selection.predicates


def test_select_weights_unknown_mode(parabola):
    with pytest.raises(ConfigurationError):
        select_weights("sideways", (0.1, 0.1), 10, parabola.layout)


def test_kT_parameters(parabola):
    kt = kT_parameters(1, (0.1, 0.1), (0.1,), parabola.layout)
    assert kt.K == pytest.approx((10.0,))
    assert kt.T == pytest.approx((20.0, 10.0))
    assert kt.max_T_ratio == pytest.approx(2.0)


def test_good_set_on_diagonal_lattice(parabola):
    assert good_set_lambda(parabola, [F(0)], divergence_params(F(1, 2))) == pytest.approx(5.0)
    assert not in_good_set(parabola, [F(0)], divergence_params(F(1, 2)))
    assert in_good_set(parabola, [F(0)], divergence_params(F(2, 5)))


def test_minor_set_at_flat_point(parabola):
    eps = (1 / E, 1 / E)
    selection = select_weights("convergence", eps, 1, parabola.layout)
    p = ConvergenceParams.create(1, eps, selection.eps_prime)
    assert minor_set_lambda(parabola, [0.0], p) == pytest.approx(p.phi * E)
    assert in_minor_set(parabola, [0.0], p)


def test_in_SF_trivial_witness(parabola):
    p = SFParams.with_order(1.0, (1e6,), (2, 2), l=2)
    witness = in_SF(parabola, [0.3], p)
    assert witness.a == (1, 0)
    assert witness.a0 == 0


def test_in_SF_no_witness(parabola):
    assert in_SF(parabola, [0.5], SFParams.with_order(0.1, (0.1,), (2, 2), l=2)) is None
    assert in_SF(parabola, [0.5], SFParams.with_order(1.0, (1.0,), (1, 1), l=2)) is None


def test_in_SF_witness_satisfies_inequalities(veronese3, rng):
    p = SFParams.with_order(0.05, (3.0,), (6, 6, 6), l=3)
    for _ in range(20):
        x = [float(rng.uniform(-1.5, 1.5))]
        witness = in_SF(veronese3, x, p)
        if witness is None:
            continue
        a = np.array(witness.a)
        y = np.array([x[0], x[0] ** 2, x[0] ** 3])
        assert abs(witness.a0 + y @ a) < 0.05
        assert abs(np.array([1.0, 2 * x[0], 3 * x[0] ** 2]) @ a) < 3.0
        assert np.all(np.abs(a) < 6)


def test_in_SF_budget(parabola):
    with pytest.raises(BudgetExceededError):
        in_SF(parabola, [0.5], SFParams.with_order(0.1, (1.0,), (1000, 1000), l=2), budget=100)


def test_bkm_alpha():
    assert bkm_alpha(1, 2, 2) == pytest.approx(1 / 9)


def test_bkm_bound_unit_parameters():
    p = SFParams.with_order(1.0, (1.0,), (1.0, 1.0), l=2)
    bound = bkm_bound(p, 1, 1.0, enforce_condition=False)
    assert (bound.term1, bound.term2, bound.total) == pytest.approx((1.0, 1.0, 2.0))
    with pytest.raises(PreconditionError):
        bkm_bound(p, 1, 1.0)


def test_bkm_bound_homogeneity():
    base = bkm_bound(SFParams.with_order(0.25, (2.0,), (3.0, 4.0), l=2), 1, 0.5)
    doubled = bkm_bound(SFParams.with_order(0.5, (2.0,), (3.0, 4.0), l=2), 1, 0.5)
    assert doubled.term1 == pytest.approx(2 * base.term1)
    assert doubled.term2 == pytest.approx(2 ** (1 / 9) * base.term2)


def test_minor_set_bound_value():
    p = ConvergenceParams.create(1, (1 / E, 1 / E), (1 / E,))
    assert minor_set_bound(p, 1, 2) == pytest.approx(1.0)


def test_sf_measure_split():
    p = ConvergenceParams.create(1, (1 / E, 1 / E), (1 / E,))
    rational, minor = sf_measure_split(p, 1, 1.0)
    assert rational == pytest.approx(1 / E)
    assert minor == pytest.approx(1.0)


@pytest.mark.parametrize("t", [2, 3])
def test_minor_set_inside_linear_form_set(parabola, t):
    box = Box.from_bounds([0.0], [1.0])
    eps = (0.2, 0.3)
    selection = select_weights("convergence", eps, t, parabola.layout)
    p = ConvergenceParams.create(t, eps, selection.eps_prime)
    sf = minor_set_sf_params(parabola, p, box, "certified")
    checked = 0
    for k in range(50):
        x = [k / 49]
        if in_minor_set(parabola, x, p):
            assert in_SF(parabola, x, sf) is not None, x
            checked += 1
    assert checked > 0


def test_good_set_complement_inside_linear_form_set(parabola):
    box = Box.from_bounds([0.0], [1.0])
    p = divergence_params(F(1, 2))
    sf = good_set_sf_params(parabola, p, box, "certified")
    checked = 0
    for k in range(50):
        x = [F(k, 49)]
        if not in_good_set(parabola, x, p):
            assert in_SF(parabola, x, sf) is not None, x
            checked += 1
    assert checked > 0


def test_certified_parameters_need_large_scale(parabola):
    eps = (0.2, 0.3)
    p = ConvergenceParams.create(1, eps, (0.3,))
    with pytest.raises(PreconditionError):
        minor_set_sf_params(parabola, p, constants_mode="certified")
    with pytest.raises(ConfigurationError):
        minor_set_sf_params(parabola, p, constants_mode="loose")


def test_transport_check(parabola):
    report = transport_check(parabola, [0.51], [0.5], (2, 1), 4, (0.2, 0.3), (0.3,), 3)
    assert report.linear_holds
    assert report.linear_ratios[0] == pytest.approx(0.04 / (2 * math.sqrt(0.3 * math.exp(3))))
    assert report.dependent_ratio == pytest.approx(0.0004 / 0.3)


def test_transport_check_preconditions(parabola):
    with pytest.raises(PreconditionError):
        transport_check(parabola, [0.9], [0.5], (2, 1), 4, (0.2, 0.3), (0.3,), 3)
    with pytest.raises(PreconditionError):
        transport_check(parabola, [0.51], [0.5], (100, 50), 200, (0.2, 0.3), (0.3,), 3)
    with pytest.raises(PreconditionError):
        transport_check(parabola, [0.51], [0.5], (2, 2), 4, (0.2, 0.3), (0.3,), 3)


def test_projection_at_origin(parabola):
    witness = project_to_rational(parabola, [F(0)], divergence_params(F(2, 5)))
    assert witness.as_row() == [600, 0, 0]


def test_projection_bounds(parabola, rng):
    p = divergence_params(F(2, 5))
    projected = 0
    for _ in range(30):
        x = [F(int(rng.integers(-64, 65)), 64)]
        if not in_good_set(parabola, x, p):
            continue
        witness = project_to_rational(parabola, x, p)
        assert 300 <= witness.q <= 900
        assert witness.bounds["linear_ratio"] <= 1
        assert witness.bounds["dependent_ratio"] <= 1
        assert parabola.domain.contains([witness.a[0] / witness.q])
        projected += 1
    assert projected > 0


@pytest.mark.slow
@pytest.mark.parametrize(
    "name,params",
    [
        ("parabola", DivergenceParams(F(2, 5), 100, (F(1, 10),) * 2, (F(1, 10),))),
        ("veronese3", DivergenceParams(F(2, 5), 1000, (F(1, 10),) * 3, (F(1, 10),))),
    ],
)
def test_projection_certifies_random_draws(name, params, rng):
    chart = builtin_chart(name)
    N = chart.n + 1
    projected = 0
    for _ in range(1000):
        x = [F(int(rng.integers(-1024, 1025)), 1024)]
        try:
            witness = project_to_rational(chart, x, params)
        except PreconditionError:
            continue
        assert N * params.Q <= witness.q <= 3 * N * params.Q
        assert witness.bounds["linear_ratio"] <= 1
        assert witness.bounds["dependent_ratio"] <= 1
        assert chart.domain.contains([witness.a[0] / witness.q])
        projected += 1
    assert projected > 0


def test_projection_rejects_bad_point(parabola):
    with pytest.raises(PreconditionError):
        project_to_rational(parabola, [F(0)], divergence_params(F(1, 2)))
