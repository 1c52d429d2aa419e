"""Pipeline nodes for the experiment graph."""

import hashlib
import json
import logging
import math
from typing import Any, Dict, List

import numpy as np
import scipy

from src import __version__
from src.graph.report_formatter import report_formatter
from src.graph.state import ExperimentState
from src.lab.approxfn import (
    WeightSystem,
    divergence_schedule,
    partial_sum_series,
    series_verdict,
)
from src.lab.counting import (
    DyadicCover,
    dyadic_cover_check,
    mc_measure,
    minkowski_witness,
    near_point_boxes,
    neighborhood_union,
    rect_union_measure,
    count_R,
    ubiquity_density,
    ubiquity_ratio_sum,
    witness_denominators,
)
from src.lab.dynamo import (
    ConvergenceParams,
    bkm_alpha,
    in_minor_set,
    minor_set_bound,
    select_weights,
    sf_measure_split,
)
from src.lab.manifold import Box, chart_points
from src.utils.errors import ConfigurationError, PreconditionError
from src.utils.workers import ordered_map

logger = logging.getLogger(__name__)

# Random streams, so the sampling of one pipeline stage never shifts another
POINT_STREAM = 1
MINKOWSKI_STREAM = 2
MEASURE_STREAM = 100

# Trend thresholds for the dichotomy: almost every point is hit under the
# divergent system, the convergent tail thins out
DIVERGENT_FLOOR = 0.99
CONVERGENT_CEILING = 0.2

# Fields that change how a run executes or where it writes, never its results
RUN_ONLY_FIELDS = {"threads", "output", "format"}


def _sample_points(region: Box, count: int, seed: int, stream: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, 0])))
    return region.lo + (region.hi - region.lo) * rng.random((count, region.dim))


def _grid_points(region: Box, count: int, seed: int) -> np.ndarray:
    """Cell centers on a one-dimensional region, random points otherwise."""
    if region.dim == 1:
        step = (region.hi[0] - region.lo[0]) / count
        return (region.lo[0] + (np.arange(count) + 0.5) * step)[:, None]
    return _sample_points(region, count, seed, POINT_STREAM)


def _verdict(ws: WeightSystem, mode: str = "plain", n: int = None):
    try:
        return series_verdict(ws, mode, n)
    except ConfigurationError:
        return None


def load_inputs(state: ExperimentState) -> Dict[str, Any]:
    """Resolve the chart and region named by the configuration.

    Args:
        state: Graph state holding the validated configuration

    Returns:
        State update with chart, region and empty result lists
    """
    config = state["config"]
    logger.info(f"Loading inputs for {config.kind} experiment on {config.chart}")
    chart = config.resolve_chart()
    region = config.region(chart)
    return {
        "chart": chart,
        "region": region,
        "records": [],
        "checks": [],
        "summary": {},
        "actions_taken": [f"Resolved chart {chart.name} on box {list(zip(region.lo, region.hi))}"],
    }


def record_provenance(state: ExperimentState) -> Dict[str, Any]:
    """Hash the configuration and record seed, versions and calibration choices."""
    config = state["config"]
    canonical = json.dumps(config.model_dump(mode="json", exclude=RUN_ONLY_FIELDS), sort_keys=True)
    provenance = {
        "config_hash": hashlib.sha256(canonical.encode("utf-8")).hexdigest(),
        "seed": config.seed,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
        "calibration": config.calibration(),
    }
    return {"provenance": provenance, "actions_taken": state["actions_taken"] + ["Recorded provenance"]}


def run_dichotomy(state: ExperimentState) -> Dict[str, Any]:
    """Hit fractions of sampled points for a divergent and a convergent weight system.

    For each window end Q the record holds the fraction of points with a
    weighted witness in the window ``(Q_prev, Q]`` and in ``[1, Q]``.
    """
    config, chart, region = state["config"], state["chart"], state["region"]
    xs = _sample_points(region, config.samples, config.seed, POINT_STREAM)
    q_max = int(max(config.q_windows))
    records: List[Dict[str, Any]] = []
    finals: Dict[str, float] = {}

    for label, ws in (("divergent", config.weights()), ("convergent", config.weights(convergent=True))):
        hits = ordered_map(lambda x: witness_denominators(chart, x, ws, 1, q_max), list(xs), config.threads)
        first = np.array([qs[0] if len(qs) else np.inf for qs in hits])
        prev = 0
        for Q in config.q_windows:
            in_window = sum(1 for qs in hits if np.any((qs > prev) & (qs <= Q)))
            records.append({
                "system": label,
                "Q": int(Q),
                "window_fraction": in_window / len(xs),
                "cumulative_fraction": float(np.mean(first <= Q)),
                "partial_sum": partial_sum_series(ws, Q),
                "verdict": _verdict(ws),
            })
            prev = int(Q)
        finals[label] = records[-1]["window_fraction"]
        logger.info(f"Dichotomy {label}: last-window hit fraction {finals[label]:.4f}")

    divergent = [r for r in records if r["system"] == "divergent"]
    convergent = [r["window_fraction"] for r in records if r["system"] == "convergent"]
    covered = divergent[-1]["cumulative_fraction"]
    checks = [
        report_formatter.check(
            "divergent last-window fraction >= convergent last-window fraction",
            finals["divergent"], finals["convergent"], finals["divergent"] >= finals["convergent"],
        ),
        report_formatter.check(
            "divergent cumulative fraction >= floor", covered, DIVERGENT_FLOOR, covered >= DIVERGENT_FLOOR,
        ),
        report_formatter.check(
            "convergent window fraction decreasing in the window start",
            convergent[-1], convergent[0], all(b < a for a, b in zip(convergent, convergent[1:])),
        ),
        report_formatter.check(
            "convergent last-window fraction < ceiling",
            finals["convergent"], CONVERGENT_CEILING, finals["convergent"] < CONVERGENT_CEILING,
        ),
    ]
    summary = {
        "divergent_final": finals["divergent"],
        "convergent_final": finals["convergent"],
        "divergent_covered": covered,
    }
    return {"records": records, "checks": checks, "summary": summary}


def _case_one_radii(psi: np.ndarray, q: float, chart) -> np.ndarray:
    """``rho_1 = (q prod_{i != 1} psi_i)^-1 / q`` and ``rho_i = psi_i / q`` on the variables."""
    variables = chart.layout.I
    rho = np.array([psi[pos] / q for pos in variables])
    others = math.prod(float(psi[pos]) for pos in range(chart.n) if pos != variables[0])
    rho[0] = 1.0 / (q * others) / q
    return rho


def run_ubiquity(state: ExperimentState) -> Dict[str, Any]:
    """Density of the rectangle system at the dyadic scales of the schedule.

    Scales in T1 get the rectangles around rational points near the chart
    with the radii of the first case; scales in T2 get the rate at which
    sampled points admit a Minkowski witness.
    """
    config, chart, region = state["config"], state["chart"], state["region"]
    ws = config.weights()
    schedule = divergence_schedule(ws, config.s_prime, max(config.t_list))
    layout = chart.layout
    records: List[Dict[str, Any]] = []
    checks = []

    for t in config.t_list:
        klass = schedule.class_of_t.get(t)
        q = 2.0 ** t
        psi = ws.at(q)
        record: Dict[str, Any] = {"t": t, "klass": klass or "none", "Q": int(q), "k0": config.k0}
        if klass == "T1":
            rho = config.rho0 * _case_one_radii(psi, q, chart)
            eps_J = [float(psi[pos]) for pos in layout.J]
            boxes = neighborhood_union(chart, q, eps_J, region, rho, threads=config.threads)
            density = ubiquity_density(boxes, region, config.grid)
            record.update({
                "witnesses": sum(b.multiplicity for b in boxes),
                "rectangles": len(boxes),
                "density": density,
                "ratio_term": ubiquity_ratio_sum(ws, [t], chart.d),
            })
            checks.append(report_formatter.check(f"density at t={t} >= k0", density, config.k0, density >= config.k0))
        elif klass == "T2":
            xs = _sample_points(region, config.samples, config.seed, MINKOWSKI_STREAM)
            ys = chart_points(chart, xs)
            try:
                found = sum(1 for y in ys if minkowski_witness(y, psi, q) is not None)
                rate = found / len(ys)
            except PreconditionError as e:
                logger.warning(f"Minkowski fallback skipped at t={t}: {e}")
                rate = None
            record["minkowski_rate"] = rate
            if rate is not None:
                checks.append(report_formatter.check(f"Minkowski witness rate at t={t}", rate, 1.0, rate == 1.0))
        records.append(record)

    t1 = [t for t in config.t_list if schedule.class_of_t.get(t) == "T1"]
    densities = [r["density"] for r in records if r.get("density") is not None]
    summary = {
        "t1": t1,
        "t2": [t for t in config.t_list if schedule.class_of_t.get(t) == "T2"],
        "min_density": min(densities) if densities else None,
        "ratio_sum": ubiquity_ratio_sum(ws, t1, chart.d) if t1 else 0.0,
        "s": schedule.s,
    }
    return {"records": records, "checks": checks, "summary": summary}


def _minor_estimate(chart, region: Box, p: ConvergenceParams, config, stream: int):
    return mc_measure(
        lambda x: in_minor_set(chart, x, p), region, config.samples, config.seed,
        stream=stream, threads=config.threads,
    )


def run_convergence_cover(state: ExperimentState) -> Dict[str, Any]:
    """Measures of the two pieces covering the approximable set at each level t.

    The minor-set piece uses weights ``e psi_i(e^(t-1))``; the rational piece
    is the union of boxes of radius ``psi_i(e^(t-1)) / e^(t-1)`` around the
    points counted at level t - 1, compared with ``e^t prod psi_i(e^(t-1)) mu(B0)``.
    """
    config, chart, region = state["config"], state["chart"], state["region"]
    ws = config.weights()
    layout = chart.layout
    records: List[Dict[str, Any]] = []
    checks = []

    for t in config.t_list:
        q1 = math.exp(t - 1)
        psi = ws.at(q1)
        record: Dict[str, Any] = {"t": t}

        eps_A = [math.e * float(v) for v in psi]
        if all(e < 1 for e in eps_A) and all(a <= b for a, b in zip(eps_A, eps_A[1:])):
            selection = select_weights("convergence", eps_A, t, layout)
            p = ConvergenceParams.create(t, eps_A, selection.eps_prime)
            est = _minor_estimate(chart, region, p, config, MEASURE_STREAM + t)
            record.update({
                "A_estimate": est.estimate,
                "A_lower": est.lower,
                "A_upper": est.upper,
                "minor_bound": minor_set_bound(p, chart.d, chart.order, layout) if layout.m else None,
            })
            if layout.m:
                rational_term, minor_term = sf_measure_split(p, chart.d, region.volume, chart.order, layout)
                record.update({"sf_rational_term": rational_term, "sf_minor_term": minor_term})
        else:
            logger.info(f"Minor-set weights at t={t} leave (0, 1) or break the chain; skipping the A piece")

        radii = [float(psi[pos]) / q1 for pos in layout.I]
        boxes = near_point_boxes(chart, region, psi, t - 1, radii)
        union = rect_union_measure(boxes, region)
        bound = math.exp(t) * math.prod(float(v) for v in psi) * region.volume
        record.update({
            "B_measure": union.measure,
            "B_exact": union.exact,
            "B_bound": bound,
            "B_ratio": union.measure / bound,
        })
        checks.append(report_formatter.check(f"mu(B_t) vs e^t prod psi(e^(t-1)) mu(B0) at t={t}", union.measure, bound, None))
        records.append(record)

    summary = {
        "sum_A": sum(r.get("A_estimate") or 0.0 for r in records),
        "sum_B": sum(r["B_measure"] for r in records),
        "sum_B_bound": sum(r["B_bound"] for r in records),
        "verdict": _verdict(ws),
    }
    return {"records": records, "checks": checks, "summary": summary}


def run_multiplicative(state: ExperimentState) -> Dict[str, Any]:
    """Sweep the dyadic cover check over a point grid for every level t."""
    config, chart, region = state["config"], state["chart"], state["region"]
    psi = config.weights().psis[0]
    points = _grid_points(region, config.samples, config.seed)
    records: List[Dict[str, Any]] = []
    checks = []

    for t in config.t_list:
        reports = ordered_map(lambda x: dyadic_cover_check(chart, x, psi, t, config.w0), list(points), config.threads)
        witnesses = sum(len(r.records) for r in reports)
        in_tilde = sum(1 for r in reports for rec in r.records if rec.in_tilde)
        counterexamples = sum(len(r.counterexamples) for r in reports)
        slacks = [r.max_slack for r in reports if r.max_slack is not None]

        cover = DyadicCover.at_level(psi, t, config.w0, chart.n, shift=1)
        products = np.prod(np.atleast_2d(cover.eps_of_k(cover.k_array())), axis=1)
        target = math.exp(chart.n - 1) * cover.level
        product_error = float(np.max(np.abs(products - target)) / target)

        records.append({
            "t": t,
            "points": len(points),
            "witnesses": witnesses,
            "in_tilde": in_tilde,
            "covered": witnesses - in_tilde - counterexamples,
            "counterexamples": counterexamples,
            "max_slack": max(slacks) if slacks else None,
            "slack_bound": math.e,
            "family_size": cover.size,
            "product_error": product_error,
        })
        checks.append(report_formatter.check(f"uncovered witnesses at t={t}", counterexamples, 0, counterexamples == 0))
        checks.append(report_formatter.check(f"product identity error at t={t}", product_error, 1e-12, product_error <= 1e-12))

    q_top = math.exp(max(config.t_list))
    single = WeightSystem((psi,))
    qs = np.arange(1, math.floor(q_top) + 1, dtype=float)
    lower_ratio = float(np.min(psi.values(qs) * qs ** (1 + config.c_frak)))
    summary = {
        "log_weighted_partial_sum": partial_sum_series(single, q_top, "log_weighted", chart.n),
        "verdict": _verdict(single, "log_weighted", chart.n),
        "psi_lower_bound_ratio": lower_ratio,
    }
    return {"records": records, "checks": checks, "summary": summary}


def run_counting_scaling(state: ExperimentState) -> Dict[str, Any]:
    """Normalized rational-point counts ``count / (prod eps_J Q^(d+1) mu(B))`` across Q."""
    config, chart, region = state["config"], state["chart"], state["region"]
    scale = math.prod(config.eps) * region.volume
    records: List[Dict[str, Any]] = []
    for Q in config.Q_list:
        result = count_R(chart, Q, config.eps, region, threads=config.threads)
        ratio = result.count / (scale * Q ** (chart.d + 1))
        records.append({"Q": Q, "count": result.count, "pairs": result.pairs, "certified": result.certified, "ratio": ratio})
        logger.info(f"count_R at Q={Q}: {result.count} (ratio {ratio:.4f})")

    ratios = [r["ratio"] for r in records]
    low, high = min(ratios), max(ratios)
    spread = high / low if low > 0 else math.inf
    checks = [
        report_formatter.check("max ratio / min ratio <= 2", spread, 2.0, spread <= 2.0),
        report_formatter.check("min ratio >= 0.1", low, 0.1, low >= 0.1),
    ]
    return {"records": records, "checks": checks, "summary": {"min_ratio": low, "max_ratio": high}}


def run_minor_decay(state: ExperimentState) -> Dict[str, Any]:
    """Monte Carlo measure of the minor set across t against its decay bounds."""
    config, chart, region = state["config"], state["chart"], state["region"]
    layout = chart.layout
    eps = config.eps
    alpha = bkm_alpha(chart.d, chart.order, chart.n)
    records: List[Dict[str, Any]] = []

    for t in config.t_list:
        selection = select_weights("convergence", eps, t, layout)
        p = ConvergenceParams.create(t, eps, selection.eps_prime)
        est = _minor_estimate(chart, region, p, config, MEASURE_STREAM + t)
        eps_d1 = eps[layout.J[0]] if layout.m else 1.0
        lhs = eps_d1 ** chart.d * math.prod(eps[j] for j in layout.J) * math.exp(t - 1)
        rhs = math.exp(-config.c_frak * (t - 1))
        records.append({
            "t": t,
            "estimate": est.estimate,
            "lower": est.lower,
            "upper": est.upper,
            "bound": minor_set_bound(p, chart.d, chart.order, layout) if layout.m else None,
            "reference": (math.exp(config.c_frak * t) / math.exp(t / 2)) ** alpha,
            "condition_lhs": lhs,
            "condition_rhs": rhs,
            "condition_holds": lhs > rhs,
        })

    checks = []
    for a, b in zip(records, records[1:]):
        checks.append(report_formatter.check(
            f"lower(t={b['t']}) <= upper(t={a['t']})", b["lower"], a["upper"], b["lower"] <= a["upper"],
        ))
    summary = {"alpha": alpha, "estimates": [r["estimate"] for r in records]}
    return {"records": records, "checks": checks, "summary": summary}


def assemble_report(state: ExperimentState) -> Dict[str, Any]:
    """Shape the pipeline output into the final report."""
    config = state["config"]
    report = report_formatter.build_report(
        config.kind, state["records"], state["checks"], state["summary"], state["provenance"]
    )
    if report.passed is False:
        failed = [c.name for c in report.checks if c.holds is False]
        logger.warning(f"{config.kind}: {len(failed)} checks failed: {failed}")
    return {"report": report}
