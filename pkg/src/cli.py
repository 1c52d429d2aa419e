"""Command-line surface of the laboratory.

Every subcommand writes its rows to stdout (or ``--out``) as CSV or JSON
lines; logs go to stderr. Exit codes: 0 success, 1 counterexample or failed
check, 2 configuration or precondition error, 3 budget exceeded.
"""

import argparse
import logging
import sys
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from src.config import settings
from src.graph.agent import run_experiment
from src.graph.report_formatter import report_formatter
from src.graph.state import ExperimentConfig, Report, load_experiment_config
from src.lab.approxfn import (
    divergence_schedule,
    parse_psi_spec,
    permutation_split,
    regularize_trace,
    weight_system_from_specs,
)
from src.lab.counting import count_N, count_R, dyadic_cover_check
from src.lab.dynamo import (
    ConvergenceParams,
    DivergenceParams,
    SFParams,
    bkm_bound,
    good_set_lambda,
    in_SF,
    minor_set_lambda,
    project_to_rational,
    select_weights,
)
from src.lab.lattice import dual_matrix, dump_matrix, parse_matrix, successive_minima
from src.lab.manifold import Box, Chart, resolve_chart
from src.utils.context import set_run_context
from src.utils.errors import ConfigurationError, CounterexampleError, LabError
from src.utils.logger import setup_logging

logger = logging.getLogger(__name__)

Rows = Tuple[List[str], List[Dict[str, Any]]]


def _rational(text: str) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a rational number: {text!r}") from None


def _box(chart: Chart, bounds: Optional[Sequence[float]]) -> Box:
    if bounds is None:
        return chart.domain
    if len(bounds) != 2 * chart.d:
        raise ConfigurationError(f"--box needs {2 * chart.d} numbers for {chart.name}")
    return Box.from_bounds(bounds[0::2], bounds[1::2])


def _point(chart: Chart, x: Sequence[Fraction]) -> List[Fraction]:
    if len(x) != chart.d:
        raise ConfigurationError(f"{chart.name} takes {chart.d} parameters, got {len(x)}")
    return list(x)


# Subcommand handlers; each returns (columns, rows) or a finished report


def cmd_count_r(args) -> Rows:
    chart = resolve_chart(args.chart)
    result = count_R(chart, args.Q, args.eps, _box(chart, args.box), collect=args.witnesses, threads=args.threads)
    if args.witnesses:
        return report_formatter.witness_rows(result.witnesses, chart.d, chart.m)
    row = {"Q": args.Q, "count": result.count, "pairs": result.pairs, "uncertain": result.uncertain,
           "certified": result.certified}
    return list(row), [row]


def cmd_count_n(args) -> Rows:
    chart = resolve_chart(args.chart)
    result = count_N(chart, _box(chart, args.box), args.eps, args.t)
    row = {"t": args.t, "count": result.count, "exact": result.exact}
    return list(row), [row]


def cmd_minima(args) -> Rows:
    basis = parse_matrix(Path(args.matrix).read_text())
    report = successive_minima(basis, args.k, threads=args.threads)
    rows = [
        {"i": i + 1, "lambda": lam, "vector": " ".join(str(v) for v in pre), "approximate": report.approximate}
        for i, (lam, pre) in enumerate(zip(report.lambdas, report.attaining_vectors))
    ]
    return ["i", "lambda", "vector", "approximate"], rows


def cmd_dual(args) -> str:
    return dump_matrix(dual_matrix(parse_matrix(Path(args.matrix).read_text())))


def _divergence_params(chart: Chart, args) -> DivergenceParams:
    selection = select_weights("divergence", args.eps, args.Q, chart.layout, c=args.c)
    for pred in selection.predicates.values():
        if pred.holds is False:
            logger.warning(f"Condition {pred.name} fails: {pred.lhs} vs {pred.rhs}")
    params = DivergenceParams(args.c, args.Q, tuple(args.eps), selection.eps_prime)
    params.check(chart.layout)
    return params


def cmd_good_set(args) -> Rows:
    chart = resolve_chart(args.chart)
    params = _divergence_params(chart, args)
    lam = good_set_lambda(chart, _point(chart, args.x), params)
    threshold = float(args.c) ** (-chart.n)
    row = {"lambda": lam, "threshold": threshold, "in_good_set": lam <= threshold}
    return list(row), [row]


def cmd_minor_set(args) -> Rows:
    chart = resolve_chart(args.chart)
    eps = [float(e) for e in args.eps]
    selection = select_weights("convergence", eps, args.t, chart.layout)
    params = ConvergenceParams.create(args.t, eps, selection.eps_prime)
    lam = minor_set_lambda(chart, [float(v) for v in _point(chart, args.x)], params)
    row = {"t": args.t, "lambda": lam, "phi": params.phi, "in_minor_set": lam > params.phi}
    return list(row), [row]


def cmd_sf(args) -> Rows:
    chart = resolve_chart(args.chart)
    params = SFParams.with_order(args.delta, args.K, args.T, chart.order, layout=chart.layout)
    hit = in_SF(chart, [float(v) for v in _point(chart, args.x)], params, threads=args.threads)
    row = {
        "in_sf": hit is not None,
        "a0": None if hit is None else hit.a0,
        "a": None if hit is None else " ".join(str(v) for v in hit.a),
    }
    return list(row), [row]


def cmd_bkm_bound(args) -> Rows:
    params = SFParams.with_order(args.delta, args.K, args.T, args.l, E=args.E, r=args.r)
    bound = bkm_bound(params, len(args.K), args.measure, enforce_condition=not args.no_condition)
    row = {"term1": bound.term1, "term2": bound.term2, "total": bound.total, "alpha": params.alpha}
    return list(row), [row]


def cmd_project(args) -> Rows:
    chart = resolve_chart(args.chart)
    params = _divergence_params(chart, args)
    witness = project_to_rational(chart, _point(chart, args.x), params)
    columns, rows = report_formatter.witness_rows([witness], chart.d, chart.m)
    rows[0].update(witness.bounds)
    return columns + list(witness.bounds), rows


def cmd_regularize(args) -> Rows:
    ws = weight_system_from_specs(args.psi)
    trace = regularize_trace(ws, parse_psi_spec(args.phi), args.horizon)
    table = trace.weights.table(1, args.horizon)
    columns = ["q", *(f"psi{i + 1}" for i in range(ws.n)), "product", "target", "case"]
    rows = []
    for k in range(args.horizon):
        row = {"q": k + 1}
        row.update({f"psi{i + 1}": float(table[i, k]) for i in range(ws.n)})
        row.update({"product": float(trace.products[k]), "target": float(trace.targets[k]), "case": int(trace.cases[k])})
        rows.append(row)
    logger.info(f"q* = {trace.q_star}")
    return columns, rows


def cmd_split(args) -> Rows:
    split = permutation_split(weight_system_from_specs(args.psi), args.horizon)
    rows = [
        {
            "permutation": " ".join(str(v) for v in perm),
            "size": len(seq),
            "first": int(seq[0]),
            "last": int(seq[-1]),
        }
        for perm, seq in zip(split.permutations, split.sequences)
    ]
    return ["permutation", "size", "first", "last"], rows


def cmd_schedule(args) -> Rows:
    schedule = divergence_schedule(weight_system_from_specs(args.psi), args.s_prime, args.t_max)
    rows = [
        {
            "t": r.t,
            "klass": r.klass,
            "growth": r.lhs_growth,
            "growth_bound": r.rhs_growth,
            "standing": r.lhs_standing,
            "standing_bound": r.rhs_standing,
            "standing_holds": r.standing_holds,
        }
        for r in schedule.records
    ]
    return ["t", "klass", "growth", "growth_bound", "standing", "standing_bound", "standing_holds"], rows


def cmd_mult_cover(args) -> Rows:
    chart = resolve_chart(args.chart)
    report = dyadic_cover_check(chart, [float(v) for v in _point(chart, args.x)], parse_psi_spec(args.psi),
                                args.t, args.w0)
    rows = [
        {
            "q": r.q,
            "p": " ".join(str(v) for v in r.p),
            "in_tilde": r.in_tilde,
            "k": None if r.k is None else " ".join(str(v) for v in r.k),
            "slack": r.slack,
            "min_slack": r.min_slack,
        }
        for r in report.records
    ]
    if not report.passed:
        raise CounterexampleError(
            f"{len(report.counterexamples)} witnesses escape the cover at t={args.t}",
            {"t": args.t, "counterexamples": len(report.counterexamples)},
        )
    return ["q", "p", "in_tilde", "k", "slack", "min_slack"], rows


def _sweep_config(kind: str, args) -> ExperimentConfig:
    fields = {
        "kind": kind,
        "chart": args.chart,
        "psi": args.psi,
        "psi_convergent": args.psi_convergent,
        "t_list": args.t_list,
        "q_windows": args.q_windows,
        "samples": args.samples,
        "grid": args.grid,
        "seed": args.seed,
        "threads": args.threads,
        "format": args.format,
    }
    if args.box is not None:
        fields["box"] = list(zip(args.box[0::2], args.box[1::2]))
    return ExperimentConfig(**{k: v for k, v in fields.items() if v is not None})


def cmd_ubiquity(args) -> Report:
    return run_experiment(_sweep_config("ubiquity", args))


def cmd_dichotomy(args) -> Report:
    return run_experiment(_sweep_config("dichotomy", args))


def cmd_experiment(args) -> Report:
    overrides = {"seed": args.seed, "threads": args.threads, "output": args.out, "format": args.format}
    config = load_experiment_config(Path(args.config), overrides)
    args.out = config.output
    args.format = config.format
    return run_experiment(config)


# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="khintchine-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="base seed for random streams")
    parser.add_argument("--threads", type=int, default=None, help="worker threads")
    parser.add_argument("--out", default=None, help="output path (default stdout)")
    parser.add_argument("--format", choices=["csv", "json-lines"], default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler: Callable, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        return p

    def chart_args(p: argparse.ArgumentParser, box: bool = True, x: bool = False):
        p.add_argument("--chart", default="parabola", help="builtin name or chart file")
        if box:
            p.add_argument("--box", type=float, nargs="+", default=None, help="lo_1 hi_1 [lo_2 hi_2 ...]")
        if x:
            p.add_argument("--x", type=_rational, nargs="+", required=True, help="parameter point")

    p = command("count-r", cmd_count_r, "count rational points near the chart")
    chart_args(p)
    p.add_argument("--Q", type=_rational, required=True)
    p.add_argument("--eps", type=_rational, nargs="+", required=True, help="one bound per dependent coordinate")
    p.add_argument("--witnesses", action="store_true", help="list the witnesses instead of the count")

    p = command("count-n", cmd_count_n, "count rational points within eps_i / e^t of the chart")
    chart_args(p)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--eps", type=float, nargs="+", required=True, help="one bound per coordinate")

    p = command("minima", cmd_minima, "successive minima of a lattice basis")
    p.add_argument("matrix", help="file with one matrix row per line")
    p.add_argument("--k", type=int, default=None)

    p = command("dual", cmd_dual, "dual matrix under the long Weyl element")
    p.add_argument("matrix")

    for name, handler, help_text in (
        ("good-set", cmd_good_set, "good-set membership for the divergence flow"),
        ("project", cmd_project, "project a good point to a rational witness"),
    ):
        p = command(name, handler, help_text)
        chart_args(p, box=False, x=True)
        p.add_argument("--c", type=_rational, default=Fraction(1, 2))
        p.add_argument("--Q", type=_rational, required=True)
        p.add_argument("--eps", type=_rational, nargs="+", required=True, help="chain of n weights")

    p = command("minor-set", cmd_minor_set, "minor-set membership for the convergence flow")
    chart_args(p, box=False, x=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--eps", type=float, nargs="+", required=True)

    p = command("sf", cmd_sf, "search for a small linear form")
    chart_args(p, box=False, x=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--K", type=float, nargs="+", required=True)
    p.add_argument("--T", type=float, nargs="+", required=True)

    p = command("bkm-bound", cmd_bkm_bound, "nondivergence measure bound")
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--K", type=float, nargs="+", required=True)
    p.add_argument("--T", type=float, nargs="+", required=True)
    p.add_argument("--l", type=int, default=2, help="nondegeneracy order")
    p.add_argument("--E", type=float, default=1.0)
    p.add_argument("--r", type=float, default=1.0)
    p.add_argument("--measure", type=float, default=1.0, help="measure of the ball")
    p.add_argument("--no-condition", action="store_true", help="skip the nondivergence condition check")

    p = command("regularize", cmd_regularize, "regularize a chained weight system")
    p.add_argument("--psi", nargs="+", required=True, help="function specs")
    p.add_argument("--phi", required=True)
    p.add_argument("--horizon", type=int, default=settings.TUPLE_HORIZON)

    p = command("split", cmd_split, "split denominators by the order of psi_i(q)")
    p.add_argument("--psi", nargs="+", required=True)
    p.add_argument("--horizon", type=int, default=settings.TUPLE_HORIZON)

    p = command("schedule", cmd_schedule, "dyadic schedule of the divergence case")
    p.add_argument("--psi", nargs="+", required=True)
    p.add_argument("--s-prime", dest="s_prime", type=float, default=0.05)
    p.add_argument("--t-max", dest="t_max", type=int, default=settings.MAX_T)

    for name, handler, help_text in (
        ("ubiquity", cmd_ubiquity, "ubiquity density sweep"),
        ("dichotomy", cmd_dichotomy, "hit fractions for a divergent and a convergent system"),
    ):
        p = command(name, handler, help_text)
        chart_args(p)
        p.add_argument("--psi", nargs="+", required=True)
        p.add_argument("--psi-convergent", dest="psi_convergent", nargs="+", default=None)
        p.add_argument("--t-list", dest="t_list", type=int, nargs="+", default=None)
        p.add_argument("--q-windows", dest="q_windows", type=int, nargs="+", default=None)
        p.add_argument("--samples", type=int, default=None)
        p.add_argument("--grid", type=int, default=None)

    p = command("mult-cover", cmd_mult_cover, "multiplicative dyadic cover check at one point")
    chart_args(p, box=False, x=True)
    p.add_argument("--psi", required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--w0", type=float, default=3.0)

    p = command("experiment", cmd_experiment, "run an experiment file")
    p.add_argument("config", help="TOML experiment file")

    return parser


def _write(text: str, out: Optional[str]) -> None:
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        logger.info(f"Wrote {path}")
    else:
        sys.stdout.write(text)


def _render(result: Any, fmt: str) -> Tuple[str, int]:
    if isinstance(result, Report):
        return report_formatter.render(result, fmt), 1 if result.passed is False else 0
    if isinstance(result, str):
        return result, 0
    columns, rows = result
    if fmt == "json-lines":
        return report_formatter.rows_to_json_lines(rows), 0
    return report_formatter.rows_to_csv(columns, rows), 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and return the exit code."""
    setup_logging(stream=sys.stderr)
    args = build_parser().parse_args(argv)
    set_run_context(threads=args.threads, seed=args.seed)

    try:
        result = args.handler(args)
        text, code = _render(result, args.format or "csv")
        _write(text, args.out)
        return code
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return 2
    except LabError as e:
        logger.error(f"{type(e).__name__}: {e}", exc_info=settings.DEBUG)
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
