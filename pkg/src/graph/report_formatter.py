"""Report shaping and serialization to CSV and JSON lines."""

import csv
import io
import json
import math
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.graph.state import Check, Report
from src.lab.dynamo import RationalWitness


class ReportFormatter:
    """Turn pipeline output into reports and reports into text."""

    # Fixed header per experiment kind
    COLUMNS: Dict[str, Tuple[str, ...]] = {
        "dichotomy": ("system", "Q", "window_fraction", "cumulative_fraction", "partial_sum", "verdict"),
        "ubiquity": ("t", "klass", "Q", "witnesses", "rectangles", "density", "k0", "minkowski_rate", "ratio_term"),
        "convergence_cover": (
            "t", "A_estimate", "A_lower", "A_upper", "minor_bound", "sf_rational_term", "sf_minor_term",
            "B_measure", "B_exact", "B_bound", "B_ratio",
        ),
        "multiplicative": (
            "t", "points", "witnesses", "in_tilde", "covered", "counterexamples", "max_slack", "slack_bound",
            "family_size", "product_error",
        ),
        "counting_scaling": ("Q", "count", "pairs", "certified", "ratio"),
        "minor_decay": (
            "t", "estimate", "lower", "upper", "bound", "reference", "condition_lhs", "condition_rhs",
            "condition_holds",
        ),
    }

    @staticmethod
    def clean(value: Any) -> Any:
        """JSON-safe scalar: numpy types unwrapped, non-finite floats to None."""
        if isinstance(value, np.generic):
            value = value.item()
        if isinstance(value, Fraction):
            return str(value)
        if isinstance(value, float) and not math.isfinite(value):
            return None
        if isinstance(value, (tuple, list, np.ndarray)):
            return [ReportFormatter.clean(v) for v in value]
        return value

    @staticmethod
    def check(name: str, lhs: Optional[float], rhs: Optional[float], holds: Optional[bool]) -> Check:
        """An inequality with both sides; ``holds=None`` marks it informational."""
        clean = ReportFormatter.clean
        return Check(
            name=name,
            lhs=clean(None if lhs is None else float(lhs)),
            rhs=clean(None if rhs is None else float(rhs)),
            holds=None if holds is None else bool(holds),
        )

    @staticmethod
    def build_report(
        kind: str,
        records: List[Dict[str, Any]],
        checks: List[Check],
        summary: Dict[str, Any],
        provenance: Dict[str, Any]
    ) -> Report:
        """Assemble a report with cleaned records in the fixed column order.

        Args:
            kind: Experiment kind
            records: One dict per sweep point
            checks: Asserted inequalities
            summary: Aggregate values
            provenance: Config hash, seed, versions and calibration choices

        Returns:
            Report ready for serialization
        """
        columns = list(ReportFormatter.COLUMNS[kind])
        rows = [{c: ReportFormatter.clean(r.get(c)) for c in columns} for r in records]
        return Report(
            kind=kind,
            columns=columns,
            records=rows,
            checks=checks,
            summary={k: ReportFormatter.clean(v) for k, v in summary.items()},
            provenance=provenance,
        )

    @staticmethod
    def rows_to_csv(columns: Sequence[str], rows: Sequence[Dict[str, Any]], comments: Sequence[str] = ()) -> str:
        out = io.StringIO()
        for line in comments:
            out.write(f"# {line}\n")
        writer = csv.DictWriter(out, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
        return out.getvalue()

    @staticmethod
    def rows_to_json_lines(rows: Sequence[Dict[str, Any]]) -> str:
        return "".join(
            json.dumps({k: ReportFormatter.clean(v) for k, v in row.items()}, sort_keys=True) + "\n" for row in rows
        )

    @staticmethod
    def to_csv(report: Report) -> str:
        """Provenance and checks as ``#`` comment lines, then the record table."""
        comments = [f"{k}: {json.dumps(v, sort_keys=True)}" for k, v in sorted(report.provenance.items())]
        for chk in report.checks:
            comments.append(f"check {chk.name}: lhs={chk.lhs} rhs={chk.rhs} holds={chk.holds}")
        comments.append(f"summary: {json.dumps(report.summary, sort_keys=True)}")
        return ReportFormatter.rows_to_csv(report.columns, report.records, comments)

    @staticmethod
    def to_json_lines(report: Report) -> str:
        lines = [{"provenance": report.provenance}]
        lines.extend({"record": r} for r in report.records)
        lines.extend({"check": chk.model_dump()} for chk in report.checks)
        lines.append({"summary": report.summary, "passed": report.passed})
        return "".join(json.dumps(line, sort_keys=True) + "\n" for line in lines)

    @staticmethod
    def render(report: Report, fmt: str) -> str:
        if fmt == "json-lines":
            return ReportFormatter.to_json_lines(report)
        return ReportFormatter.to_csv(report)

    @staticmethod
    def witness_rows(witnesses: Sequence[RationalWitness], d: int, m: int) -> Tuple[List[str], List[Dict[str, Any]]]:
        """Header ``q, a1..ad, b1..bm`` and one row per witness."""
        columns = ["q", *(f"a{i + 1}" for i in range(d)), *(f"b{j + 1}" for j in range(m))]
        return columns, [dict(zip(columns, w.as_row())) for w in witnesses]


# Global formatter instance
report_formatter = ReportFormatter()
