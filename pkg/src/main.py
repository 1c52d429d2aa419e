"""FastAPI application for the Khintchine laboratory."""

from fractions import Fraction

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field
from typing import Optional, Dict, Any, List, Tuple
import logging

logger = logging.getLogger(__name__)

from src import __version__
from src.config import settings
from src.graph.agent import run_experiment
from src.graph.report_formatter import report_formatter
from src.graph.state import ExperimentConfig
from src.lab.approxfn import parse_psi_spec, regularize_trace, weight_system_from_specs
from src.lab.counting import count_R
from src.lab.lattice import SquareMatrix, successive_minima
from src.lab.manifold import Box, resolve_chart
from src.utils.errors import BudgetExceededError, ConfigurationError, LabError


# Create FastAPI app
app = FastAPI(
    title="Khintchine Laboratory",
    description="Counting, lattice and measure experiments for Diophantine approximation on manifolds",
    version=__version__
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=False,
    allow_methods=["*"],
    allow_headers=["*"],
)


class CountRequest(BaseModel):
    """Request model for the rational-point count."""
    chart: str = "parabola"
    Q: str = Field(..., description="Upper denominator; integers, decimals or p/q")
    eps: List[str]
    box: Optional[List[Tuple[float, float]]] = None
    witnesses: bool = False


class MinimaRequest(BaseModel):
    """Request model for successive minima; entries as numbers or ``p/q`` strings."""
    rows: List[List[str]]
    k: Optional[int] = None


class RegularizeRequest(BaseModel):
    psi: List[str]
    phi: str
    horizon: int = Field(settings.TUPLE_HORIZON, ge=1, le=settings.SCALAR_HORIZON)


def _http_error(e: Exception) -> HTTPException:
    """Map lab errors to status codes; anything else is a server error."""
    if isinstance(e, BudgetExceededError):
        return HTTPException(status_code=413, detail=e.to_dict())
    if isinstance(e, ConfigurationError):
        return HTTPException(status_code=422, detail=e.to_dict())
    if isinstance(e, LabError):
        return HTTPException(status_code=400, detail=e.to_dict())
    logger.error(f"Unexpected error: {e}", exc_info=True)
    return HTTPException(status_code=500, detail=f"Error processing request: {str(e)}")


@app.get("/")
async def root():
    """Root endpoint for health check."""
    return {
        "status": "ok",
        "service": "Khintchine Laboratory",
        "version": __version__
    }


@app.get("/health")
async def health():
    """Health check endpoint."""
    return {
        "status": "healthy",
        "debug": settings.DEBUG
    }


@app.post("/api/experiment")
def experiment(config: ExperimentConfig) -> Dict[str, Any]:
    """Run one experiment and return its report.

    Args:
        config: Experiment configuration, validated by pydantic

    Returns:
        Report with records, checks, summary and provenance
    """
    logger.info(f"Received {config.kind} experiment request")
    try:
        report = run_experiment(config)
    except Exception as e:
        raise _http_error(e)
    return {**report.model_dump(), "passed": report.passed}


@app.post("/api/count-r")
def count_r(request: CountRequest) -> Dict[str, Any]:
    """Count rational points near a chart."""
    try:
        chart = resolve_chart(request.chart)
        box = chart.domain if request.box is None else Box.from_bounds(*zip(*request.box))
        Q = parse_rational(request.Q)
        result = count_R(chart, Q, [parse_rational(e) for e in request.eps], box, collect=request.witnesses)
    except Exception as e:
        raise _http_error(e)
    response = {
        "count": result.count,
        "pairs": result.pairs,
        "uncertain": result.uncertain,
        "certified": result.certified,
    }
    if request.witnesses:
        _, response["witnesses"] = report_formatter.witness_rows(result.witnesses, chart.d, chart.m)
    return response


@app.post("/api/minima")
def minima(request: MinimaRequest) -> Dict[str, Any]:
    """Successive minima of the lattice spanned by the columns of a square matrix."""
    try:
        basis = SquareMatrix.from_rows(request.rows)
        report = successive_minima(basis, request.k)
    except Exception as e:
        raise _http_error(e)
    return {
        "lambdas": [float(v) for v in report.lambdas],
        "vectors": [[int(x) for x in v] for v in report.attaining_vectors],
        "approximate": report.approximate,
    }


@app.post("/api/regularize")
def regularize(request: RegularizeRequest) -> Dict[str, Any]:
    """Regularized weights with the step cases and q*."""
    try:
        ws = weight_system_from_specs(request.psi)
        trace = regularize_trace(ws, parse_psi_spec(request.phi), request.horizon)
    except Exception as e:
        raise _http_error(e)
    table = trace.weights.table(1, request.horizon)
    return {
        "weights": [[float(v) for v in row] for row in table],
        "cases": [int(c) for c in trace.cases],
        "q_star": trace.q_star,
    }


def parse_rational(text: str) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise ConfigurationError(f"not a rational number: {text!r}") from None


if __name__ == "__main__":
    import uvicorn

    logger.info(f"Starting server on {settings.HOST}:{settings.PORT}")
    uvicorn.run(
        "src.main:app",
        host=settings.HOST,
        port=settings.PORT,
        reload=settings.DEBUG
    )
