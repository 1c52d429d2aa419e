"""Experiment configuration, report and graph state."""

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, TypedDict

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.config import settings
from src.lab.approxfn import WeightSystem, parse_psi_spec
from src.lab.manifold import Box, Chart, resolve_chart
from src.utils.errors import ConfigurationError

ExperimentKind = Literal[
    "dichotomy",
    "ubiquity",
    "convergence_cover",
    "multiplicative",
    "counting_scaling",
    "minor_decay",
]

# Inputs each kind cannot run without
REQUIRED_FIELDS: Dict[str, Tuple[str, ...]] = {
    "dichotomy": ("psi", "psi_convergent", "q_windows"),
    "ubiquity": ("psi", "t_list"),
    "convergence_cover": ("psi", "t_list"),
    "multiplicative": ("psi", "t_list"),
    "counting_scaling": ("eps", "Q_list"),
    "minor_decay": ("eps", "t_list"),
}


class ExperimentConfig(BaseModel):
    """One experiment run.

    TOML files group the fields into sections (``[experiment]``,
    ``[region]``, ``[weights]``, ``[sweep]``, ``[sampling]``, ``[output]``);
    section names are organizational only.
    """

    model_config = ConfigDict(extra="forbid")

    kind: ExperimentKind
    chart: str = "parabola"
    box: Optional[List[Tuple[float, float]]] = None
    psi: List[str] = Field(default_factory=list)
    psi_convergent: List[str] = Field(default_factory=list)
    Q_list: List[float] = Field(default_factory=list)
    t_list: List[int] = Field(default_factory=list)
    q_windows: List[int] = Field(default_factory=list)
    eps: List[float] = Field(default_factory=list)
    c: float = 0.5
    s_prime: float = 0.05
    w0: float = 3.0
    c_frak: float = 0.1
    k0: float = 0.5
    rho0: float = 1.0
    samples: int = 1000
    grid: int = 200
    seed: int = settings.DEFAULT_SEED
    threads: Optional[int] = None
    output: Optional[str] = None
    format: Literal["csv", "json-lines"] = "csv"

    @field_validator("c")
    @classmethod
    def _check_c(cls, v: float) -> float:
        if not 0 < v < 1:
            raise ValueError(f"c must lie in (0, 1), got {v}")
        return v

    @field_validator("c_frak")
    @classmethod
    def _check_c_frak(cls, v: float) -> float:
        if not 0 < v < 0.5:
            raise ValueError(f"c_frak must lie in (0, 1/2), got {v}")
        return v

    @field_validator("w0")
    @classmethod
    def _check_w0(cls, v: float) -> float:
        if not v > 1:
            raise ValueError(f"w0 must exceed 1, got {v}")
        return v

    @field_validator("k0")
    @classmethod
    def _check_k0(cls, v: float) -> float:
        if not 0 < v < 1:
            raise ValueError(f"k0 must lie in (0, 1), got {v}")
        return v

    @field_validator("samples")
    @classmethod
    def _check_samples(cls, v: int) -> int:
        if not 100 <= v <= settings.MAX_SAMPLES:
            raise ValueError(f"samples must lie in [100, {settings.MAX_SAMPLES}], got {v}")
        return v

    @field_validator("grid")
    @classmethod
    def _check_grid(cls, v: int) -> int:
        if v < 10:
            raise ValueError(f"grid needs at least 10 points per dimension, got {v}")
        return v

    @field_validator("t_list")
    @classmethod
    def _check_t_list(cls, v: List[int]) -> List[int]:
        if any(not 1 <= t <= settings.MAX_T for t in v):
            raise ValueError(f"t values must lie in [1, {settings.MAX_T}], got {v}")
        return sorted(set(v))

    @field_validator("Q_list", "q_windows")
    @classmethod
    def _check_Q(cls, v: List[float]) -> List[float]:
        if any(not 2 <= Q <= settings.MAX_Q for Q in v):
            raise ValueError(f"Q values must lie in [2, {settings.MAX_Q}], got {v}")
        return sorted(set(v))

    @field_validator("eps")
    @classmethod
    def _check_eps(cls, v: List[float]) -> List[float]:
        if any(not 0 < e < 1 for e in v):
            raise ValueError(f"eps values must lie in (0, 1), got {v}")
        return v

    @field_validator("psi", "psi_convergent")
    @classmethod
    def _check_psi(cls, v: List[str]) -> List[str]:
        for spec in v:
            parse_psi_spec(spec)
        return v

    @model_validator(mode="after")
    def _check_kind(self) -> "ExperimentConfig":
        chart = resolve_chart(self.chart)
        missing = [name for name in REQUIRED_FIELDS[self.kind] if not getattr(self, name)]
        if missing:
            raise ValueError(f"experiment kind {self.kind!r} needs {', '.join(missing)}")
        if self.box is not None:
            if len(self.box) != chart.d or any(not lo < hi for lo, hi in self.box):
                raise ValueError(f"box must give {chart.d} intervals lo < hi")
            if not chart.domain.contains_box(self.region(chart)):
                raise ValueError(f"box lies outside the domain of {chart.name}")
        if self.kind == "multiplicative" and len(self.psi) != 1:
            raise ValueError("the multiplicative experiment takes a single psi")
        if self.kind in ("dichotomy", "ubiquity", "convergence_cover"):
            for specs in (self.psi, self.psi_convergent):
                if specs and len(specs) != chart.n:
                    raise ValueError(f"{chart.name} needs {chart.n} psi specs, got {len(specs)}")
        if self.kind == "counting_scaling" and len(self.eps) != chart.m:
            raise ValueError(f"{chart.name} needs {chart.m} eps values, got {len(self.eps)}")
        if self.kind == "minor_decay" and len(self.eps) != chart.n:
            raise ValueError(f"{chart.name} needs {chart.n} eps values, got {len(self.eps)}")
        return self

    def resolve_chart(self) -> Chart:
        return resolve_chart(self.chart)

    def region(self, chart: Optional[Chart] = None) -> Box:
        chart = chart or self.resolve_chart()
        if self.box is None:
            return chart.domain
        lo, hi = zip(*self.box)
        return Box.from_bounds(lo, hi)

    def weights(self, convergent: bool = False) -> WeightSystem:
        specs = self.psi_convergent if convergent else self.psi
        return WeightSystem(tuple(parse_psi_spec(s) for s in specs))

    def calibration(self) -> Dict[str, Any]:
        """Sweep starts standing in for the existential thresholds Q0 and t0."""
        return {
            "Q0": min(self.Q_list) if self.Q_list else None,
            "t0": min(self.t_list) if self.t_list else None,
            "q_window_start": min(self.q_windows) if self.q_windows else None,
        }


def load_experiment_config(path: Path, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Read a TOML experiment file and validate it.

    Raises:
        ConfigurationError: If the file cannot be read or parsed
        pydantic.ValidationError: If the values are invalid
    """
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigurationError(f"cannot read experiment file {path}: {e}") from e

    flat: Dict[str, Any] = {}
    for key, value in data.items():
        if isinstance(value, dict):
            for inner, inner_value in value.items():
                if inner in flat:
                    raise ConfigurationError(f"{path}: key {inner!r} appears in more than one section")
                flat[inner] = inner_value
        else:
            flat[key] = value
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig(**flat)


class Check(BaseModel):
    """An asserted inequality with both of its sides."""

    name: str
    lhs: Optional[float] = None
    rhs: Optional[float] = None
    holds: Optional[bool] = None


class Report(BaseModel):
    kind: str
    columns: List[str]
    records: List[Dict[str, Any]]
    checks: List[Check] = Field(default_factory=list)
    summary: Dict[str, Any] = Field(default_factory=dict)
    provenance: Dict[str, Any] = Field(default_factory=dict)

    @property
    def passed(self) -> Optional[bool]:
        """False if any check fails, None when no check carries a verdict."""
        verdicts = [c.holds for c in self.checks if c.holds is not None]
        if not verdicts:
            return None
        return all(verdicts)


class ExperimentState(TypedDict, total=False):
    """State flowing through the experiment graph."""

    config: ExperimentConfig
    chart: Chart
    region: Box
    records: List[Dict[str, Any]]
    checks: List[Check]
    summary: Dict[str, Any]
    provenance: Dict[str, Any]
    report: Report
    actions_taken: List[str]
