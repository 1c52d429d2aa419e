"""Configuration management for the Khintchine laboratory."""

from pydantic_settings import BaseSettings
from typing import Optional


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    DEBUG: bool = False

    # Logging
    LOG_DIR: str = "logs"
    LOG_FILE_ENABLED: bool = False

    # Reproducibility and parallelism
    DEFAULT_SEED: int = 20240601
    DEFAULT_THREADS: int = 1
    MC_BLOCK_SIZE: int = 1024

    # Desk-scale caps (overridable per experiment)
    MAX_T: int = 8
    MAX_Q: int = 10**5
    MAX_SAMPLES: int = 10**5

    # Enumeration budgets
    SF_BUDGET: int = 10**8
    SHORT_VECTOR_BUDGET: int = 10**7
    COUNT_BUDGET: int = 10**9
    RECT_BUDGET: int = 10**6

    # Finite horizons for "for all q" statements
    SCALAR_HORIZON: int = 10**6
    TUPLE_HORIZON: int = 10**4

    # Numerics
    EXACT_DIM_CAP: int = 6
    GUARD_BAND: float = 1e-9
    BISECTION_RTOL: float = 1e-12
    RADIUS_INFLATION: float = 1e-9

    # Server Configuration
    HOST: str = "0.0.0.0"
    PORT: int = 8000

    # Optional directory with user chart definition files
    CHART_DIR: Optional[str] = None

    class Config:
        env_file = ".env"
        case_sensitive = True
        extra = "ignore"  # Ignore extra fields from .env


# Global settings instance
settings = Settings()
