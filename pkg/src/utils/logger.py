"""Logging configuration for the application."""

import logging
import sys
from pathlib import Path
from typing import Optional, TextIO

from src.config import settings


def setup_logging(stream: Optional[TextIO] = None, log_file: Optional[bool] = None):
    """Configure logging for the application.

    Args:
        stream: Stream for console output; the CLI passes stderr so stdout
            carries report rows only
        log_file: Also write to ``LOG_DIR/app.log``; defaults to
            ``settings.LOG_FILE_ENABLED``
    """
    log_level = logging.DEBUG if settings.DEBUG else logging.INFO

    handlers = [logging.StreamHandler(stream or sys.stdout)]

    if log_file if log_file is not None else settings.LOG_FILE_ENABLED:
        log_dir = Path(settings.LOG_DIR)
        log_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_dir / 'app.log'))

    # Configure root logger
    logging.basicConfig(
        level=log_level,
        format='%(asctime)s | %(levelname)-8s | %(name)s:%(funcName)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
        handlers=handlers,
        force=True
    )

    logging.getLogger(__name__).debug("Logging configured successfully")


# Get logger for use in other modules
logger = logging.getLogger(__name__)
