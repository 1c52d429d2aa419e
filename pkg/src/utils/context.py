"""Run context shared by the numerical workers of one request or command."""

from contextvars import ContextVar
from typing import Optional

# Worker count and seed for the current run
threads_ctx: ContextVar[Optional[int]] = ContextVar('threads', default=None)
seed_ctx: ContextVar[Optional[int]] = ContextVar('seed', default=None)


def set_run_context(threads: Optional[int] = None, seed: Optional[int] = None) -> None:
    """Set the worker count and seed for the current context.

    Args:
        threads: Number of worker threads
        seed: Base seed for random streams
    """
    if threads is not None:
        threads_ctx.set(threads)
    if seed is not None:
        seed_ctx.set(seed)


def get_threads() -> Optional[int]:
    """Get the worker count from the context.

    Returns:
        Worker count or None if not set
    """
    return threads_ctx.get()


def get_seed() -> Optional[int]:
    """Get the base seed from the context.

    Returns:
        Seed or None if not set
    """
    return seed_ctx.get()
