"""Cross-cutting helpers: logging, run context, errors, exact arithmetic, workers."""
