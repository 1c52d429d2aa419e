"""Experiment graph: configuration, pipeline nodes and reports."""
