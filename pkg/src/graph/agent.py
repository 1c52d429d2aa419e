"""Experiment graph definition."""

import logging
from langgraph.graph import StateGraph, END

logger = logging.getLogger(__name__)

from src.graph.state import ExperimentConfig, ExperimentState, Report
from src.graph.nodes import (
    load_inputs,
    record_provenance,
    run_dichotomy,
    run_ubiquity,
    run_convergence_cover,
    run_multiplicative,
    run_counting_scaling,
    run_minor_decay,
    assemble_report
)
from src.utils.context import set_run_context

# Experiment kind -> pipeline node
PIPELINES = {
    "dichotomy": run_dichotomy,
    "ubiquity": run_ubiquity,
    "convergence_cover": run_convergence_cover,
    "multiplicative": run_multiplicative,
    "counting_scaling": run_counting_scaling,
    "minor_decay": run_minor_decay,
}


def create_experiment_graph():
    """Create and compile the experiment workflow.

    Flow:
    1. Load inputs (chart and region)
    2. Record provenance
    3. Branch on the experiment kind to one pipeline node
    4. Assemble the report

    Returns:
        Compiled graph ready for execution
    """
    logger.info("Creating experiment graph")

    workflow = StateGraph(ExperimentState)

    workflow.add_node("load", load_inputs)
    workflow.add_node("provenance", record_provenance)
    for kind, node in PIPELINES.items():
        workflow.add_node(kind, node)
    workflow.add_node("report", assemble_report)

    workflow.set_entry_point("load")
    workflow.add_edge("load", "provenance")

    def route_kind(state: ExperimentState) -> str:
        return state["config"].kind

    workflow.add_conditional_edges("provenance", route_kind, {kind: kind for kind in PIPELINES})

    for kind in PIPELINES:
        workflow.add_edge(kind, "report")
    workflow.add_edge("report", END)

    app = workflow.compile()

    logger.info("Experiment graph compiled successfully")
    return app


# Global graph instance
experiment_graph = create_experiment_graph()


def run_experiment(config: ExperimentConfig) -> Report:
    """Run one experiment end to end.

    Args:
        config: Validated configuration

    Returns:
        The report; lab errors propagate to the caller
    """
    set_run_context(threads=config.threads, seed=config.seed)
    logger.info(f"Running {config.kind} experiment (seed={config.seed})")
    final_state = experiment_graph.invoke({"config": config})
    return final_state["report"]
