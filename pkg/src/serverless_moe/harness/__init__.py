"""Multi-tenant experiment harness: strategies, sampling, sweeps and reports."""
from .report import load_summaries, render, summarize, write_run
from .sampling import ResourceSample, Sampler, sample_resources
from .strategies import (
    InProcessTopology,
    ProcessTopology,
    ResidencyRow,
    RunReport,
    Strategy,
    StrategyConfig,
    deploy,
    oracle_ids,
    run,
    run_strategy,
    sweep_block_size,
)
from .workload import Workload, make_workload

__all__ = [
    "InProcessTopology",
    "ProcessTopology",
    "ResidencyRow",
    "ResourceSample",
    "RunReport",
    "Sampler",
    "Strategy",
    "StrategyConfig",
    "Workload",
    "deploy",
    "load_summaries",
    "make_workload",
    "oracle_ids",
    "render",
    "run",
    "run_strategy",
    "sample_resources",
    "summarize",
    "sweep_block_size",
    "write_run",
]
