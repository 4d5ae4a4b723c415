"""Planner and simulator for distributed training of GPT-style models."""

from .arch import MODEL_PRESETS, ModelSpec, get_model, model_flops_per_iteration, param_count, training_budget
from .cluster import ClusterSpec, frontier_preset
from .memory import MemoryReport, memory_per_gpu
from .parallel import ParallelConfig, Violation, validate
from .perf import EfficiencyKnobs, ThroughputEstimate, calibrate, estimate
from .pipesim import IterationTimeline, ScheduleKind, StageTiming, analytic_bubble, simulate
from .search import SearchResult, SearchSpace, TrialRecord, run_search, sensitivity

__version__ = "0.1.0"

__all__ = [
    "MODEL_PRESETS",
    "ModelSpec",
    "get_model",
    "model_flops_per_iteration",
    "param_count",
    "training_budget",
    "ClusterSpec",
    "frontier_preset",
    "MemoryReport",
    "memory_per_gpu",
    "ParallelConfig",
    "Violation",
    "validate",
    "EfficiencyKnobs",
    "ThroughputEstimate",
    "calibrate",
    "estimate",
    "IterationTimeline",
    "ScheduleKind",
    "StageTiming",
    "analytic_bubble",
    "simulate",
    "SearchResult",
    "SearchSpace",
    "TrialRecord",
    "run_search",
    "sensitivity",
]
