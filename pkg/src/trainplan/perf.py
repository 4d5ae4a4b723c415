"""End-to-end throughput estimate for one training configuration.

Composition, per iteration:

* each pipeline stage spends ``model_flops(mbs) / (pp * tp * eff * peak)`` on
  compute per microbatch, split 1 : (c-1) between forward and backward;
* every layer issues four TP allreduces per microbatch (two forward, two
  backward) of ``2 * mbs * s * d`` bytes, serialised with compute;
* stage-boundary activations travel point-to-point and are fed to the
  pipeline simulator as its transfer time;
* the DP gradient exchange runs once, after the pipeline drains (no overlap).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Optional, Sequence

from .arch import ModelSpec, model_flops_per_iteration, param_count
from .cluster import (
    ClusterSpec,
    GroupKind,
    Placement,
    ProcessGroup,
    allgather_time,
    allreduce_time,
    p2p_time,
    reduce_scatter_time,
)
from .memory import MemoryReport, memory_per_gpu
from .parallel import ParallelConfig, require_valid
from .pipesim import ScheduleKind, StageTiming, summarize

log = logging.getLogger(__name__)

DEFAULT_ORDER = ("tp", "dp", "pp")


@dataclass(frozen=True)
class EfficiencyKnobs:
    kernel_efficiency: float = 0.5
    flash_attention_multiplier: float = 1.3
    checkpoint_compute_factor: Optional[int] = None  # None: follow the config

    def __post_init__(self):
        if not 0 < self.kernel_efficiency <= 1:
            raise ValueError(f"kernel_efficiency must be in (0, 1], got {self.kernel_efficiency}")
        if self.flash_attention_multiplier < 1:
            raise ValueError("flash_attention_multiplier must be >= 1")
        if self.checkpoint_compute_factor not in (None, 3, 4):
            raise ValueError("checkpoint_compute_factor must be 3, 4 or None")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EfficiencyKnobs":
        return cls(**data)


@dataclass(frozen=True)
class Breakdown:
    compute: float = 0.0
    tp_comm: float = 0.0
    pp_comm: float = 0.0
    dp_comm: float = 0.0
    bubble: float = 0.0

    def total(self) -> float:
        return self.compute + self.tp_comm + self.pp_comm + self.dp_comm + self.bubble


@dataclass(frozen=True)
class ThroughputEstimate:
    iter_time: float
    flops_per_gpu: float
    peak_fraction: float
    breakdown: Breakdown
    oom: bool
    num_microbatches: int = 0
    bubble_fraction: float = 0.0

    @property
    def tflops_per_gpu(self) -> float:
        return self.flops_per_gpu / 1e12

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ThroughputEstimate":
        data = dict(data)
        data["breakdown"] = Breakdown(**data["breakdown"])
        return cls(**data)


def _compute_factor(cfg: ParallelConfig, knobs: EfficiencyKnobs) -> int:
    if knobs.checkpoint_compute_factor is not None:
        return knobs.checkpoint_compute_factor
    return 4 if cfg.checkpoint_activations else 3


def effective_flops(cfg: ParallelConfig, cluster: ClusterSpec, knobs: EfficiencyKnobs) -> float:
    """Achievable FLOP/s of one TP group, capped at the hardware peak."""
    eff = knobs.kernel_efficiency
    if cfg.flash_attention:
        eff *= knobs.flash_attention_multiplier
    return cfg.tp * min(eff, 1.0) * cluster.peak_flops_per_gpu


def _group(cluster, ranks, kind):
    return ProcessGroup.from_ranks(cluster, ranks, kind)


def _worst(times: Iterable[float]) -> float:
    return max(times, default=0.0)


def stage_timing(
    model: ModelSpec,
    cfg: ParallelConfig,
    cluster: ClusterSpec,
    knobs: EfficiencyKnobs,
    order: Sequence[str] = DEFAULT_ORDER,
) -> tuple[StageTiming, float, float]:
    """Pipeline stage timing plus the per-microbatch compute and TP comm times."""
    c = _compute_factor(cfg, knobs)
    placement = Placement(cfg.tp, cfg.pp, cfg.dp, tuple(order))
    mb_flops = model_flops_per_iteration(model, cfg.mbs, c == 4)
    compute = mb_flops / (cfg.pp * effective_flops(cfg, cluster, knobs))

    act_bytes = 2 * cfg.mbs * model.seq_length * model.hidden_size
    layers = model.num_layers // cfg.pp
    ar = _worst(
        allreduce_time(cluster, _group(cluster, placement.tp_group(pp=s), GroupKind.TP), act_bytes)
        for s in range(cfg.pp)
    )
    tp_per_mb = 4 * layers * ar

    boundaries = [(s, s + 1) for s in range(cfg.pp - 1)]
    if cfg.interleave_v > 1 and cfg.pp > 1:
        boundaries.append((cfg.pp - 1, 0))
    t_comm = _worst(
        p2p_time(
            cluster,
            cluster.gpu(placement.rank(0, a, 0)),
            cluster.gpu(placement.rank(0, b, 0)),
            act_bytes,
        )
        for a, b in boundaries
    )
    timing = StageTiming(
        t_fwd=compute / c + tp_per_mb / 2,
        t_bwd=compute * (c - 1) / c + tp_per_mb / 2,
        t_comm=t_comm,
    )
    return timing, compute, tp_per_mb


def dp_comm_time(
    model: ModelSpec,
    cfg: ParallelConfig,
    cluster: ClusterSpec,
    order: Sequence[str] = DEFAULT_ORDER,
) -> float:
    """Gradient exchange across data-parallel replicas, slowest group wins."""
    if cfg.dp == 1:
        return 0.0
    placement = Placement(cfg.tp, cfg.pp, cfg.dp, tuple(order))
    volume = 2 * param_count(model).total_exact / (cfg.tp * cfg.pp)
    worst = 0.0
    for s in range(cfg.pp):
        for t in range(cfg.tp):
            group = _group(cluster, placement.dp_group(tp=t, pp=s), GroupKind.DP)
            if cfg.zero_stage >= 1:
                cost = reduce_scatter_time(cluster, group, volume) + allgather_time(cluster, group, volume)
            else:
                cost = allreduce_time(cluster, group, volume)
            worst = max(worst, cost)
    return worst


def schedule_kind(cfg: ParallelConfig) -> ScheduleKind:
    return ScheduleKind.INTERLEAVED if cfg.interleave_v > 1 else ScheduleKind.ONE_F_ONE_B


def estimate(
    model: ModelSpec,
    cfg: ParallelConfig,
    cluster: ClusterSpec,
    knobs: Optional[EfficiencyKnobs] = None,
    *,
    order: Sequence[str] = DEFAULT_ORDER,
    memory: Optional[MemoryReport] = None,
    include_activations: bool = True,
) -> ThroughputEstimate:
    """Estimate iteration time and achieved FLOP/s per GPU.

    ``cfg`` is bound to ``cluster`` and validated first; a configuration
    breaking a hard rule raises :class:`~trainplan.parallel.UnvalidatedConfigError`.
    Running out of memory is a reported state, not an error: ``oom`` is set
    and the achieved rate is zero.
    """
    knobs = knobs or EfficiencyKnobs()
    cfg = require_valid(model, cfg, cluster)
    if memory is None:
        memory = memory_per_gpu(model, cfg, cluster, include_activations=include_activations)
    m = cfg.num_microbatches

    timing, compute_mb, tp_mb = stage_timing(model, cfg, cluster, knobs, order)
    pipe = summarize(schedule_kind(cfg), cfg.pp, m, cfg.interleave_v, timing)
    dp = dp_comm_time(model, cfg, cluster, order)
    iter_time = pipe.makespan + dp

    compute = m * compute_mb
    tp_comm = m * tp_mb
    pp_comm = pipe.recv_wait_per_device
    bubble = max(0.0, pipe.makespan - compute - tp_comm - pp_comm)
    breakdown = Breakdown(compute=compute, tp_comm=tp_comm, pp_comm=pp_comm, dp_comm=dp, bubble=bubble)

    if memory.fits:
        c = _compute_factor(cfg, knobs)
        total_flops = model_flops_per_iteration(model, cfg.gbs, c == 4)
        flops = total_flops / (iter_time * cfg.world_size)
    else:
        flops = 0.0
    return ThroughputEstimate(
        iter_time=iter_time,
        flops_per_gpu=flops,
        peak_fraction=flops / cluster.peak_flops_per_gpu,
        breakdown=breakdown,
        oom=not memory.fits,
        num_microbatches=m,
        bubble_fraction=pipe.bubble_fraction,
    )


def saturation_check(cfg: ParallelConfig, *, warn: bool = True) -> Optional[str]:
    """Advise when a pipeline has fewer microbatches than stages.

    Returns the advisory text (also issued as a :class:`UserWarning` when
    ``warn``), or None when the pipeline is saturated.
    """
    m = cfg.num_microbatches
    if cfg.pp == 1 or m is None or m >= cfg.pp:
        return None
    msg = (
        f"pipeline not saturated: {m} microbatches for {cfg.pp} stages; "
        f"raise gbs to at least {cfg.pp * cfg.mbs * (cfg.dp or 1)}"
    )
    if warn:
        warnings.warn(msg, stacklevel=2)
    return msg


@dataclass(frozen=True)
class Observation:
    model: ModelSpec
    cfg: ParallelConfig
    cluster: ClusterSpec
    measured_tflops: float


def _grid(lo=0.05, hi=1.0, step=0.005):
    n = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(n + 1)]


def calibration_error(knobs: EfficiencyKnobs, observed: Sequence[Observation]) -> float:
    """Mean squared relative error of predicted vs measured TFLOPS."""
    total = 0.0
    for obs in observed:
        pred = estimate(obs.model, obs.cfg, obs.cluster, knobs).tflops_per_gpu
        total += ((pred - obs.measured_tflops) / obs.measured_tflops) ** 2
    return total / len(observed)


def calibrate(knobs: EfficiencyKnobs, observed: Sequence[Observation]) -> EfficiencyKnobs:
    """Fit ``kernel_efficiency`` on a 0.005-step grid over [0.05, 1.0].

    Ties resolve to the smallest efficiency, so the fit is deterministic.
    """
    observed = list(observed)
    if not observed:
        raise ValueError("calibration needs at least one observation")
    best, best_err = None, float("inf")
    for eff in _grid():
        candidate = replace(knobs, kernel_efficiency=eff)
        err = calibration_error(candidate, observed)
        if err < best_err:
            best, best_err = candidate, err
    log.debug("calibrated kernel_efficiency=%s (mse=%.3g)", best.kernel_efficiency, best_err)
    return best
