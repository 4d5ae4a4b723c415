"""Per-GPU memory footprint under TP/PP/ZeRO sharding, and the OOM predicate.

Byte widths per parameter follow the usual mixed-precision accounting:
6 bytes of weights (fp32 master + fp16 copy), one fp32 gradient and 4 bytes of
optimizer state, 14 bytes in all. Adam normally needs 8 bytes of state; pass
``optimizer_bytes_per_param=8`` to get that.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

from .arch import ModelSpec, param_count
from .cluster import GiB, ClusterSpec
from .parallel import ParallelConfig, UnvalidatedConfigError, errors, validate

DEFAULT_OVERHEAD_BYTES = 2 * GiB
ACTIVATION_BYTES = 2


def bytes_per_param(precision: str) -> tuple[int, int, int]:
    """(parameter, gradient, optimizer) bytes per parameter."""
    if precision in ("fp16", "bf16"):
        return 6, 4, 4
    if precision == "fp32":
        return 4, 4, 4
    raise ValueError(f"unknown precision {precision!r}")


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class MemoryReport:
    params_bytes: int
    gradient_bytes: int
    optimizer_bytes: int
    activation_bytes: int
    total_bytes: int
    fits: bool
    overhead_bytes: int = 0
    capacity_bytes: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MemoryReport":
        return cls(**data)


def _layer_activation_bytes(model: ModelSpec, mbs: int) -> int:
    # s*b*d*(34 + 5*a*s/d), multiplied out to stay integral
    s, d, a = model.seq_length, model.hidden_size, model.num_heads
    return s * mbs * d * 34 + 5 * a * s * s * mbs


def activation_bytes(model: ModelSpec, cfg: ParallelConfig, *, mbs: Optional[int] = None) -> int:
    """Activation estimate for one microbatch in flight on one stage.

    Without checkpointing every layer of the stage keeps its full working set.
    With checkpointing only each layer's 2-byte input is kept, plus one
    layer's working set for the recompute. ``mbs`` overrides the config's
    micro-batch size (zero gives zero).
    """
    mbs = cfg.mbs if mbs is None else mbs
    if mbs < 0:
        raise ValueError(f"mbs must be >= 0, got {mbs}")
    if mbs == 0:
        return 0
    layers = model.num_layers // cfg.pp
    per_layer = _layer_activation_bytes(model, mbs)
    if not cfg.checkpoint_activations:
        return _ceil_div(per_layer * layers, cfg.tp)
    s, d = model.seq_length, model.hidden_size
    boundary = ACTIVATION_BYTES * s * mbs * d * layers
    return _ceil_div(boundary + per_layer, cfg.tp)


def state_bytes(
    num_params: int,
    cfg: ParallelConfig,
    optimizer_bytes_per_param: Optional[int] = None,
) -> tuple[int, int, int]:
    """Parameter, gradient and optimizer bytes held by one GPU."""
    param_b, grad_b, optim_b = bytes_per_param(cfg.precision)
    if optimizer_bytes_per_param is not None:
        optim_b = optimizer_bytes_per_param
    if cfg.precision == "bf16" and cfg.grad_accum_dtype == "fp32":
        grad_b += 4
    dp = cfg.dp or 1
    shards = cfg.tp * cfg.pp
    param_shards = shards * (dp if cfg.zero_stage >= 3 else 1)
    grad_shards = shards * (dp if cfg.zero_stage >= 2 else 1)
    optim_shards = shards * (dp if cfg.zero_stage >= 1 else 1)
    return (
        _ceil_div(num_params * param_b, param_shards),
        _ceil_div(num_params * grad_b, grad_shards),
        _ceil_div(num_params * optim_b, optim_shards),
    )


def memory_per_gpu(
    model: ModelSpec,
    cfg: ParallelConfig,
    cluster: ClusterSpec,
    *,
    include_activations: bool = True,
    num_params: Optional[int] = None,
    optimizer_bytes_per_param: Optional[int] = None,
    overhead_bytes: int = DEFAULT_OVERHEAD_BYTES,
) -> MemoryReport:
    """Memory held by one GPU.

    ``cfg`` must already be bound to ``cluster`` (``dp`` set) and valid, or
    :class:`UnvalidatedConfigError` is raised. ``num_params`` overrides the
    exact parameter count, e.g. with a nominal model size. ``fits`` compares
    ``total_bytes + overhead_bytes`` against the per-GPU capacity.
    """
    if cfg.dp is None or cfg.gbs is None:
        raise UnvalidatedConfigError([])
    bad = errors(validate(model, cfg, cluster))
    if bad:
        raise UnvalidatedConfigError(bad)
    n = param_count(model).total_exact if num_params is None else int(num_params)
    params, grads, optim = state_bytes(n, cfg, optimizer_bytes_per_param)
    acts = activation_bytes(model, cfg) if include_activations else 0
    total = params + grads + optim + acts
    return MemoryReport(
        params_bytes=params,
        gradient_bytes=grads,
        optimizer_bytes=optim,
        activation_bytes=acts,
        total_bytes=total,
        fits=total + overhead_bytes <= cluster.mem_per_gpu,
        overhead_bytes=overhead_bytes,
        capacity_bytes=cluster.mem_per_gpu,
    )
