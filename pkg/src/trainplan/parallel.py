"""Parallelism configuration and its structural validation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

from .arch import ModelSpec
from .cluster import ClusterSpec

PRECISIONS = ("fp16", "bf16", "fp32")
GRAD_ACCUM_DTYPES = ("fp16", "fp32")


@dataclass(frozen=True)
class ParallelConfig:
    tp: int = 1
    pp: int = 1
    mbs: int = 1
    gbs: Optional[int] = None
    zero_stage: int = 0
    interleave_v: int = 1
    precision: str = "fp16"
    grad_accum_dtype: str = "fp16"
    checkpoint_activations: bool = True
    flash_attention: bool = True
    dp: Optional[int] = None

    def __post_init__(self):
        for name in ("tp", "pp", "mbs", "interleave_v"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.gbs is not None and self.gbs < 1:
            raise ValueError(f"gbs must be >= 1, got {self.gbs}")
        if self.dp is not None and self.dp < 1:
            raise ValueError(f"dp must be >= 1, got {self.dp}")
        if self.zero_stage not in (0, 1, 2, 3):
            raise ValueError(f"zero_stage must be 0..3, got {self.zero_stage}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.grad_accum_dtype not in GRAD_ACCUM_DTYPES:
            raise ValueError(
                f"grad_accum_dtype must be one of {GRAD_ACCUM_DTYPES}, got {self.grad_accum_dtype!r}"
            )

    @property
    def model_parallel_size(self) -> int:
        return self.tp * self.pp

    @property
    def world_size(self) -> Optional[int]:
        return None if self.dp is None else self.tp * self.pp * self.dp

    @property
    def num_microbatches(self) -> Optional[int]:
        """Microbatches per pipeline replica, ``gbs / (mbs * dp)``; None until bound."""
        if self.dp is None or self.gbs is None:
            return None
        return self.gbs // (self.mbs * self.dp)

    def bind(self, cluster: ClusterSpec) -> "ParallelConfig":
        """Derive ``dp`` from the cluster size (and a default ``gbs`` of one
        microbatch per replica). Divisibility is left to :func:`validate`."""
        dp = self.dp
        if dp is None:
            dp = max(1, cluster.world_size // self.model_parallel_size)
        gbs = self.gbs if self.gbs is not None else self.mbs * dp
        return replace(self, dp=dp, gbs=gbs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ParallelConfig":
        return cls(**data)


@dataclass(frozen=True)
class Violation:
    rule: str
    message: str
    severity: str = "error"

    @property
    def is_error(self) -> bool:
        return self.severity == "error"


class UnvalidatedConfigError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        detail = "; ".join(f"{v.rule}: {v.message}" for v in self.violations)
        super().__init__(f"unvalidated configuration ({detail})")


def validate(model: ModelSpec, cfg: ParallelConfig, cluster: ClusterSpec) -> list[Violation]:
    """Check a configuration against the model and cluster.

    Every rule is checked independently and all violations are returned;
    nothing is raised. ``tp`` beyond one node is only a warning.
    """
    out: list[Violation] = []
    world = cluster.world_size
    mp = cfg.model_parallel_size
    dp = cfg.dp
    if dp is None:
        dp = world // mp if world % mp == 0 else None
    if dp is None or mp * dp != world:
        out.append(Violation(
            "tp*pp*dp == world",
            f"tp={cfg.tp} x pp={cfg.pp} x dp={dp} does not tile {world} GPUs",
        ))
    L, d, a = model.num_layers, model.hidden_size, model.num_heads
    if L % cfg.pp:
        out.append(Violation("L mod pp", f"{L} layers do not split into {cfg.pp} stages"))
    elif cfg.interleave_v > 1 and L % (cfg.pp * cfg.interleave_v):
        out.append(Violation(
            "L mod (pp*v)",
            f"{L} layers do not split into {cfg.pp} stages x {cfg.interleave_v} chunks",
        ))
    if d % cfg.tp:
        out.append(Violation("d mod tp", f"hidden size {d} not divisible by tp={cfg.tp}"))
    if a % cfg.tp:
        out.append(Violation("a mod tp", f"{a} heads not divisible by tp={cfg.tp}"))
    gbs = cfg.gbs
    if dp is not None and gbs is not None:
        if gbs % (cfg.mbs * dp):
            out.append(Violation(
                "gbs mod (mbs*dp)",
                f"gbs={gbs} is not a multiple of mbs*dp={cfg.mbs * dp}",
            ))
        else:
            m = gbs // (cfg.mbs * dp)
            if m < 1:
                out.append(Violation("m >= 1", "fewer than one microbatch per replica"))
            elif cfg.interleave_v > 1 and m > cfg.pp and m % cfg.pp:
                out.append(Violation(
                    "m mod pp (interleaved)",
                    f"interleaving needs m <= pp or m a multiple of pp (m={m}, pp={cfg.pp})",
                ))
    if cfg.zero_stage == 3 and cfg.pp > 1:
        out.append(Violation("zero3 requires pp == 1", "ZeRO-3 cannot be combined with pp > 1"))
    if cfg.tp > cluster.gpus_per_node:
        out.append(Violation(
            "tp <= gpus_per_node",
            f"tp={cfg.tp} spans nodes ({cluster.gpus_per_node} GPUs per node)",
            severity="warning",
        ))
    return out


def errors(violations) -> list[Violation]:
    return [v for v in violations if v.is_error]


def require_valid(model: ModelSpec, cfg: ParallelConfig, cluster: ClusterSpec) -> ParallelConfig:
    """Bind ``cfg`` to ``cluster`` and raise if any hard rule is broken."""
    bound = cfg.bind(cluster)
    bad = errors(validate(model, bound, cluster))
    if bad:
        raise UnvalidatedConfigError(bad)
    return bound
