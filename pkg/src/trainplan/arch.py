"""GPT-style architecture description, parameter counts and FLOP counts.

Per-layer parameters follow the decoder layer as three ``d x d`` attention
projections (K, Q, V) plus a ``d x 4d`` / ``4d x d`` feed-forward pair, i.e.
``11 d^2`` per layer. The attention output projection is deliberately left out
of the per-layer count; the conventional ``12 L d^2`` approximation absorbs it.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Union

DEFAULT_VOCAB_SIZE = 51200
DEFAULT_SEQ_LENGTH = 2048


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    hidden_size: int
    num_heads: int
    vocab_size: int = DEFAULT_VOCAB_SIZE
    seq_length: int = DEFAULT_SEQ_LENGTH

    def __post_init__(self):
        for name in ("num_layers", "hidden_size", "num_heads", "vocab_size", "seq_length"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.hidden_size % self.num_heads:
            raise ValueError(
                f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_size": self.hidden_size,
            "num_heads": self.num_heads,
            "vocab_size": self.vocab_size,
            "seq_length": self.seq_length,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(**data)


# Nominal sizes are names only. 2114 has no divisor near 24, so the "1.4B"
# preset carries 14 heads (head dim 151); "1.4B-2064" is the 24-head variant
# whose width divides every TP degree up to 8.
MODEL_PRESETS = {
    "1.4B": ModelSpec(num_layers=24, hidden_size=2114, num_heads=14),
    "1.4B-2064": ModelSpec(num_layers=24, hidden_size=2064, num_heads=24),
    "22B": ModelSpec(num_layers=48, hidden_size=6144, num_heads=48),
    "175B": ModelSpec(num_layers=96, hidden_size=12288, num_heads=96),
    "1T": ModelSpec(num_layers=128, hidden_size=25600, num_heads=128),
}

NOMINAL_SIZES = {"1.4B": 1.4e9, "22B": 22e9, "175B": 175e9, "1T": 1e12}


def get_model(name: str) -> ModelSpec:
    try:
        return MODEL_PRESETS[name]
    except KeyError:
        raise KeyError(
            f"unknown model preset {name!r}; choose from {sorted(MODEL_PRESETS)}"
        ) from None


@dataclass(frozen=True)
class ParamBreakdown:
    attention_params: int
    ffn_params: int
    embedding_params: int
    total_exact: int
    total_approx: int


def param_count(spec: ModelSpec) -> ParamBreakdown:
    L, d = spec.num_layers, spec.hidden_size
    attention = 3 * L * d * d
    ffn = 8 * L * d * d
    embedding = spec.vocab_size * d + spec.seq_length * d
    return ParamBreakdown(
        attention_params=attention,
        ffn_params=ffn,
        embedding_params=embedding,
        total_exact=attention + ffn + embedding,
        total_approx=12 * L * d * d,
    )


def _to_float(value: Fraction) -> float:
    try:
        return float(value)
    except OverflowError as exc:
        raise OverflowError(f"FLOP count {value} does not fit in a float") from exc


def model_flops_per_iteration(
    spec: ModelSpec, batch_size: int, checkpoint_activations: bool, *, exact: bool = False
) -> Union[float, Fraction]:
    """Model FLOPs for one iteration over ``batch_size`` samples.

    Uses the usual Megatron throughput formula::

        24 * c * B * s * L * d^2 * (1 + s / (6 d) + V / (16 L d))

    with ``c = 4`` under activation checkpointing (one extra forward) and
    ``c = 3`` otherwise. Evaluation is done in exact rational arithmetic, so
    nothing wraps around at trillion-parameter scale; pass ``exact=True`` to get
    the :class:`~fractions.Fraction` instead of a float.
    """
    if batch_size < 0:
        raise ValueError(f"batch_size must be >= 0, got {batch_size}")
    c = 4 if checkpoint_activations else 3
    s, L, d, V = spec.seq_length, spec.num_layers, spec.hidden_size, spec.vocab_size
    base = 24 * c * batch_size * s * L * d * d
    flops = base * (1 + Fraction(s, 6 * d) + Fraction(V, 16 * L * d))
    return flops if exact else _to_float(flops)


def training_budget(model: Union[ModelSpec, int], tokens: int) -> float:
    """Total training compute by the ``6 N D`` rule.

    ``model`` is a :class:`ModelSpec` (its ``12 L d^2`` count is used) or a raw
    parameter count.
    """
    if tokens < 0:
        raise ValueError(f"tokens must be >= 0, got {tokens}")
    n = param_count(model).total_approx if isinstance(model, ModelSpec) else int(model)
    return _to_float(Fraction(6 * n * int(tokens)))
