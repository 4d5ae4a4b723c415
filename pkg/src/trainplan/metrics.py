"""FLOPS accounting from measurement files.

Hardware FLOPS come from rocprof-style counter dumps; model FLOPS come from
the TFLOPs figure each training iteration logs. Comparing the two catches a
micro-batch size that disagrees between the launcher and the DeepSpeed
config, which inflates the logged number.
"""

from __future__ import annotations

import csv
import io
import math
import re
import warnings
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .cluster import ClusterSpec

PRECISIONS = ("F16", "F32", "F64")
VALU_OPS = ("ADD", "MUL", "FMA", "TRANS")
MFMA_KINDS = ("F16", "BF16", "F32", "F64")

COUNTERS = tuple(
    [f"SQ_INSTS_VALU_{op}_{p}" for p in PRECISIONS for op in VALU_OPS]
    + [f"SQ_INSTS_VALU_MFMA_MOPS_{k}" for k in MFMA_KINDS]
    + ["SQ_INSTS_VALU_MFMA_BF16"]
)

# FLOPs per MFMA op. The default counts 512 for every type; the Frontier
# user guide gives per-type values.
MFMA_COEFFICIENTS = {
    "default": {"F16": 512, "BF16": 512, "F32": 512, "F64": 512},
    "frontier-guide": {"F16": 1024, "BF16": 1024, "F32": 256, "F64": 256},
}


@dataclass(frozen=True)
class CounterRecord:
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for name in COUNTERS:
            value = self.counts.get(name, 0)
            if value < 0:
                raise ValueError(f"counter {name} is negative ({value})")
            clean[name] = value
        extra = set(self.counts) - set(COUNTERS)
        if extra:
            raise ValueError(f"unknown counters: {sorted(extra)}")
        object.__setattr__(self, "counts", clean)

    def __getitem__(self, name: str):
        return self.counts[name]

    def __add__(self, other: "CounterRecord") -> "CounterRecord":
        return CounterRecord({k: self.counts[k] + other.counts[k] for k in COUNTERS})

    def to_dict(self) -> dict:
        return dict(self.counts)

    @classmethod
    def from_dict(cls, data: dict) -> "CounterRecord":
        return cls(dict(data))


def _number(text: str, column: str, line: int):
    text = text.strip()
    if text == "":
        return 0
    try:
        return int(text)
    except ValueError:
        pass
    try:
        value = float(text)
    except ValueError:
        raise ValueError(f"line {line}: {column}={text!r} is not a number") from None
    if not math.isfinite(value):
        raise ValueError(f"line {line}: {column}={text!r} is not finite")
    return value


def parse_counters(text: str) -> CounterRecord:
    """Sum a counter CSV (header of counter names, one row per dispatch).

    Columns that are not known counters are ignored with a warning.
    """
    reader = csv.DictReader(io.StringIO(text))
    if not reader.fieldnames:
        raise ValueError("counter CSV has no header")
    header = [h.strip() for h in reader.fieldnames]
    unknown = [h for h in header if h not in COUNTERS]
    if unknown:
        warnings.warn(f"ignoring unknown counter columns: {', '.join(unknown)}", stacklevel=2)
    totals = dict.fromkeys(COUNTERS, 0)
    for line, row in enumerate(reader, start=2):
        for raw_key, raw_val in row.items():
            if raw_key is None:
                raise ValueError(f"line {line}: more fields than header columns")
            key = raw_key.strip()
            if key not in totals:
                continue
            value = _number(raw_val or "", key, line)
            if value < 0:
                raise ValueError(f"line {line}: {key} is negative ({value})")
            totals[key] += value
    return CounterRecord(totals)


def hw_flops(rec: CounterRecord, coeff_mode: str = "default") -> float:
    """FLOPs implied by the counters.

    Each VALU precision contributes ``64 * (MUL + ADD + 2*FMA + TRANS)``;
    MFMA ops are scaled by the per-type coefficient of ``coeff_mode``.
    """
    try:
        mfma = MFMA_COEFFICIENTS[coeff_mode]
    except KeyError:
        raise ValueError(f"coeff_mode must be one of {sorted(MFMA_COEFFICIENTS)}") from None
    c = rec.counts
    total = 0
    for p in PRECISIONS:
        total += 64 * (
            c[f"SQ_INSTS_VALU_MUL_{p}"]
            + c[f"SQ_INSTS_VALU_ADD_{p}"]
            + 2 * c[f"SQ_INSTS_VALU_FMA_{p}"]
            + c[f"SQ_INSTS_VALU_TRANS_{p}"]
        )
    for k in MFMA_KINDS:
        total += mfma[k] * c[f"SQ_INSTS_VALU_MFMA_MOPS_{k}"]
    return total


# -- training logs -------------------------------------------------------------

@dataclass(frozen=True)
class IterationLogEntry:
    iter_index: int
    iter_time: float
    reported_tflops: float

    def __post_init__(self):
        if not self.iter_time > 0:
            raise ValueError(f"iter_time must be > 0, got {self.iter_time}")
        if self.reported_tflops < 0:
            raise ValueError(f"reported_tflops must be >= 0, got {self.reported_tflops}")


_NUM = r"([0-9]+(?:\.[0-9]*)?(?:[eE][-+]?[0-9]+)?)"
ITERATION_RE = re.compile(r"iteration\s+(\d+)")
ELAPSED_RE = re.compile(r"elapsed time per iteration \((ms|s)\):\s*" + _NUM)
TFLOPS_RE = re.compile(r"TFLOPs:\s*" + _NUM)


def parse_log(text: str) -> list:
    """Extract iterations from a Megatron-style training log.

    A line counts when it carries all of ``iteration N``,
    ``elapsed time per iteration (ms): T`` (or ``(s)``) and ``TFLOPs: F``;
    every other line is skipped.
    """
    out = []
    for line in text.splitlines():
        it, el, tf = ITERATION_RE.search(line), ELAPSED_RE.search(line), TFLOPS_RE.search(line)
        if not (it and el and tf):
            continue
        seconds = float(el.group(2)) / (1000.0 if el.group(1) == "ms" else 1.0)
        out.append(IterationLogEntry(int(it.group(1)), seconds, float(tf.group(1))))
    return out


def aggregate_model_flops(log: Sequence[IterationLogEntry]) -> float:
    """Time-weighted mean of the reported TFLOP/s."""
    if not log:
        raise ValueError("empty iteration log")
    weight = sum(e.iter_time for e in log)
    value = sum(e.iter_time * e.reported_tflops for e in log) / weight
    # keep rounding from escaping [min, max]
    lo = min(e.reported_tflops for e in log)
    hi = max(e.reported_tflops for e in log)
    return min(max(value, lo), hi)


class DiagnosisStatus(str, Enum):
    MISMATCH = "mismatch"
    CONSISTENT = "consistent"
    UNEXPLAINED = "unexplained"


@dataclass(frozen=True)
class Diagnosis:
    status: DiagnosisStatus
    ratio: float
    expected_ratio: float
    message: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["status"] = self.status.value
        return d


def diagnose_mbs_mismatch(
    model_flops: float,
    hw_flops_rate: float,
    cfg_mbs: int,
    ds_mbs: int,
    tolerance: float = 0.10,
) -> Diagnosis:
    """Explain a gap between logged model FLOPS and counter FLOPS.

    With ``r = ds_mbs / cfg_mbs``, a model/hardware ratio within
    ``tolerance`` of ``r != 1`` is blamed on the micro-batch mismatch.
    """
    if not hw_flops_rate > 0:
        raise ValueError("hardware FLOPS rate must be > 0")
    if cfg_mbs < 1 or ds_mbs < 1:
        raise ValueError("micro-batch sizes must be >= 1")
    ratio = model_flops / hw_flops_rate
    r = ds_mbs / cfg_mbs
    if r != 1 and abs(ratio - r) <= tolerance * r:
        return Diagnosis(
            DiagnosisStatus.MISMATCH, ratio, r,
            f"model FLOPS over-reported by factor {r:g} due to micro-batch-size mismatch",
        )
    if abs(ratio - 1) <= tolerance:
        return Diagnosis(DiagnosisStatus.CONSISTENT, ratio, r, "consistent")
    return Diagnosis(
        DiagnosisStatus.UNEXPLAINED, ratio, r,
        f"unexplained divergence: model/hardware ratio {ratio:.3f}",
    )


# -- roofline ------------------------------------------------------------------

class Bound(str, Enum):
    MEMORY = "memory_bound"
    COMPUTE = "compute_bound"


@dataclass(frozen=True)
class RooflineReport:
    total_flops: float
    total_bytes: float
    arithmetic_intensity: float
    bound: Bound
    ridge_intensity: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bound"] = self.bound.value
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RooflineReport":
        data = dict(data)
        data["bound"] = Bound(data["bound"])
        return cls(**data)


def roofline(flops: float, bytes_moved: float, cluster: ClusterSpec) -> RooflineReport:
    if bytes_moved <= 0:
        raise ValueError("bytes moved must be > 0")
    if flops < 0:
        raise ValueError("flops must be >= 0")
    ridge = cluster.peak_flops_per_gpu / cluster.hbm_bandwidth
    intensity = flops / bytes_moved
    bound = Bound.COMPUTE if intensity >= ridge else Bound.MEMORY
    return RooflineReport(flops, bytes_moved, intensity, bound, ridge)


# -- scaling -------------------------------------------------------------------

def _check_series(series) -> list:
    series = [(int(g), float(v)) for g, v in series]
    if not series:
        raise ValueError("empty scaling series")
    g0 = series[0][0]
    for g, v in series:
        if g < 1:
            raise ValueError(f"GPU count must be >= 1, got {g}")
        if g < g0:
            raise ValueError(f"{g} GPUs is fewer than the {g0}-GPU baseline")
        if not v > 0:
            raise ValueError(f"series values must be > 0, got {v}")
    return series


def weak_scaling(series: Iterable[tuple]) -> list:
    """Per-GPU throughput relative to the first (baseline) point."""
    series = _check_series(series)
    base = series[0][1]
    return [v / base for _, v in series]


def strong_scaling(series: Iterable[tuple]) -> list:
    """Speedup over the baseline divided by the GPU-count ratio."""
    series = _check_series(series)
    g0, t0 = series[0]
    return [(t0 / t) / (g / g0) for g, t in series]


def parse_series(text: str) -> list:
    """Two-column CSV (gpus, value) with an optional header row."""
    out = []
    for line, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 2:
            raise ValueError(f"line {line}: expected 2 columns, got {len(row)}")
        try:
            out.append((int(row[0]), float(row[1])))
        except ValueError:
            if line == 1:
                continue  # header
            raise ValueError(f"line {line}: cannot parse {row!r}") from None
    return out
