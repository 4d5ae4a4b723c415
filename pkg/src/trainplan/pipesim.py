"""Discrete-event simulation of pipeline-parallel training schedules.

Each device runs a fixed, schedule-defined sequence of forward and backward
passes. An operation starts once its device is free and its producer has
finished (plus the transfer time when the producer lives on another device).
Transfers block the receiver only; the sender never waits.

Bubble accounting: ``bubble_fraction`` is idle device-time divided by busy
compute time, the quantity the classic ``(p-1)/m`` formula describes.
``idle_fraction`` is idle time over total device-time, ``1 - busy/(p*T)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import lru_cache
from enum import Enum
from fractions import Fraction
from typing import Optional, Union


class ScheduleKind(str, Enum):
    GPIPE = "gpipe"
    ONE_F_ONE_B = "1f1b"
    INTERLEAVED = "interleaved"

    @classmethod
    def parse(cls, value: Union[str, "ScheduleKind"]) -> "ScheduleKind":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "").replace("-", "")
        aliases = {
            "gpipe": cls.GPIPE,
            "1f1b": cls.ONE_F_ONE_B,
            "onef1b": cls.ONE_F_ONE_B,
            "interleaved": cls.INTERLEAVED,
            "interleaved1f1b": cls.INTERLEAVED,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown schedule kind {value!r}") from None


class EventKind(str, Enum):
    FWD = "FWD"
    BWD = "BWD"
    SEND = "SEND"
    RECV = "RECV"
    IDLE = "IDLE"


COMPUTE_KINDS = (EventKind.FWD, EventKind.BWD)


@dataclass(frozen=True)
class StageTiming:
    """Per-microbatch times for one pipeline stage (all of a device's layers)."""

    t_fwd: float = 1.0
    t_bwd: float = 2.0
    t_comm: float = 0.0

    def __post_init__(self):
        if self.t_fwd < 0 or self.t_bwd < 0 or self.t_comm < 0:
            raise ValueError("stage timings must be non-negative")

    @classmethod
    def from_total(cls, t_total: float, t_comm: float = 0.0) -> "StageTiming":
        """Split a combined fwd+bwd time with backward costing twice the forward."""
        return cls(t_total / 3.0, 2.0 * t_total / 3.0, t_comm)


@dataclass(frozen=True)
class Event:
    device: int
    kind: EventKind
    microbatch: int
    stage_chunk: int
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class IterationTimeline:
    events: list = field(default_factory=list)
    num_devices: int = 0

    @property
    def makespan(self) -> float:
        return max((e.end for e in self.events), default=0.0)

    @property
    def busy_time(self) -> float:
        return sum(e.duration for e in self.events if e.kind in COMPUTE_KINDS)

    @property
    def idle_time(self) -> float:
        return self.num_devices * self.makespan - self.busy_time

    @property
    def bubble_fraction(self) -> float:
        busy = self.busy_time
        return self.idle_time / busy if busy > 0 else 0.0

    @property
    def idle_fraction(self) -> float:
        total = self.num_devices * self.makespan
        return 1.0 - self.busy_time / total if total > 0 else 0.0

    def device_events(self, device: int) -> list:
        return [e for e in self.events if e.device == device]


def analytic_bubble(kind, p: int, m: int, v: int = 1) -> float:
    """Closed-form bubble-to-compute ratio.

    GPipe and plain 1F1B share ``(p-1)/m`` (1F1B only lowers activation
    memory; it is often quoted loosely as ``p/m``). Interleaving ``v`` chunks
    per device divides the bubble by ``v``.
    """
    kind = ScheduleKind.parse(kind)
    _check_shape(kind, p, m, v)
    if kind is ScheduleKind.INTERLEAVED:
        return (p - 1) / (m * v)
    return (p - 1) / m


def _check_shape(kind: ScheduleKind, p: int, m: int, v: int) -> None:
    if p < 1 or m < 1 or v < 1:
        raise ValueError(f"p, m and v must all be >= 1 (got p={p}, m={m}, v={v})")
    if v > 1 and kind is not ScheduleKind.INTERLEAVED:
        raise ValueError(f"v={v} > 1 requires the interleaved schedule, not {kind.value}")


# An op is (kind, microbatch, chunk); the chunk's virtual stage is chunk*p + device.

def _gpipe_order(p, m, r):
    return [(EventKind.FWD, i, 0) for i in range(m)] + [(EventKind.BWD, i, 0) for i in range(m)]


def _one_f_one_b_order(p, m, r):
    warmup = min(p - r - 1, m)
    ops = [(EventKind.FWD, i, 0) for i in range(warmup)]
    for i in range(m - warmup):
        ops.append((EventKind.FWD, warmup + i, 0))
        ops.append((EventKind.BWD, i, 0))
    ops.extend((EventKind.BWD, i, 0) for i in range(m - warmup, m))
    return ops


def _interleaved_sequence(p, m, v, backward):
    # microbatches advance in groups of p; each group visits every chunk in turn
    seq = []
    for start in range(0, m, p):
        group = range(start, min(start + p, m))
        chunks = range(v - 1, -1, -1) if backward else range(v)
        for c in chunks:
            seq.extend((mb, c) for mb in group)
    return seq


def _interleaved_order(p, m, v, r):
    fwd = _interleaved_sequence(p, m, v, backward=False)
    bwd = _interleaved_sequence(p, m, v, backward=True)
    total = m * v
    warmup = min((p - r - 1) * 2 + (v - 1) * p, total)
    ops = [(EventKind.FWD, mb, c) for mb, c in fwd[:warmup]]
    for i in range(total - warmup):
        mb, c = fwd[warmup + i]
        ops.append((EventKind.FWD, mb, c))
        mb, c = bwd[i]
        ops.append((EventKind.BWD, mb, c))
    ops.extend((EventKind.BWD, mb, c) for mb, c in bwd[total - warmup:])
    return ops


def schedule_orders(kind, p: int, m: int, v: int = 1) -> list:
    """Per-device op sequences ``[(EventKind, microbatch, chunk), ...]``."""
    kind = ScheduleKind.parse(kind)
    _check_shape(kind, p, m, v)
    if kind is ScheduleKind.GPIPE:
        return [_gpipe_order(p, m, r) for r in range(p)]
    if kind is ScheduleKind.ONE_F_ONE_B or v == 1:
        return [_one_f_one_b_order(p, m, r) for r in range(p)]
    return [_interleaved_order(p, m, v, r) for r in range(p)]


def _producer(op, r, p, v):
    """(op key, device) this op waits on, or None."""
    kind, mb, c = op
    vs = c * p + r
    last = p * v - 1
    if kind is EventKind.FWD:
        if vs == 0:
            return None
        prev = vs - 1
        return (EventKind.FWD, mb, prev), prev % p
    if vs == last:
        return (EventKind.FWD, mb, vs), r
    nxt = vs + 1
    return (EventKind.BWD, mb, nxt), nxt % p


@dataclass(frozen=True)
class _Compiled:
    """A schedule flattened to integer slots: one slot per (kind, mb, virtual stage)."""

    p: int
    v: int
    ops: tuple  # per device: tuple of (slot, dep_slot or -1, cross_device, is_fwd)
    labels: tuple  # per device: tuple of (EventKind, microbatch, chunk)
    consumer_device: tuple  # slot -> device of the op waiting on it (or -1)


@lru_cache(maxsize=64)
def _compile(kind: ScheduleKind, p: int, m: int, v: int) -> _Compiled:
    orders = schedule_orders(kind, p, m, v)
    stages = p * v

    def slot(kind, mb, vs):
        return ((0 if kind is EventKind.FWD else 1) * m + mb) * stages + vs

    consumer = [-1] * (2 * m * stages)
    ops, labels = [], []
    for r, order in enumerate(orders):
        dev_ops = []
        for op in order:
            dep = _producer(op, r, p, v)
            me = slot(op[0], op[1], op[2] * p + r)
            if dep is None:
                dev_ops.append((me, -1, False, op[0] is EventKind.FWD))
            else:
                key, src = dep
                dep_slot = slot(*key)
                consumer[dep_slot] = r
                dev_ops.append((me, dep_slot, src != r, op[0] is EventKind.FWD))
        ops.append(tuple(dev_ops))
        labels.append(tuple(order))
    return _Compiled(p, v, tuple(ops), tuple(labels), tuple(consumer))


def _execute(plan: _Compiled, t_fwd: float, t_bwd: float, t_comm: float, record: bool):
    """Core event loop. Returns (events or None, makespan, busy, per-device recv wait)."""
    p = plan.p
    tf, tb = t_fwd / plan.v, t_bwd / plan.v
    done = [-1.0] * len(plan.consumer_device)
    free = [0.0] * p
    ptr = [0] * p
    recv = [0.0] * p
    events = [] if record else None
    pending = list(range(p - 1, -1, -1))
    consumer = plan.consumer_device
    while pending:
        r = pending.pop()
        dev_ops = plan.ops[r]
        i = ptr[r]
        t = free[r]
        n = len(dev_ops)
        while i < n:
            me, dep, cross, is_fwd = dev_ops[i]
            if dep >= 0:
                produced = done[dep]
                if produced < 0.0:
                    break
                if cross:
                    ready = produced + t_comm
                    idle_from = t if t > produced else produced
                    if ready > idle_from:
                        recv[r] += ready - idle_from
                        if record:
                            kind, mb, c = plan.labels[r][i]
                            events.append(Event(r, EventKind.RECV, mb, c, idle_from, ready))
                else:
                    ready = produced
                if ready > t:
                    t = ready
            end = t + (tf if is_fwd else tb)
            if record:
                kind, mb, c = plan.labels[r][i]
                events.append(Event(r, kind, mb, c, t, end))
            t = end
            done[me] = end
            i += 1
            waiter = consumer[me]
            if waiter >= 0 and waiter != r:
                pending.append(waiter)
        ptr[r] = i
        free[r] = t
    stuck = [r for r in range(p) if ptr[r] < len(plan.ops[r])]
    if stuck:
        raise RuntimeError(f"schedule deadlocked on devices {stuck}")
    makespan = max(free)
    busy = sum(sum(tf if op[3] else tb for op in dev_ops) for dev_ops in plan.ops)
    return events, makespan, busy, recv


def simulate(kind, p: int, m: int, v: int = 1, timing: Optional[StageTiming] = None) -> IterationTimeline:
    """Run one training iteration of ``m`` microbatches through ``p`` stages."""
    kind = ScheduleKind.parse(kind)
    _check_simulable(kind, p, m, v)
    timing = timing or StageTiming(1.0, 1.0, 0.0)
    plan = _compile(kind, p, m, v)
    events, _, _, _ = _execute(plan, timing.t_fwd, timing.t_bwd, timing.t_comm, record=True)
    events.sort(key=lambda e: (e.device, e.start, e.end))
    return IterationTimeline(events=events, num_devices=p)


@dataclass(frozen=True)
class PipelineSummary:
    makespan: float
    busy_per_device: float
    recv_wait_per_device: float
    num_devices: int

    @property
    def bubble_fraction(self) -> float:
        busy = self.busy_per_device * self.num_devices
        idle = self.num_devices * self.makespan - busy
        return idle / busy if busy > 0 else 0.0


def summarize(kind, p: int, m: int, v: int = 1, timing: Optional[StageTiming] = None) -> PipelineSummary:
    """Same simulation as :func:`simulate` without materialising events."""
    kind = ScheduleKind.parse(kind)
    _check_simulable(kind, p, m, v)
    timing = timing or StageTiming(1.0, 1.0, 0.0)
    plan = _compile(kind, p, m, v)
    _, makespan, busy, recv = _execute(plan, timing.t_fwd, timing.t_bwd, timing.t_comm, record=False)
    return PipelineSummary(makespan, busy / p, sum(recv) / p, p)


def _check_simulable(kind: ScheduleKind, p: int, m: int, v: int) -> None:
    _check_shape(kind, p, m, v)
    if kind is ScheduleKind.INTERLEAVED and v > 1 and m > p and m % p:
        raise ValueError(
            f"interleaved schedule needs m <= p or m a multiple of p (got p={p}, m={m})"
        )


CSV_COLUMNS = ("device", "kind", "microbatch", "chunk", "start", "end")


def render_timeline(timeline: IterationTimeline) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for e in timeline.events:
        writer.writerow([e.device, e.kind.value, e.microbatch, e.stage_chunk, repr(e.start), repr(e.end)])
    return buf.getvalue()


def parse_timeline(text: str, num_devices: Optional[int] = None) -> IterationTimeline:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"expected columns {CSV_COLUMNS}, got {reader.fieldnames}")
    events = [
        Event(
            int(row["device"]),
            EventKind(row["kind"]),
            int(row["microbatch"]),
            int(row["chunk"]),
            float(row["start"]),
            float(row["end"]),
        )
        for row in reader
    ]
    if num_devices is None:
        num_devices = max((e.device for e in events), default=-1) + 1
    return IterationTimeline(events=events, num_devices=num_devices)


def exact_bubble(kind, p: int, m: int, v: int = 1) -> Fraction:
    """Analytic bubble as an exact fraction, for comparisons without rounding."""
    kind = ScheduleKind.parse(kind)
    _check_shape(kind, p, m, v)
    return Fraction(p - 1, m * (v if kind is ScheduleKind.INTERLEAVED else 1))
