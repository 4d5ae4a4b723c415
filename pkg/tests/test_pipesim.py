from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from trainplan.pipesim import (
    COMPUTE_KINDS,
    EventKind,
    IterationTimeline,
    ScheduleKind,
    StageTiming,
    analytic_bubble,
    exact_bubble,
    parse_timeline,
    render_timeline,
    simulate,
    summarize,
)

UNIFORM = StageTiming(1.0, 1.0, 0.0)


def compute_events(tl, device=None):
    return [e for e in tl.events if e.kind in COMPUTE_KINDS and (device is None or e.device == device)]


def check_structure(tl, p, m, v, t_comm):
    """No overlap per device, one FWD and BWD per (mb, chunk), dependencies honoured."""
    by_key = {}
    for dev in range(p):
        evs = sorted(tl.device_events(dev), key=lambda e: (e.start, e.end))
        for a, b in zip(evs, evs[1:]):
            assert a.end <= b.start + 1e-12
        for e in evs:
            assert e.end >= e.start
    for e in compute_events(tl):
        key = (e.kind, e.microbatch, e.stage_chunk * p + e.device)
        assert key not in by_key
        by_key[key] = e
    assert len(by_key) == 2 * m * p * v
    last = p * v - 1
    for (kind, mb, vs), e in by_key.items():
        if kind is EventKind.FWD and vs > 0:
            prev = by_key[(EventKind.FWD, mb, vs - 1)]
        elif kind is EventKind.BWD and vs < last:
            prev = by_key[(EventKind.BWD, mb, vs + 1)]
        elif kind is EventKind.BWD:
            prev = by_key[(EventKind.FWD, mb, vs)]
        else:
            continue
        lag = t_comm if prev.device != e.device else 0.0
        assert prev.end + lag <= e.start + 1e-9


@pytest.mark.parametrize("p", [1, 2, 4, 8, 16])
@pytest.mark.parametrize("factor", [1, 2, 4])
def test_gpipe_matches_analytic(p, factor):
    m = factor * p
    tl = simulate("gpipe", p, m, timing=UNIFORM)
    assert abs(tl.bubble_fraction - (p - 1) / m) <= 1e-12
    assert tl.bubble_fraction == pytest.approx(analytic_bubble("gpipe", p, m), abs=1e-12)


@pytest.mark.parametrize("p", [2, 4, 8])
def test_gpipe_oracle_holds_with_heavier_backward(p):
    tl = simulate("gpipe", p, 2 * p, timing=StageTiming(1.0, 2.0, 0.0))
    assert abs(tl.bubble_fraction - (p - 1) / (2 * p)) <= 1e-12


@pytest.mark.parametrize("p", [2, 4, 8, 16])
@pytest.mark.parametrize("factor", [1, 2, 4])
def test_one_f_one_b_bubble(p, factor):
    m = factor * p
    tl = simulate("1f1b", p, m, timing=UNIFORM)
    assert tl.bubble_fraction == pytest.approx((p - 1) / m, rel=0.10)


@pytest.mark.parametrize("p", [2, 4, 8, 16])
@pytest.mark.parametrize("factor", [1, 2, 4])
@pytest.mark.parametrize("v", [1, 2, 4])
def test_interleaved_bubble(p, factor, v):
    m = factor * p
    tl = simulate("interleaved", p, m, v, timing=UNIFORM)
    assert tl.bubble_fraction == pytest.approx((p - 1) / (m * v), rel=0.10)


def test_analytic_examples():
    assert analytic_bubble("gpipe", 8, 8) == 7 / 8
    assert analytic_bubble("interleaved", 8, 16, 2) == 7 / 32
    for kind in ScheduleKind:
        assert analytic_bubble(kind, 1, 5) == 0
    assert exact_bubble("interleaved", 8, 16, 2) == Fraction(7, 32)


def test_single_stage_has_no_bubble():
    assert simulate("gpipe", 1, 4, timing=UNIFORM).bubble_fraction == 0


def test_idle_fraction_definition():
    tl = simulate("gpipe", 4, 4, timing=UNIFORM)
    assert tl.idle_fraction == pytest.approx(1 - tl.busy_time / (4 * tl.makespan))
    assert tl.idle_fraction == pytest.approx(3 / 7)


@pytest.mark.parametrize("kind", ["gpipe", "1f1b"])
def test_bubble_decreases_in_m(kind):
    vals = [simulate(kind, 4, m, timing=UNIFORM).bubble_fraction for m in range(1, 20)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("kind", ["gpipe", "1f1b"])
def test_bubble_increases_in_p(kind):
    vals = [simulate(kind, p, 16, timing=UNIFORM).bubble_fraction for p in (1, 2, 4, 8, 16)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


@given(st.integers(1, 12), st.integers(1, 12))
def test_gpipe_doubling_shifts_bubble_by_half_over_m(p, m):
    # (p-1)/m is only invariant in its p/m part: doubling adds exactly 1/(2m)
    a = simulate("gpipe", p, m, timing=UNIFORM).bubble_fraction
    b = simulate("gpipe", 2 * p, 2 * m, timing=UNIFORM).bubble_fraction
    assert b - a == pytest.approx(1 / (2 * m), abs=1e-12)


def test_gpipe_synchronises_before_backward():
    tl = simulate("gpipe", 4, 6, timing=UNIFORM)
    last = tl.device_events(3)
    last_fwd = max(e.end for e in last if e.kind is EventKind.FWD)
    first_bwd = min(e.start for e in last if e.kind is EventKind.BWD)
    assert last_fwd <= first_bwd


def test_one_f_one_b_alternates_after_warmup():
    p, m = 4, 16
    tl = simulate("1f1b", p, m, timing=UNIFORM)
    for r in range(p):
        kinds = [e.kind for e in compute_events(tl, r)]
        warm = p - r - 1
        assert kinds[:warm] == [EventKind.FWD] * warm
        steady = kinds[warm:warm + 2 * (m - warm)]
        assert steady == [EventKind.FWD, EventKind.BWD] * (m - warm)
        assert kinds[warm + 2 * (m - warm):] == [EventKind.BWD] * warm


@settings(max_examples=60, deadline=None)
@given(
    st.sampled_from(["gpipe", "1f1b", "interleaved"]),
    st.integers(1, 6),
    st.integers(1, 12),
    st.sampled_from([1, 2, 3]),
    st.floats(0.1, 3.0),
    st.floats(0.1, 3.0),
    st.floats(0.0, 1.0),
)
def test_timeline_structure(kind, p, m, v, tf, tb, tc):
    if kind != "interleaved":
        v = 1
    elif m > p and m % p:
        m = p * (m // p)
    tl = simulate(kind, p, m, v, StageTiming(tf, tb, tc))
    check_structure(tl, p, m, v, tc)
    # a chunk carries 1/v of the stage, so busy time does not depend on v
    assert tl.busy_time == pytest.approx(p * m * (tf + tb))
    s = summarize(kind, p, m, v, StageTiming(tf, tb, tc))
    assert s.makespan == pytest.approx(tl.makespan)
    assert s.bubble_fraction == pytest.approx(tl.bubble_fraction)


def test_comm_produces_recv_waits():
    tl = simulate("1f1b", 4, 8, timing=StageTiming(1.0, 2.0, 0.5))
    assert any(e.kind is EventKind.RECV for e in tl.events)
    base = simulate("1f1b", 4, 8, timing=StageTiming(1.0, 2.0, 0.0))
    assert tl.makespan > base.makespan


def test_deterministic():
    a = render_timeline(simulate("interleaved", 4, 8, 2, StageTiming(1.0, 2.0, 0.1)))
    b = render_timeline(simulate("interleaved", 4, 8, 2, StageTiming(1.0, 2.0, 0.1)))
    assert a == b


def test_csv_round_trip():
    tl = simulate("1f1b", 3, 5, timing=StageTiming(0.3, 0.7, 0.11))
    text = render_timeline(tl)
    back = parse_timeline(text, num_devices=3)
    assert back.events == tl.events
    assert back.bubble_fraction == tl.bubble_fraction


def test_csv_row_count_and_empty():
    tl = simulate("gpipe", 2, 2, timing=UNIFORM)
    rows = render_timeline(tl).strip().splitlines()
    assert rows[0] == "device,kind,microbatch,chunk,start,end"
    assert sum(1 for r in rows[1:] if ",FWD," in r or ",BWD," in r) == 8
    assert render_timeline(IterationTimeline()) == "device,kind,microbatch,chunk,start,end\n"


def test_csv_bad_header():
    with pytest.raises(ValueError):
        parse_timeline("a,b\n1,2\n")


@pytest.mark.parametrize("args", [
    ("gpipe", 0, 4, 1),
    ("gpipe", 4, 0, 1),
    ("gpipe", 4, 4, 2),
    ("1f1b", 4, 4, 2),
    ("interleaved", 4, 6, 2),
    ("zigzag", 4, 4, 1),
])
def test_invalid_shapes(args):
    kind, p, m, v = args
    with pytest.raises(ValueError):
        simulate(kind, p, m, v)


def test_stage_timing_split():
    t = StageTiming.from_total(3.0, 0.5)
    assert (t.t_fwd, t.t_bwd, t.t_comm) == (1.0, 2.0, 0.5)
    with pytest.raises(ValueError):
        StageTiming(-1.0)


def test_large_pipeline_is_fast():
    import time

    start = time.perf_counter()
    s = summarize("1f1b", 64, 800, timing=UNIFORM)
    assert time.perf_counter() - start < 5
    assert s.bubble_fraction == pytest.approx(63 / 800, rel=0.10)
