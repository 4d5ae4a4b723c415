"""Command-line front end.

Settings resolve in three layers: presets, then the ``--config`` JSON file,
then explicit flags. A config file looks like::

    {"model": "175B" | {"num_layers": ..., ...},
     "cluster": "frontier" | {"num_nodes": ..., ...},
     "parallel": {"tp": 4, "pp": 16, "mbs": 1, "gbs": 640, "zero_stage": 1},
     "knobs": {"kernel_efficiency": 0.5}}

Exit codes: 0 success, 1 configuration violates a hard rule, 2 bad input
(unreadable file, parse error, unknown flag).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import warnings
from dataclasses import replace
from typing import Optional

from .arch import MODEL_PRESETS, ModelSpec, get_model
from .cluster import CLUSTER_PRESETS, ClusterSpec, bandwidth_matrix
from .memory import memory_per_gpu
from .metrics import (
    aggregate_model_flops,
    diagnose_mbs_mismatch,
    hw_flops,
    parse_counters,
    parse_log,
    parse_series,
    strong_scaling,
    weak_scaling,
)
from .parallel import ParallelConfig, errors, validate
from .perf import EfficiencyKnobs, estimate, saturation_check
from .pipesim import ScheduleKind, StageTiming, analytic_bubble, render_timeline, simulate
from .search import HYPERPARAMETERS, PerfEvaluator, SearchSpace, run_search

log = logging.getLogger("trainplan")

EXIT_OK, EXIT_INVALID, EXIT_INPUT = 0, 1, 2
TRIAL_COLUMNS = ("trial",) + HYPERPARAMETERS + ("objective", "failure_kind")


class InputError(Exception):
    """Unreadable or malformed user input (exit code 2)."""


class ValidationFailure(Exception):
    def __init__(self, violations):
        self.violations = violations
        super().__init__("configuration is invalid")


def _read(path: str) -> str:
    try:
        if path == "-":
            return sys.stdin.read()
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None


def _write(path: Optional[str], text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror}") from None


def _load_json(path: str) -> dict:
    try:
        data = json.loads(_read(path))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise InputError(f"{path}: expected a JSON object")
    return data


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- config resolution ------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser, *, parallel: bool = True) -> None:
    p.add_argument("--config", help="PlanConfig JSON file")
    p.add_argument("--model", help=f"model preset ({', '.join(MODEL_PRESETS)})")
    p.add_argument("--preset", choices=sorted(CLUSTER_PRESETS), help="cluster preset (default frontier)")
    p.add_argument("--nodes", type=int, help="number of nodes")
    if not parallel:
        return
    p.add_argument("--tp", type=int)
    p.add_argument("--pp", type=int)
    p.add_argument("--mbs", type=int)
    p.add_argument("--gbs", type=int)
    p.add_argument("--zero", type=int, choices=(0, 1, 2, 3), dest="zero_stage")
    p.add_argument("--interleave", type=int, dest="interleave_v", help="virtual stages per device")
    p.add_argument("--precision", choices=("fp16", "bf16", "fp32"))
    p.add_argument("--grad-accum-dtype", choices=("fp16", "fp32"))
    p.add_argument("--no-checkpoint", action="store_true", help="disable activation checkpointing")
    p.add_argument("--no-flash", action="store_true", help="disable flash attention")
    p.add_argument("--no-activations", action="store_true", help="leave activations out of memory")
    p.add_argument("--kernel-efficiency", type=float)


def _resolve(args, default_model: str = "175B"):
    """(model, cluster, parallel config, knobs) after applying all three layers."""
    data = _load_json(args.config) if getattr(args, "config", None) else {}
    try:
        model_field = data.get("model", default_model)
        if args.model:
            model_field = args.model
        model = get_model(model_field) if isinstance(model_field, str) else ModelSpec.from_dict(model_field)

        cluster_field = data.get("cluster", "frontier")
        if args.preset:
            cluster_field = args.preset
        if isinstance(cluster_field, str):
            if cluster_field not in CLUSTER_PRESETS:
                raise KeyError(f"unknown cluster preset {cluster_field!r}")
            cluster = CLUSTER_PRESETS[cluster_field]()
        else:
            cluster = ClusterSpec.from_dict(cluster_field)
        if args.nodes is not None:
            cluster = cluster.with_nodes(args.nodes)

        par = dict(data.get("parallel", {}))
        for name in ("tp", "pp", "mbs", "gbs", "zero_stage", "interleave_v", "precision", "grad_accum_dtype"):
            value = getattr(args, name, None)
            if value is not None:
                par[name] = value
        if getattr(args, "no_checkpoint", False):
            par["checkpoint_activations"] = False
        if getattr(args, "no_flash", False):
            par["flash_attention"] = False
        cfg = ParallelConfig.from_dict(par)

        knobs = dict(data.get("knobs", {}))
        if getattr(args, "kernel_efficiency", None) is not None:
            knobs["kernel_efficiency"] = args.kernel_efficiency
        knobs = EfficiencyKnobs.from_dict(knobs)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"bad configuration: {exc}") from None
    return model, cluster, cfg, knobs


def _bound_or_fail(model, cfg, cluster) -> tuple[ParallelConfig, list]:
    bound = cfg.bind(cluster)
    violations = validate(model, bound, cluster)
    bad = errors(violations)
    if bad:
        raise ValidationFailure(bad)
    return bound, [v for v in violations if not v.is_error]


# -- subcommands ------------------------------------------------------------

def cmd_plan(args) -> int:
    model, cluster, cfg, knobs = _resolve(args)
    bound, soft = _bound_or_fail(model, cfg, cluster)
    include = not args.no_activations
    mem = memory_per_gpu(model, bound, cluster, include_activations=include)
    est = estimate(model, bound, cluster, knobs, memory=mem, include_activations=include)
    notes = [f"{v.rule}: {v.message}" for v in soft]
    advice = saturation_check(bound, warn=False)
    if advice:
        notes.append(advice)
    out = {
        "model": model.to_dict(),
        "cluster": cluster.to_dict(),
        "parallel": bound.to_dict(),
        "knobs": knobs.to_dict(),
        "derived": {"dp": bound.dp, "m": bound.num_microbatches, "world_size": bound.world_size},
        "memory": mem.to_dict(),
        "estimate": est.to_dict(),
        "oom": est.oom,
        "warnings": notes,
    }
    _write(None, _dump(out))
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        timing = StageTiming(args.t_fwd, args.t_bwd, args.t_comm)
        timeline = simulate(args.kind, args.p, args.m, args.v, timing)
    except ValueError as exc:
        raise ValidationFailure([str(exc)]) from None
    _write(args.out, render_timeline(timeline))
    if args.out not in (None, "-"):
        summary = {
            "kind": ScheduleKind.parse(args.kind).value,
            "p": args.p,
            "m": args.m,
            "v": args.v,
            "makespan": timeline.makespan,
            "bubble_fraction": timeline.bubble_fraction,
            "idle_fraction": timeline.idle_fraction,
            "analytic_bubble": analytic_bubble(args.kind, args.p, args.m, args.v),
        }
        _write(None, _dump(summary))
    return EXIT_OK


SWEEP_KEYS = ("tp", "pp", "mbs", "gbs", "nodes", "zero_stage", "interleave_v")
SWEEP_ALIASES = {"zero": "zero_stage", "interleave": "interleave_v", "v": "interleave_v"}


def parse_vary(spec: str) -> tuple[str, list]:
    """``key=a..b`` (doubling from a to b) or ``key=a,b,c``."""
    if "=" not in spec:
        raise InputError(f"--vary expects key=values, got {spec!r}")
    key, values = spec.split("=", 1)
    key = SWEEP_ALIASES.get(key.strip(), key.strip())
    if key not in SWEEP_KEYS:
        raise InputError(f"cannot sweep {key!r}; choose from {', '.join(SWEEP_KEYS)}")
    try:
        if ".." in values:
            lo, hi = (int(x) for x in values.split(".."))
            if lo < 1 or hi < lo:
                raise ValueError
            out, v = [], lo
            while v <= hi:
                out.append(v)
                v *= 2
        else:
            out = [int(x) for x in values.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"bad sweep values {values!r}") from None
    if not out:
        raise InputError("empty sweep")
    return key, out


def cmd_sweep(args) -> int:
    model, cluster, cfg, knobs = _resolve(args)
    key, values = parse_vary(args.vary)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([key, "status", "tflops_per_gpu", "peak_fraction", "iter_time", "bubble_fraction", "num_microbatches"])
    for value in values:
        point_cluster = cluster.with_nodes(value) if key == "nodes" else cluster
        try:
            point = cfg if key == "nodes" else replace(cfg, **{key: value})
        except ValueError as exc:
            w.writerow([value, "invalid", "", "", "", "", ""])
            log.info("skipping %s=%s: %s", key, value, exc)
            continue
        bound = point.bind(point_cluster)
        if errors(validate(model, bound, point_cluster)):
            w.writerow([value, "invalid", "", "", "", "", ""])
            continue
        est = estimate(model, bound, point_cluster, knobs, include_activations=not args.no_activations)
        w.writerow([
            value, "oom" if est.oom else "ok", repr(est.tflops_per_gpu), repr(est.peak_fraction),
            repr(est.iter_time), repr(est.bubble_fraction), est.num_microbatches,
        ])
    _write(args.out, buf.getvalue())
    return EXIT_OK


def _trial_row(rec) -> list:
    c = rec.config
    return [
        rec.trial, c.pp, c.tp, c.mbs, c.gas, str(c.zero1).lower(), c.nodes,
        "" if rec.objective is None else repr(rec.objective), rec.failure_kind.value,
    ]


def _trial_dict(rec) -> Optional[dict]:
    if rec is None:
        return None
    d = {h: getattr(rec.config, h) for h in HYPERPARAMETERS}
    d.update(trial=rec.trial, objective=rec.objective, failure_kind=rec.failure_kind.value)
    return d


def cmd_search(args) -> int:
    model, cluster, cfg, knobs = _resolve(args)
    seed = args.seed
    if seed is None:
        env = os.environ.get("TRAINPLAN_SEED")
        try:
            seed = int(env) if env is not None else 0
        except ValueError:
            raise InputError(f"TRAINPLAN_SEED must be an integer, got {env!r}") from None
    try:
        space = SearchSpace.from_dict(_load_json(args.space)) if args.space else SearchSpace()
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"bad search space: {exc}") from None
    evaluator = PerfEvaluator(model, cluster, cfg, knobs)
    result = run_search(space, args.budget, evaluator, seed=seed, workers=args.workers)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIAL_COLUMNS)
    for rec in result.history:
        w.writerow(_trial_row(rec))
    _write(args.out, buf.getvalue())
    summary = {
        "seed": seed,
        "budget": args.budget,
        "best": _trial_dict(result.best),
        "sensitivity": result.sensitivity,
        "diagnostic": result.diagnostic,
    }
    if args.out in (None, "-"):
        sys.stderr.write(_dump(summary))
    else:
        _write(None, _dump(summary))
    return EXIT_OK


def cmd_flops(args) -> int:
    if not (args.counters or args.log):
        raise InputError("flops needs --counters and/or --log")
    out = {}
    hw_rate = None
    if args.counters:
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                rec = parse_counters(_read(args.counters))
        except ValueError as exc:
            raise InputError(f"{args.counters}: {exc}") from None
        for w in caught:
            log.warning("%s", w.message)
        total = hw_flops(rec, args.coeff_mode)
        out["coeff_mode"] = args.coeff_mode
        out["hw_flops"] = total
        if args.time is not None:
            if args.time <= 0 or args.gpus < 1:
                raise InputError("--time must be > 0 and --gpus >= 1")
            hw_rate = total / args.time / args.gpus / 1e12
            out["hw_tflops_per_gpu"] = hw_rate
    if args.log:
        try:
            entries = parse_log(_read(args.log))
            out["model_tflops"] = aggregate_model_flops(entries)
        except ValueError as exc:
            raise InputError(f"{args.log}: {exc}") from None
        out["iterations"] = len(entries)
    if args.hw_tflops is not None:
        hw_rate = args.hw_tflops
    if "model_tflops" in out and hw_rate is not None and args.cfg_mbs and args.ds_mbs:
        if hw_rate <= 0:
            raise InputError("hardware FLOPS rate must be > 0")
        out["diagnosis"] = diagnose_mbs_mismatch(out["model_tflops"], hw_rate, args.cfg_mbs, args.ds_mbs).to_dict()
    _write(None, _dump(out))
    return EXIT_OK


def cmd_scaling(args) -> int:
    try:
        series = parse_series(_read(args.series))
        fn = weak_scaling if args.mode == "weak" else strong_scaling
        eff = fn(series)
    except ValueError as exc:
        raise InputError(f"{args.series}: {exc}") from None
    out = {"mode": args.mode, "gpus": [g for g, _ in series], "efficiency": eff}
    _write(None, _dump(out))
    return EXIT_OK


def cmd_topology(args) -> int:
    _, cluster, _, _ = _resolve(args)
    matrix = bandwidth_matrix(cluster)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank"] + list(range(cluster.world_size)))
    for r, row in enumerate(matrix):
        w.writerow([r] + [repr(x) for x in row])
    _write(args.out, buf.getvalue())
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trainplan", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="memory and throughput estimate as JSON")
    _add_config_flags(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="pipeline timeline as CSV")
    p.add_argument("--kind", default="1f1b", help="gpipe, 1f1b or interleaved")
    p.add_argument("-p", type=int, required=True, help="pipeline stages")
    p.add_argument("-m", type=int, required=True, help="microbatches")
    p.add_argument("-v", type=int, default=1, dest="v", help="virtual stages per device")
    p.add_argument("--t-fwd", type=float, default=1.0)
    p.add_argument("--t-bwd", type=float, default=1.0)
    p.add_argument("--t-comm", type=float, default=0.0)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="throughput curve over one knob as CSV")
    _add_config_flags(p)
    p.add_argument("--vary", required=True, help="key=a..b (doubling) or key=a,b,c")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("search", help="model-based configuration search")
    _add_config_flags(p)
    p.add_argument("--space", help="search space JSON (default: the built-in 175B grid)")
    p.add_argument("--budget", type=int, default=100)
    p.add_argument("--seed", type=int, help="RNG seed (falls back to TRAINPLAN_SEED, then 0)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="trials CSV path (default stdout)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("flops", help="hardware and model FLOPS from measurement files")
    p.add_argument("--counters", help="rocprof counter CSV")
    p.add_argument("--coeff-mode", choices=("default", "frontier-guide"), default="default")
    p.add_argument("--time", type=float, help="wall time in seconds covered by the counters")
    p.add_argument("--gpus", type=int, default=1, help="GPUs covered by the counters")
    p.add_argument("--log", help="training log with per-iteration TFLOPs")
    p.add_argument("--hw-tflops", type=float, help="hardware TFLOP/s per GPU, if known")
    p.add_argument("--cfg-mbs", type=int, help="micro-batch size given to the launcher")
    p.add_argument("--ds-mbs", type=int, help="train_micro_batch_size_per_gpu in the DeepSpeed config")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("scaling", help="weak or strong scaling efficiency")
    p.add_argument("--mode", choices=("weak", "strong"), required=True)
    p.add_argument("--series", required=True, help="CSV of gpus,value (throughput or iteration time)")
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("topology", help="pairwise bandwidth matrix as CSV")
    _add_config_flags(p, parallel=False)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_topology)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationFailure as exc:
        for v in exc.violations:
            text = v if isinstance(v, str) else f"{v.rule}: {v.message}"
            print(f"violation: {text}", file=sys.stderr)
        return EXIT_INVALID
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
