"""Sequential model-based search over distribution strategies.

The loop has two phases. A Latin-hypercube style sample seeds the history;
afterwards a distance-weighted k-nearest-neighbour surrogate scores random
untried candidates and the best-scoring one is evaluated next. Failed trials
(OOM, invalid, timeout) enter the surrogate with a penalised objective just
below the worst success, which steers later proposals away from them.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .arch import ModelSpec
from .cluster import ClusterSpec, frontier_preset
from .parallel import ParallelConfig, errors, validate
from .perf import EfficiencyKnobs, estimate

log = logging.getLogger(__name__)

HYPERPARAMETERS = ("pp", "tp", "mbs", "gas", "zero1", "nodes")
_LOG_SCALED = {"pp", "tp"}

KNN_K = 5
PHASE1_MAX = 16
CANDIDATES = 256
PERMUTATIONS = 100


@dataclass(frozen=True)
class SearchSpace:
    pp: tuple = (1, 2, 4, 8, 12, 16)
    tp: tuple = (1, 2, 4, 8)
    mbs: tuple = tuple(range(4, 21))
    gas: tuple = (5, 10)
    zero1: tuple = (True, False)
    nodes: tuple = (12, 16)

    def __post_init__(self):
        for name in HYPERPARAMETERS:
            values = tuple(getattr(self, name))
            if not values:
                raise ValueError(f"search domain {name!r} is empty")
            object.__setattr__(self, name, values)

    def domain(self, name: str) -> tuple:
        return getattr(self, name)

    @property
    def size(self) -> int:
        return math.prod(len(self.domain(h)) for h in HYPERPARAMETERS)

    def to_dict(self) -> dict:
        return {h: list(self.domain(h)) for h in HYPERPARAMETERS}

    @classmethod
    def from_dict(cls, data: dict) -> "SearchSpace":
        kwargs = {}
        for name in HYPERPARAMETERS:
            if name not in data:
                continue
            value = data[name]
            if isinstance(value, dict):  # inclusive integer range
                value = range(int(value["low"]), int(value["high"]) + 1)
            kwargs[name] = tuple(bool(v) if name == "zero1" else int(v) for v in value)
        return cls(**kwargs)


@dataclass(frozen=True, order=True)
class SearchConfig:
    pp: int
    tp: int
    mbs: int
    gas: int
    zero1: bool
    nodes: int

    def values(self) -> tuple:
        return tuple(getattr(self, h) for h in HYPERPARAMETERS)


class FailureKind(str, Enum):
    NONE = "NONE"
    OOM = "OOM"
    INVALID = "INVALID"
    TIMEOUT = "TIMEOUT"


@dataclass(frozen=True)
class TrialRecord:
    trial: int
    config: SearchConfig
    objective: Optional[float]
    failure_kind: FailureKind = FailureKind.NONE
    wall_time: float = 0.0

    def __post_init__(self):
        failed = self.failure_kind is not FailureKind.NONE
        if failed != (self.objective is None):
            raise ValueError("objective must be None exactly when the trial failed")

    @property
    def failed(self) -> bool:
        return self.failure_kind is not FailureKind.NONE


@dataclass
class SearchResult:
    best: Optional[TrialRecord]
    history: list
    sensitivity: dict = field(default_factory=dict)
    diagnostic: str = ""

    def best_so_far(self) -> list:
        """Best non-failed objective after each trial (None until the first success)."""
        out, best = [], None
        for rec in self.history:
            if not rec.failed and (best is None or rec.objective > best):
                best = rec.objective
            out.append(best)
        return out


# -- encoding and surrogate -------------------------------------------------

def _encode_value(name: str, value) -> float:
    if name == "zero1":
        return 1.0 if value else 0.0
    if name in _LOG_SCALED:
        return math.log2(value)
    return float(value)


class _Scaler:
    def __init__(self, space: SearchSpace):
        lo, hi = [], []
        for name in HYPERPARAMETERS:
            enc = [_encode_value(name, v) for v in space.domain(name)]
            lo.append(min(enc))
            hi.append(max(enc))
        self.lo = np.array(lo)
        span = np.array(hi) - self.lo
        self.span = np.where(span > 0, span, 1.0)

    def __call__(self, configs: Sequence[SearchConfig]) -> np.ndarray:
        raw = np.array(
            [[_encode_value(n, v) for n, v in zip(HYPERPARAMETERS, c.values())] for c in configs],
            dtype=float,
        ).reshape(len(configs), len(HYPERPARAMETERS))
        return (raw - self.lo) / self.span


def knn_predict(x_train: np.ndarray, y_train: np.ndarray, x_query: np.ndarray, k: int = KNN_K) -> np.ndarray:
    """Inverse-distance weighted k-NN regression; exact matches return their mean."""
    k = min(k, len(x_train))
    d2 = (x_query**2).sum(1)[:, None] + (x_train**2).sum(1)[None, :] - 2.0 * x_query @ x_train.T
    # encodings live in [0, 1]; anything this small is the same point
    d = np.sqrt(np.where(d2 > 1e-12, d2, 0.0))
    if k < len(x_train):
        idx = np.argpartition(d, k - 1, axis=1)[:, :k]
    else:
        idx = np.broadcast_to(np.arange(k), d.shape)
    near_d = np.take_along_axis(d, idx, axis=1)
    with np.errstate(divide="ignore"):
        w = 1.0 / near_d
    finite = np.isfinite(w).all(axis=1)
    out = np.empty(len(x_query))
    out[finite] = (w[finite] * y_train[idx[finite]]).sum(axis=1) / w[finite].sum(axis=1)
    exact = d[~finite] == 0
    out[~finite] = (exact * y_train).sum(axis=1) / exact.sum(axis=1)
    return out


def penalized_targets(history: Sequence[TrialRecord]) -> np.ndarray:
    """Objectives with each failure replaced by ``min success - penalty unit``.

    The unit is 10% of the observed objective range, or 1.0 when there is no
    spread yet (no success, or a single distinct value).
    """
    ok = [r.objective for r in history if not r.failed]
    if ok:
        spread = max(ok) - min(ok)
        unit = 0.1 * spread if spread > 0 else 1.0
        floor = min(ok) - unit
    else:
        floor = -1.0
    return np.array([floor if r.failed else r.objective for r in history], dtype=float)


# -- sampling ----------------------------------------------------------------

def _config_from_indices(space: SearchSpace, idx) -> SearchConfig:
    return SearchConfig(*(space.domain(n)[i] for n, i in zip(HYPERPARAMETERS, idx)))


def _random_config(space: SearchSpace, rng: np.random.Generator) -> SearchConfig:
    return _config_from_indices(
        space, [int(rng.integers(len(space.domain(n)))) for n in HYPERPARAMETERS]
    )


def latin_hypercube(space: SearchSpace, n: int, rng: np.random.Generator) -> list:
    """``n`` distinct configs stratified along every hyperparameter."""
    columns = []
    for name in HYPERPARAMETERS:
        size = len(space.domain(name))
        strata = (rng.permutation(n) + rng.random(n)) / n
        columns.append(np.minimum((strata * size).astype(int), size - 1))
    out, seen = [], set()
    for row in zip(*columns):
        cfg = _config_from_indices(space, row)
        tries = 0
        while cfg in seen and tries < 100:
            cfg = _random_config(space, rng)
            tries += 1
        if cfg not in seen:
            seen.add(cfg)
            out.append(cfg)
    return out


def _untried_candidates(space, rng, tried, count) -> list:
    remaining = space.size - len(tried)
    if remaining <= 0:
        return []
    if remaining <= 4 * count:
        # nearly exhausted: enumerate instead of drawing into collisions
        rest = [
            cfg for cfg in (SearchConfig(*combo) for combo in itertools.product(
                *(space.domain(n) for n in HYPERPARAMETERS)))
            if cfg not in tried
        ]
        if len(rest) <= count:
            return rest
        return [rest[i] for i in sorted(rng.choice(len(rest), size=count, replace=False))]
    sizes = [len(space.domain(n)) for n in HYPERPARAMETERS]
    out, seen = [], set(tried)
    while len(out) < count:
        for row in rng.integers(0, sizes, size=(count, len(sizes))):
            cfg = _config_from_indices(space, row)
            if cfg not in seen:
                seen.add(cfg)
                out.append(cfg)
                if len(out) == count:
                    break
    return out


# -- evaluators --------------------------------------------------------------

Evaluator = Callable[[SearchConfig], Union[TrialRecord, float, None]]


@dataclass
class PerfEvaluator:
    """Scores a search config with :func:`trainplan.perf.estimate` (TFLOPS/GPU).

    The remaining knobs (precision, checkpointing, flash attention) come from
    ``base``; ``gbs = mbs * gas * dp``.
    """

    model: ModelSpec
    cluster: ClusterSpec = field(default_factory=frontier_preset)
    base: ParallelConfig = field(default_factory=ParallelConfig)
    knobs: EfficiencyKnobs = field(default_factory=EfficiencyKnobs)

    def parallel_config(self, cfg: SearchConfig) -> tuple[ParallelConfig, ClusterSpec]:
        cluster = self.cluster.with_nodes(cfg.nodes)
        mp = cfg.tp * cfg.pp
        dp = max(1, cluster.world_size // mp)
        pcfg = replace(
            self.base,
            tp=cfg.tp,
            pp=cfg.pp,
            mbs=cfg.mbs,
            gbs=cfg.mbs * cfg.gas * dp,
            zero_stage=1 if cfg.zero1 else 0,
            dp=None,
        )
        return pcfg, cluster

    def violations(self, cfg: SearchConfig) -> list:
        pcfg, cluster = self.parallel_config(cfg)
        return errors(validate(self.model, pcfg.bind(cluster), cluster))

    def __call__(self, cfg: SearchConfig) -> TrialRecord:
        pcfg, cluster = self.parallel_config(cfg)
        est = estimate(self.model, pcfg, cluster, self.knobs)
        if est.oom:
            return TrialRecord(-1, cfg, None, FailureKind.OOM)
        return TrialRecord(-1, cfg, est.tflops_per_gpu)


def _run_one(evaluator: Evaluator, cfg: SearchConfig, trial: int) -> TrialRecord:
    start = time.perf_counter()
    try:
        result = evaluator(cfg)
    except TimeoutError:
        result = TrialRecord(trial, cfg, None, FailureKind.TIMEOUT)
    except MemoryError:
        result = TrialRecord(trial, cfg, None, FailureKind.OOM)
    elapsed = time.perf_counter() - start
    if isinstance(result, TrialRecord):
        return replace(result, trial=trial, config=cfg, wall_time=elapsed)
    if result is None:
        return TrialRecord(trial, cfg, None, FailureKind.OOM, elapsed)
    return TrialRecord(trial, cfg, float(result), FailureKind.NONE, elapsed)


def run_search(
    space: SearchSpace,
    budget: int,
    evaluator: Evaluator,
    seed: int = 0,
    *,
    validator: Optional[Callable[[SearchConfig], list]] = None,
    workers: int = 1,
) -> SearchResult:
    """Maximise ``evaluator`` over ``space`` within ``budget`` trials.

    ``validator`` returns the hard violations of a config (defaults to
    ``evaluator.violations`` when present); invalid configs are recorded as
    INVALID without being evaluated. With ``workers > 1`` proposals are
    evaluated concurrently and folded in arrival order, which gives up
    reproducibility.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    if validator is None:
        validator = getattr(evaluator, "violations", None)
    rng = np.random.default_rng(seed)
    scale = _Scaler(space)
    history: list = []
    tried: set = set()
    seed_batch = latin_hypercube(space, min(budget, PHASE1_MAX, space.size), rng)

    def propose(count: int) -> list:
        out = []
        while seed_batch and len(out) < count:
            cfg = seed_batch.pop(0)
            if cfg not in tried:
                out.append(cfg)
        if len(out) >= count or not history:
            return out
        pool = _untried_candidates(space, rng, tried | set(out), CANDIDATES)
        if not pool:
            return out
        pred = knn_predict(scale(history_configs()), penalized_targets(history), scale(pool))
        order = np.argsort(-pred, kind="stable")
        out.extend(pool[i] for i in order[: count - len(out)])
        return out

    def history_configs():
        return [r.config for r in history]

    def record(rec: TrialRecord):
        history.append(rec)
        log.debug("trial %d %s -> %s", rec.trial, rec.config, rec.objective or rec.failure_kind.value)

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        while len(history) < budget and len(tried) < space.size:
            batch = propose(min(workers, budget - len(history)))
            if not batch:
                break
            runnable = []
            for cfg in batch:
                tried.add(cfg)
                if validator is not None and validator(cfg):
                    record(TrialRecord(len(history), cfg, None, FailureKind.INVALID))
                else:
                    runnable.append(cfg)
            if pool is None:
                for cfg in runnable:
                    record(_run_one(evaluator, cfg, len(history)))
            else:
                futures = {pool.submit(evaluator, cfg): cfg for cfg in runnable}
                pending = set(futures)
                while pending:
                    finished, pending = wait(pending, return_when=FIRST_COMPLETED)
                    for fut in finished:
                        cfg = futures[fut]
                        record(_run_one(lambda _c, f=fut: f.result(), cfg, len(history)))
    finally:
        if pool is not None:
            pool.shutdown()

    ok = [r for r in history if not r.failed]
    best = max(ok, key=lambda r: (r.objective, -r.trial)) if ok else None
    diagnostic = ""
    if best is None:
        diagnostic = f"no successful configuration in {len(history)} trials"
    sens = {}
    if len(ok) >= 8:
        sens = sensitivity(history, seed=seed, space=space)
    return SearchResult(best=best, history=history, sensitivity=sens, diagnostic=diagnostic)


def sensitivity(
    history: Sequence[TrialRecord],
    seed: int = 0,
    *,
    space: Optional[SearchSpace] = None,
    permutations: int = PERMUTATIONS,
) -> dict:
    """Permutation importance of each hyperparameter under the k-NN surrogate.

    For every column, the surrogate is re-queried with that column shuffled;
    the score is the mean absolute change in prediction, normalised so the
    scores sum to one (uniform when nothing moves).
    """
    ok = [r for r in history if not r.failed]
    if len(ok) < 8:
        raise ValueError(f"insufficient history: {len(ok)} successful trials, need 8")
    if space is None:
        space = SearchSpace(**{
            h: tuple(sorted({getattr(r.config, h) for r in ok})) for h in HYPERPARAMETERS
        })
    x = _Scaler(space)([r.config for r in ok])
    y = np.array([r.objective for r in ok], dtype=float)
    base = knn_predict(x, y, x)
    rng = np.random.default_rng(seed)
    raw = {}
    for j, name in enumerate(HYPERPARAMETERS):
        total = 0.0
        for _ in range(permutations):
            xp = x.copy()
            xp[:, j] = x[rng.permutation(len(x)), j]
            total += np.abs(knn_predict(x, y, xp) - base).mean()
        raw[name] = float(total / permutations)
    norm = sum(raw.values())
    if norm <= 0:
        return {name: 1.0 / len(raw) for name in raw}
    return {name: value / norm for name, value in raw.items()}
