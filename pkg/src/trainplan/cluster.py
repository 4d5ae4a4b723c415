"""Cluster inventory and interconnect cost model.

Three bandwidth tiers are modeled: two dies on the same card, dies on
different cards of the same node, and GPUs on different nodes. All bandwidths
are one-way, in bytes/s. Collectives use a ring model whose bandwidth is the
slowest link between ring neighbours.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, Sequence

GiB = 1024**3


@dataclass(frozen=True)
class ClusterSpec:
    num_nodes: int = 1
    gpus_per_node: int = 8
    mem_per_gpu: int = 64 * GiB
    peak_flops_per_gpu: float = 191.5e12
    bw_same_card: float = 200e9
    bw_intra_node: float = 100e9
    bw_inter_node: float = 25e9
    link_latency_intra: float = 1e-6
    link_latency_inter: float = 5e-6
    hbm_bandwidth: float = 1.6e12
    gpus_per_card: int = 2

    def __post_init__(self):
        if self.num_nodes < 1 or self.gpus_per_node < 1 or self.gpus_per_card < 1:
            raise ValueError("node, GPU and card counts must be >= 1")
        if self.mem_per_gpu <= 0 or self.peak_flops_per_gpu <= 0 or self.hbm_bandwidth <= 0:
            raise ValueError("memory, peak FLOP rate and HBM bandwidth must be positive")
        if not (self.bw_same_card >= self.bw_intra_node >= self.bw_inter_node > 0):
            raise ValueError(
                "bandwidth tiers must satisfy same_card >= intra_node >= inter_node > 0"
            )
        if self.link_latency_intra < 0 or self.link_latency_inter < 0:
            raise ValueError("latencies must be non-negative")

    @property
    def world_size(self) -> int:
        return self.num_nodes * self.gpus_per_node

    def gpu(self, rank: int) -> "GpuId":
        if not 0 <= rank < self.world_size:
            raise ValueError(f"rank {rank} outside cluster of {self.world_size} GPUs")
        return GpuId(rank // self.gpus_per_node, rank % self.gpus_per_node)

    def rank(self, gpu: "GpuId") -> int:
        self.check(gpu)
        return gpu.node_index * self.gpus_per_node + gpu.local_index

    def check(self, gpu: "GpuId") -> None:
        if not (0 <= gpu.node_index < self.num_nodes and 0 <= gpu.local_index < self.gpus_per_node):
            raise ValueError(f"{gpu} is outside the cluster bounds")

    def with_nodes(self, num_nodes: int) -> "ClusterSpec":
        return ClusterSpec(**{**asdict(self), "num_nodes": num_nodes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterSpec":
        return cls(**data)


def frontier_preset(num_nodes: int = 1) -> ClusterSpec:
    """Frontier: 8 GCDs per node, 64 GiB HBM and 191.5 TFLOPS fp16 each.

    Four 50+50 GB/s links join the two dies of a card (200 GB/s one way),
    cross-card links run at half that, and nodes talk at 25 GB/s one way.
    """
    return ClusterSpec(num_nodes=num_nodes)


CLUSTER_PRESETS = {"frontier": frontier_preset}


@dataclass(frozen=True, order=True)
class GpuId:
    node_index: int
    local_index: int


class GroupKind(str, Enum):
    TP = "TP"
    PP = "PP"
    DP = "DP"


@dataclass(frozen=True)
class ProcessGroup:
    members: tuple
    kind: GroupKind = GroupKind.DP

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ValueError("process group must be non-empty")
        if len(set(self.members)) != len(self.members):
            raise ValueError("process group members must be distinct")

    def __len__(self):
        return len(self.members)

    @classmethod
    def from_ranks(cls, cluster: ClusterSpec, ranks: Iterable[int], kind=GroupKind.DP):
        return cls(tuple(cluster.gpu(r) for r in ranks), GroupKind(kind))


def _same_card(spec: ClusterSpec, a: GpuId, b: GpuId) -> bool:
    return a.local_index // spec.gpus_per_card == b.local_index // spec.gpus_per_card


def pair_bandwidth(spec: ClusterSpec, a: GpuId, b: GpuId) -> float:
    spec.check(a)
    spec.check(b)
    if a == b:
        raise ValueError(f"bandwidth from {a} to itself is undefined")
    if a.node_index != b.node_index:
        return spec.bw_inter_node
    if _same_card(spec, a, b):
        return spec.bw_same_card
    return spec.bw_intra_node


def pair_latency(spec: ClusterSpec, a: GpuId, b: GpuId) -> float:
    if a.node_index != b.node_index:
        return spec.link_latency_inter
    return spec.link_latency_intra


def _ring_links(members: Sequence[GpuId]):
    n = len(members)
    return [(members[i], members[(i + 1) % n]) for i in range(n)]


def ring_bottleneck(spec: ClusterSpec, group: ProcessGroup) -> tuple[float, float]:
    """(min link bandwidth, max link latency) over neighbouring ring members."""
    links = _ring_links(group.members)
    bw = min(pair_bandwidth(spec, a, b) for a, b in links)
    lat = max(pair_latency(spec, a, b) for a, b in links)
    return bw, lat


def _ring_phase(spec: ClusterSpec, group: ProcessGroup, volume: float, phases: int) -> float:
    if volume < 0:
        raise ValueError(f"volume must be >= 0, got {volume}")
    n = len(group)
    if n == 1:
        return 0.0
    bw, lat = ring_bottleneck(spec, group)
    return phases * ((n - 1) / n * volume / bw + (n - 1) * lat)


def allreduce_time(spec: ClusterSpec, group: ProcessGroup, volume: float) -> float:
    return _ring_phase(spec, group, volume, 2)


def allgather_time(spec: ClusterSpec, group: ProcessGroup, volume: float) -> float:
    return _ring_phase(spec, group, volume, 1)


def reduce_scatter_time(spec: ClusterSpec, group: ProcessGroup, volume: float) -> float:
    return _ring_phase(spec, group, volume, 1)


def p2p_time(spec: ClusterSpec, a: GpuId, b: GpuId, volume: float) -> float:
    if volume < 0:
        raise ValueError(f"volume must be >= 0, got {volume}")
    if a == b:
        return 0.0
    return volume / pair_bandwidth(spec, a, b) + pair_latency(spec, a, b)


def bandwidth_matrix(spec: ClusterSpec) -> list[list[float]]:
    """World-size square matrix of pair bandwidths; the diagonal is 0."""
    gpus = [spec.gpu(r) for r in range(spec.world_size)]
    return [[0.0 if a == b else pair_bandwidth(spec, a, b) for b in gpus] for a in gpus]


@dataclass(frozen=True)
class Placement:
    """Rank layout of a tp x pp x dp job.

    ``order`` lists the axes from fastest-varying to slowest, Megatron style:
    the default ``("tp", "dp", "pp")`` keeps TP groups on consecutive ranks.
    """

    tp: int
    pp: int
    dp: int
    order: tuple = field(default=("tp", "dp", "pp"))

    def __post_init__(self):
        if sorted(self.order) != ["dp", "pp", "tp"]:
            raise ValueError(f"order must be a permutation of tp/dp/pp, got {self.order}")

    def rank(self, tp: int, pp: int, dp: int) -> int:
        index = {"tp": tp, "pp": pp, "dp": dp}
        size = {"tp": self.tp, "pp": self.pp, "dp": self.dp}
        rank, stride = 0, 1
        for axis in self.order:
            rank += index[axis] * stride
            stride *= size[axis]
        return rank

    def tp_group(self, pp: int = 0, dp: int = 0) -> list[int]:
        return [self.rank(t, pp, dp) for t in range(self.tp)]

    def dp_group(self, tp: int = 0, pp: int = 0) -> list[int]:
        return [self.rank(tp, pp, d) for d in range(self.dp)]

    def pp_group(self, tp: int = 0, dp: int = 0) -> list[int]:
        return [self.rank(tp, p, dp) for p in range(self.pp)]
