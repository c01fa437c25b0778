"""Two-stage core-selection search and the exhaustive oracle.

Stage 1 finds the fastest plan by greedily adding cores big-to-small until the
marginal speedup dies out. Stage 2 grows a small candidate tree around that
plan, measures every candidate, discards those that fall more than epsilon
below the stage-1 speed, and returns the one minimizing a blend of measured
energy and the analytic power estimate times elapsed time. The exhaustive
search measures the whole space instead and is the ground-truth oracle for
optimality-rate experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from coresel.heuristic import HeuristicParams, MeasurementSample, power_heuristic
from coresel.simdevice import SimulatedDevice
from coresel.topology import (
    CoreSelection,
    CoreType,
    CpuTopology,
    SelectionMode,
    enumerate_selections,
)


@dataclass(frozen=True)
class SearchConfig:
    epsilon: float = 0.08
    tokens_per_measurement: int = 50
    repeats: int = 50
    stage1_min_speedup: float = 0.02
    include_efficient: bool = False
    max_tree_depth: int = 2
    aggregation: str = "mean"

    def __post_init__(self) -> None:
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.tokens_per_measurement < 1:
            raise ValueError("tokens_per_measurement must be >= 1")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.stage1_min_speedup < 0:
            raise ValueError("stage1_min_speedup must be >= 0")
        if self.max_tree_depth < 0:
            raise ValueError("max_tree_depth must be >= 0")
        if self.aggregation not in ("mean", "median"):
            raise ValueError(f"aggregation must be mean or median, got {self.aggregation!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown search fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "tokens_per_measurement": self.tokens_per_measurement,
            "repeats": self.repeats,
            "stage1_min_speedup": self.stage1_min_speedup,
            "include_efficient": self.include_efficient,
            "max_tree_depth": self.max_tree_depth,
            "aggregation": self.aggregation,
        }


class MeasurementProvider(Protocol):
    """What the search needs from a device: topology and repeated measurement."""

    @property
    def topology(self) -> CpuTopology: ...

    def measure_batch(
        self, selection: CoreSelection, n_tokens: int, repeats: int
    ) -> list[MeasurementSample]: ...


@dataclass
class DeviceProvider:
    """Binds a simulated device to one RNG stream; optionally records a trace.

    The trace gets one record per individual measurement, in execution order,
    which is exactly what the CLI exports as JSON lines.
    """

    device: SimulatedDevice
    stream: np.random.Generator
    trace: list[dict] | None = None
    measurements_taken: int = field(default=0, init=False)

    @property
    def topology(self) -> CpuTopology:
        return self.device.topology

    def measure_batch(
        self, selection: CoreSelection, n_tokens: int, repeats: int
    ) -> list[MeasurementSample]:
        samples = self.device.measure_batch(selection, n_tokens, repeats, self.stream)
        self.measurements_taken += repeats
        if self.trace is not None:
            for i, s in enumerate(samples):
                self.trace.append(
                    {
                        "selection": selection.to_json(),
                        "repeat_index": i,
                        "speed_tps": s.speed_tps,
                        "energy_mj_per_tok": s.energy_mj_per_tok,
                        "elapsed_s": s.elapsed_s,
                    }
                )
        return samples


def aggregate_samples(samples: list[MeasurementSample], how: str = "mean") -> MeasurementSample:
    """Fieldwise mean (or median) of repeated runs of one selection."""
    op = np.mean if how == "mean" else np.median
    return MeasurementSample(
        speed_tps=float(op([s.speed_tps for s in samples])),
        elapsed_s=float(op([s.elapsed_s for s in samples])),
        energy_mj_per_tok=float(op([s.energy_mj_per_tok for s in samples])),
        avg_power_w=float(op([s.avg_power_w for s in samples])),
    )


# --- stage 1 ------------------------------------------------------------------


@dataclass(frozen=True)
class StageOneResult:
    selection: CoreSelection
    mean_speed_tps: float
    visited: tuple[CoreSelection, ...]
    rejected: CoreSelection | None
    measurement_count: int


def _stage1_start(topology: CpuTopology) -> CoreSelection:
    for i, cluster in enumerate(topology.clusters):
        if cluster.core_type is not CoreType.EFFICIENT:
            counts = [0] * len(topology.clusters)
            counts[i] = 1
            return CoreSelection.of_counts(counts)
    raise ValueError("no prime or performance cluster to start from")


def _stage1_next(topology: CpuTopology, incumbent: CoreSelection) -> CoreSelection | None:
    """Add one core to the biggest non-efficient cluster with spare cores."""
    counts = list(incumbent.counts)  # type: ignore[arg-type]
    for i, cluster in enumerate(topology.clusters):
        if cluster.core_type is CoreType.EFFICIENT:
            continue
        if counts[i] < cluster.core_count:
            counts[i] += 1
            return CoreSelection.of_counts(counts)
    return None


def find_fastest(provider: MeasurementProvider, config: SearchConfig) -> StageOneResult:
    """Greedy fastest-plan search; returns the incumbent when speedups die out.

    `visited` holds the accepted incumbents in order; a measured-but-rejected
    final candidate is reported separately.
    """
    topology = provider.topology
    thread_mode = topology.selection_mode is SelectionMode.THREAD_COUNT
    incumbent = CoreSelection.of_threads(1) if thread_mode else _stage1_start(topology)
    agg = aggregate_samples(
        provider.measure_batch(incumbent, config.tokens_per_measurement, config.repeats),
        config.aggregation,
    )
    visited = [incumbent]
    speed = agg.speed_tps
    measured = 1
    rejected = None
    while True:
        if thread_mode:
            nxt = (
                CoreSelection.of_threads(incumbent.threads + 1)  # type: ignore[arg-type]
                if incumbent.threads < topology.total_cores  # type: ignore[operator]
                else None
            )
        else:
            nxt = _stage1_next(topology, incumbent)
        if nxt is None:
            break
        agg = aggregate_samples(
            provider.measure_batch(nxt, config.tokens_per_measurement, config.repeats),
            config.aggregation,
        )
        measured += 1
        if agg.speed_tps >= speed * (1.0 + config.stage1_min_speedup):
            incumbent = nxt
            speed = agg.speed_tps
            visited.append(nxt)
        else:
            rejected = nxt
            break
    return StageOneResult(
        selection=incumbent,
        mean_speed_tps=speed,
        visited=tuple(visited),
        rejected=rejected,
        measurement_count=measured * config.repeats,
    )


# --- candidate tree -----------------------------------------------------------

TAG_ROOT = "root"
TAG_DROP_ONE = "drop_one"
TAG_DROP_TWO = "drop_two"
TAG_SHIFT_CORE = "shift_core"
TAG_MERGE_CLUSTER = "merge_cluster"
TAG_REDUCE_THREAD = "reduce_thread"


@dataclass(frozen=True)
class TreeNode:
    selection: CoreSelection
    depth: int
    parent: int
    tag: str


@dataclass(frozen=True)
class CandidateTree:
    nodes: tuple[TreeNode, ...]

    @property
    def root(self) -> CoreSelection:
        return self.nodes[0].selection

    def selections(self) -> list[CoreSelection]:
        return [n.selection for n in self.nodes]

    def __len__(self) -> int:
        return len(self.nodes)


def _cluster_allowed(topology: CpuTopology, index: int, include_efficient: bool) -> bool:
    return include_efficient or topology.clusters[index].core_type is not CoreType.EFFICIENT


def _drop_one(counts: tuple[int, ...]) -> tuple[int, ...] | None:
    """Remove one core from the smallest-capacity (highest-index) selected cluster."""
    if sum(counts) <= 1:
        return None
    out = list(counts)
    for i in range(len(out) - 1, -1, -1):
        if out[i] > 0:
            out[i] -= 1
            return tuple(out)
    return None


def _shift_core(
    topology: CpuTopology, counts: tuple[int, ...], include_efficient: bool
) -> tuple[int, ...] | None:
    """Biggest selected cluster gives one core to the next selected cluster.

    The target only gains the core if it has spare capacity; a full target
    still costs the source its core (the move saturates). No selected target,
    no transformation.
    """
    source = next(i for i, n in enumerate(counts) if n > 0)
    target = None
    for j in range(source + 1, len(counts)):
        if counts[j] > 0 and _cluster_allowed(topology, j, include_efficient):
            target = j
            break
    if target is None:
        return None
    out = list(counts)
    out[source] -= 1
    if out[target] < topology.clusters[target].core_count:
        out[target] += 1
    if sum(out) == 0:
        return None
    return tuple(out)


def _merge_cluster(
    topology: CpuTopology, counts: tuple[int, ...], include_efficient: bool
) -> list[tuple[int, ...]]:
    """Each non-biggest selected cluster may relocate wholesale into the
    biggest unselected smaller cluster (capped at its core count)."""
    results = []
    biggest_selected = next(i for i, n in enumerate(counts) if n > 0)
    for source, n in enumerate(counts):
        if n == 0 or source == biggest_selected:
            continue
        target = None
        for j in range(source + 1, len(counts)):
            if counts[j] == 0 and _cluster_allowed(topology, j, include_efficient):
                target = j
                break
        if target is None:
            continue
        out = list(counts)
        out[source] = 0
        out[target] = min(n, topology.clusters[target].core_count)
        results.append(tuple(out))
    return results


def grow_candidate_tree(
    root: CoreSelection, topology: CpuTopology, config: SearchConfig
) -> CandidateTree:
    """Grow the bounded-depth candidate tree around the stage-1 plan.

    Depth-1 children may drop the one or two smallest selected cores (root
    only); at any depth a core may shift from the biggest selected cluster to
    the next selected one, or a whole non-biggest selected cluster may merge
    into the biggest unselected smaller cluster. Thread-mode trees just reduce
    the thread count once per level. Duplicates are pruned globally; the root
    itself is always a candidate.
    """
    root.validate(topology)
    nodes = [TreeNode(root, 0, -1, TAG_ROOT)]
    seen = {root}
    cursor = 0
    while cursor < len(nodes):
        node = nodes[cursor]
        if node.depth >= config.max_tree_depth:
            cursor += 1
            continue
        children: list[tuple[CoreSelection, str]] = []
        if topology.selection_mode is SelectionMode.THREAD_COUNT:
            if node.selection.threads > 1:  # type: ignore[operator]
                children.append(
                    (CoreSelection.of_threads(node.selection.threads - 1), TAG_REDUCE_THREAD)  # type: ignore[arg-type]
                )
        else:
            counts = node.selection.counts
            assert counts is not None
            if node.depth == 0:
                one = _drop_one(counts)
                if one is not None:
                    children.append((CoreSelection.of_counts(one), TAG_DROP_ONE))
                    two = _drop_one(one)
                    if two is not None:
                        children.append((CoreSelection.of_counts(two), TAG_DROP_TWO))
            shifted = _shift_core(topology, counts, config.include_efficient)
            if shifted is not None:
                children.append((CoreSelection.of_counts(shifted), TAG_SHIFT_CORE))
            for merged in _merge_cluster(topology, counts, config.include_efficient):
                children.append((CoreSelection.of_counts(merged), TAG_MERGE_CLUSTER))
        for selection, tag in children:
            if selection in seen:
                continue
            seen.add(selection)
            nodes.append(TreeNode(selection, node.depth + 1, cursor, tag))
        cursor += 1
    return CandidateTree(nodes=tuple(nodes))


# --- stage 2 and full searches --------------------------------------------------


@dataclass(frozen=True)
class CandidateRecord:
    selection: CoreSelection
    tag: str
    depth: int
    mean: MeasurementSample
    energy_j_per_run: float
    heuristic_time_product: float
    feasible: bool
    objective: float


@dataclass(frozen=True)
class SearchResult:
    chosen: CoreSelection
    stage1: CoreSelection
    stage1_speed_tps: float
    candidates: tuple[CandidateRecord, ...]
    measurement_count: int
    wall_budget_tokens: int
    fell_back_to_root: bool

    def record_for(self, selection: CoreSelection) -> CandidateRecord:
        for record in self.candidates:
            if record.selection == selection:
                return record
        raise KeyError(f"no record for {selection}")


def _normalized(value: float, reference: float) -> float:
    return value / reference if reference > 0 else value


def select_among_candidates(
    provider: MeasurementProvider,
    tree: CandidateTree,
    stage1_speed: float,
    params: HeuristicParams,
    config: SearchConfig,
) -> SearchResult:
    """Measure every tree candidate, drop those below the speed floor, and
    return the best remaining blend objective.

    Both objective terms are normalized by the root's values so the blend
    weight compares like with like. If noise empties the feasible set the
    root is returned (it defined the speed floor, so it is feasible up to
    noise by construction).
    """
    topology = provider.topology
    threshold = stage1_speed * (1.0 - config.epsilon)
    records: list[CandidateRecord] = []
    root_energy = root_ht = 1.0
    for index, node in enumerate(tree.nodes):
        agg = aggregate_samples(
            provider.measure_batch(node.selection, config.tokens_per_measurement, config.repeats),
            config.aggregation,
        )
        energy_j = agg.energy_j_per_run(config.tokens_per_measurement)
        ht = power_heuristic(node.selection, topology, params) * agg.elapsed_s
        if index == 0:
            root_energy, root_ht = energy_j, ht
        objective = (1.0 - params.alpha) * _normalized(energy_j, root_energy) + (
            params.alpha
        ) * _normalized(ht, root_ht)
        records.append(
            CandidateRecord(
                selection=node.selection,
                tag=node.tag,
                depth=node.depth,
                mean=agg,
                energy_j_per_run=energy_j,
                heuristic_time_product=ht,
                feasible=agg.speed_tps >= threshold,
                objective=objective,
            )
        )
    feasible = [(i, r) for i, r in enumerate(records) if r.feasible]
    fell_back = not feasible
    if fell_back:
        feasible = [(0, records[0])]
    _, best = min(feasible, key=lambda pair: (pair[1].objective, pair[0]))
    return SearchResult(
        chosen=best.selection,
        stage1=tree.root,
        stage1_speed_tps=stage1_speed,
        candidates=tuple(records),
        measurement_count=len(records) * config.repeats,
        wall_budget_tokens=len(records) * config.repeats * config.tokens_per_measurement,
        fell_back_to_root=fell_back,
    )


def two_stage_search(
    provider: MeasurementProvider,
    config: SearchConfig | None = None,
    params: HeuristicParams | None = None,
) -> SearchResult:
    """Stage 1 (fastest plan), tree growth, stage 2 (energy-blend ranking)."""
    config = config or SearchConfig()
    params = params or HeuristicParams.for_topology(provider.topology)
    stage1 = find_fastest(provider, config)
    tree = grow_candidate_tree(stage1.selection, provider.topology, config)
    result = select_among_candidates(provider, tree, stage1.mean_speed_tps, params, config)
    total = stage1.measurement_count + result.measurement_count
    return SearchResult(
        chosen=result.chosen,
        stage1=stage1.selection,
        stage1_speed_tps=stage1.mean_speed_tps,
        candidates=result.candidates,
        measurement_count=total,
        wall_budget_tokens=total * config.tokens_per_measurement,
        fell_back_to_root=result.fell_back_to_root,
    )


def exhaustive_search(
    provider: MeasurementProvider,
    config: SearchConfig | None = None,
    params: HeuristicParams | None = None,
    ranking: str = "measured_energy",
) -> SearchResult:
    """Measure the entire selection space; the optimality oracle.

    The speed floor is epsilon below the *maximum measured* speed. Ranking is
    by measured energy by default; "blended" ranks by the same normalized
    blend stage 2 uses, anchored at the fastest selection.
    """
    if ranking not in ("measured_energy", "blended"):
        raise ValueError(f"unknown ranking {ranking!r}")
    config = config or SearchConfig()
    params = params or HeuristicParams.for_topology(provider.topology)
    topology = provider.topology
    space = enumerate_selections(topology)
    measured: list[tuple[CoreSelection, MeasurementSample, float, float]] = []
    for selection in space:
        agg = aggregate_samples(
            provider.measure_batch(selection, config.tokens_per_measurement, config.repeats),
            config.aggregation,
        )
        energy_j = agg.energy_j_per_run(config.tokens_per_measurement)
        ht = power_heuristic(selection, topology, params) * agg.elapsed_s
        measured.append((selection, agg, energy_j, ht))

    fastest_index = max(range(len(measured)), key=lambda i: measured[i][1].speed_tps)
    max_speed = measured[fastest_index][1].speed_tps
    threshold = max_speed * (1.0 - config.epsilon)
    ref_energy = measured[fastest_index][2]
    ref_ht = measured[fastest_index][3]

    records: list[CandidateRecord] = []
    for selection, agg, energy_j, ht in measured:
        if ranking == "measured_energy":
            objective = energy_j
        else:
            objective = (1.0 - params.alpha) * _normalized(energy_j, ref_energy) + (
                params.alpha
            ) * _normalized(ht, ref_ht)
        records.append(
            CandidateRecord(
                selection=selection,
                tag="exhaustive",
                depth=0,
                mean=agg,
                energy_j_per_run=energy_j,
                heuristic_time_product=ht,
                feasible=agg.speed_tps >= threshold,
                objective=objective,
            )
        )
    feasible = [(i, r) for i, r in enumerate(records) if r.feasible]
    _, best = min(feasible, key=lambda pair: (pair[1].objective, pair[0]))
    total = len(records) * config.repeats
    return SearchResult(
        chosen=best.selection,
        stage1=records[fastest_index].selection,
        stage1_speed_tps=max_speed,
        candidates=tuple(records),
        measurement_count=total,
        wall_budget_tokens=total * config.tokens_per_measurement,
        fell_back_to_root=False,
    )


def summary_dict(
    result: SearchResult,
    *,
    mode: str,
    device_name: str,
    config: SearchConfig,
    params: HeuristicParams,
) -> dict:
    """JSON-ready run summary: chosen plan, stage-1 plan, candidate table."""
    return {
        "mode": mode,
        "device": device_name,
        "chosen": result.chosen.to_json(),
        "stage1": result.stage1.to_json(),
        "stage1_speed_tps": result.stage1_speed_tps,
        "fell_back_to_root": result.fell_back_to_root,
        "measurement_count": result.measurement_count,
        "wall_budget_tokens": result.wall_budget_tokens,
        "search_config": config.to_dict(),
        "heuristic": params.to_dict(),
        "candidates": [
            {
                "selection": r.selection.to_json(),
                "tag": r.tag,
                "depth": r.depth,
                "feasible": r.feasible,
                "objective": r.objective,
                "mean_speed_tps": r.mean.speed_tps,
                "mean_elapsed_s": r.mean.elapsed_s,
                "mean_energy_mj_per_tok": r.mean.energy_mj_per_tok,
                "mean_power_w": r.mean.avg_power_w,
                "energy_j_per_run": r.energy_j_per_run,
                "heuristic_time_product": r.heuristic_time_product,
            }
            for r in result.candidates
        ],
    }
