"""Analytic power estimate and the blended ranking objective.

The estimate scores a selection from topology data alone: per-core-type
weights on the squared assigned frequency, an idle discount for unselected
cores, and a static term. It is dimensionless and only has to preserve the
*ordering* of true power across candidate selections, which is what the blended
objective leans on when measurements are noisy.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any

from coresel.topology import (
    CoreSelection,
    CoreType,
    CpuTopology,
    SelectionMode,
    capacity_factor,
)


@dataclass(frozen=True)
class HeuristicParams:
    """Weights of the analytic power estimate plus the blend weight alpha."""

    a_efficient: float = 80.0
    a_performance: float = 160.0
    a_prime: float = 200.0
    b: float = 0.7
    static_power: float = 1000.0
    alpha: float = 0.5

    def __post_init__(self) -> None:
        if not (0 < self.a_efficient <= self.a_performance <= self.a_prime):
            raise ValueError(
                "core-type weights must satisfy 0 < a_efficient <= a_performance <= a_prime"
            )
        if not 0 < self.b <= 1:
            raise ValueError(f"idle factor b must be in (0, 1], got {self.b}")
        if self.static_power < 0:
            raise ValueError(f"static_power must be >= 0, got {self.static_power}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")

    def weight(self, core_type: CoreType) -> float:
        return {
            CoreType.EFFICIENT: self.a_efficient,
            CoreType.PERFORMANCE: self.a_performance,
            CoreType.PRIME: self.a_prime,
        }[core_type]

    @classmethod
    def for_topology(cls, topology: CpuTopology, **overrides: Any) -> "HeuristicParams":
        """Defaults appropriate to the device: thread-count devices rank by the
        estimate alone (alpha=1) because their searches never trust the energy
        counter."""
        params = cls(**overrides)
        if topology.selection_mode is SelectionMode.THREAD_COUNT and "alpha" not in overrides:
            params = replace(params, alpha=1.0)
        return params

    @classmethod
    def from_dict(cls, doc: dict) -> "HeuristicParams":
        known = {"a_efficient", "a_performance", "a_prime", "b", "static_power", "alpha"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown heuristic fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in doc.items()})

    def to_dict(self) -> dict:
        return {
            "a_efficient": self.a_efficient,
            "a_performance": self.a_performance,
            "a_prime": self.a_prime,
            "b": self.b,
            "static_power": self.static_power,
            "alpha": self.alpha,
        }


@dataclass(frozen=True)
class MeasurementSample:
    """One profiled decode run.

    energy_mj_per_tok is what the provider *reported*, i.e. it carries noise
    and counter quantization; identities between the fields hold only within
    the provider's stated bounds.
    """

    speed_tps: float
    elapsed_s: float
    energy_mj_per_tok: float
    avg_power_w: float

    def __post_init__(self) -> None:
        for name in ("speed_tps", "elapsed_s", "energy_mj_per_tok", "avg_power_w"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def energy_j_per_run(self, n_tokens: int) -> float:
        return self.energy_mj_per_tok * n_tokens / 1000.0


def packed_counts(topology: CpuTopology, threads: int) -> tuple[int, ...]:
    """Thread plans assumed packed onto the biggest cores first."""
    remaining = threads
    counts = []
    for cluster in topology.clusters:
        take = min(remaining, cluster.core_count)
        counts.append(take)
        remaining -= take
    if remaining:
        raise ValueError(f"{threads} threads exceed {topology.total_cores} cores")
    return tuple(counts)


def _effective_counts_and_factor(
    selection: CoreSelection, topology: CpuTopology
) -> tuple[tuple[int, ...], float]:
    if selection.is_affinity:
        return selection.counts, capacity_factor(selection, topology)  # type: ignore[return-value]
    # Thread mode: packed counts, no frequency scaling (these devices pin max).
    selection.validate(topology)
    return packed_counts(topology, selection.threads), 1.0  # type: ignore[arg-type]


def assigned_frequency(cluster_index: int, selection: CoreSelection, topology: CpuTopology) -> float:
    """Frequency (GHz) the capacity-scaling governor gives cluster_index.

    The factor of the *selection's biggest cluster* applies to every cluster,
    selected or idle.
    """
    if not 0 <= cluster_index < len(topology.clusters):
        raise ValueError(f"cluster index {cluster_index} out of range")
    _, s = _effective_counts_and_factor(selection, topology)
    return topology.clusters[cluster_index].max_freq_ghz * s


def power_heuristic(
    selection: CoreSelection, topology: CpuTopology, params: HeuristicParams | None = None
) -> float:
    """Dimensionless power estimate of a selection.

    h = sum_i a_i * (n_i + (C_i - n_i) * b) * (f_max_i * s)^2 + static_power,
    evaluated in GHz. Idle cores still contribute via the b discount because
    the governor keeps their cluster clocked.
    """
    params = params or HeuristicParams()
    counts, s = _effective_counts_and_factor(selection, topology)
    total = params.static_power
    for n, cluster in zip(counts, topology.clusters):
        f = cluster.max_freq_ghz * s
        weight = params.weight(cluster.core_type)
        total += weight * (n + (cluster.core_count - n) * params.b) * f * f
    return total


def blended_energy(
    sample: MeasurementSample,
    selection: CoreSelection,
    topology: CpuTopology,
    params: HeuristicParams,
    n_tokens: int,
) -> float:
    """Raw blend (1-alpha) * measured per-run energy + alpha * h * elapsed.

    Both terms are per-run quantities. The stage-2 ranking normalizes each
    term by its value at the tree root before blending so alpha weighs
    comparable numbers; this function is the unnormalized primitive.
    """
    energy_j = sample.energy_j_per_run(n_tokens)
    h = power_heuristic(selection, topology, params)
    return (1.0 - params.alpha) * energy_j + params.alpha * h * sample.elapsed_s
