"""Energy-aware CPU core selection with a simulated heterogeneous-SoC backend.

The package picks which CPU cores (or how many threads) should run a
memory-bound decoding workload so that energy per token is minimized while
speed stays within a configured fraction of the fastest plan. A two-stage
search does the picking; a deterministic simulated device stands in for real
hardware so every claim the search makes can be checked against an exhaustive
oracle.
"""

from coresel.topology import (
    Cluster,
    CoreSelection,
    CoreType,
    CpuTopology,
    DescriptorError,
    SnapshotError,
    capacity_factor,
    enumerate_selections,
    parse_device_descriptor,
    parse_sysfs_snapshot,
    serialize_device_descriptor,
)
from coresel.heuristic import (
    HeuristicParams,
    MeasurementSample,
    assigned_frequency,
    blended_energy,
    power_heuristic,
)
from coresel.simdevice import (
    GovernorKind,
    GroundTruthModel,
    PresetError,
    SimulatedDevice,
    available_presets,
    load_preset,
)
from coresel.search import (
    CandidateTree,
    SearchConfig,
    SearchResult,
    exhaustive_search,
    find_fastest,
    grow_candidate_tree,
    two_stage_search,
)

__version__ = "0.1.0"

__all__ = [
    "Cluster",
    "CoreSelection",
    "CoreType",
    "CpuTopology",
    "DescriptorError",
    "SnapshotError",
    "capacity_factor",
    "enumerate_selections",
    "parse_device_descriptor",
    "parse_sysfs_snapshot",
    "serialize_device_descriptor",
    "HeuristicParams",
    "MeasurementSample",
    "assigned_frequency",
    "blended_energy",
    "power_heuristic",
    "GovernorKind",
    "GroundTruthModel",
    "PresetError",
    "SimulatedDevice",
    "available_presets",
    "load_preset",
    "CandidateTree",
    "SearchConfig",
    "SearchResult",
    "exhaustive_search",
    "find_fastest",
    "grow_candidate_tree",
    "two_stage_search",
    "__version__",
]
