"""Device topology model, descriptor/sysfs ingestion, and search-space enumeration.

A device is a list of core clusters ordered biggest-capacity first. A plan for
running the workload is a :class:`CoreSelection`: per-cluster core counts on
devices that support affinity, or a bare thread count on devices that don't.
"""

from __future__ import annotations

import enum
import itertools
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable


class DescriptorError(ValueError):
    """Raised when a device descriptor document is malformed."""


class SnapshotError(ValueError):
    """Raised when a sysfs snapshot directory is inconsistent."""


class CoreType(str, enum.Enum):
    PRIME = "prime"
    PERFORMANCE = "performance"
    EFFICIENT = "efficient"


class SelectionMode(str, enum.Enum):
    AFFINITY = "affinity"
    THREAD_COUNT = "thread_count"


@dataclass(frozen=True)
class Cluster:
    """One group of identical cores sharing a frequency domain."""

    core_count: int
    max_freq_ghz: float
    capacity: float
    core_type: CoreType

    def __post_init__(self) -> None:
        if self.core_count < 1:
            raise DescriptorError(f"cluster core_count must be >= 1, got {self.core_count}")
        if not self.max_freq_ghz > 0:
            raise DescriptorError(f"cluster max_freq_ghz must be > 0, got {self.max_freq_ghz}")
        if not self.capacity > 0:
            raise DescriptorError(f"cluster capacity must be > 0, got {self.capacity}")


@dataclass(frozen=True)
class CpuTopology:
    """Ordered clusters of one device; index 0 holds the biggest capacity."""

    device_name: str
    clusters: tuple[Cluster, ...]
    selection_mode: SelectionMode = SelectionMode.AFFINITY

    def __post_init__(self) -> None:
        if not self.clusters:
            raise DescriptorError("topology needs at least one cluster")
        caps = [c.capacity for c in self.clusters]
        if any(a < b for a, b in zip(caps, caps[1:])):
            raise DescriptorError("clusters must be ordered by non-increasing capacity")

    @property
    def total_cores(self) -> int:
        return sum(c.core_count for c in self.clusters)

    def non_efficient_indices(self) -> list[int]:
        return [i for i, c in enumerate(self.clusters) if c.core_type is not CoreType.EFFICIENT]


@dataclass(frozen=True)
class CoreSelection:
    """A run plan: per-cluster core counts, or a thread count.

    Exactly one of ``counts`` / ``threads`` is set. Cores within a cluster are
    interchangeable, so affinity plans are count vectors rather than core-ID
    sets.
    """

    counts: tuple[int, ...] | None = None
    threads: int | None = None

    def __post_init__(self) -> None:
        if (self.counts is None) == (self.threads is None):
            raise ValueError("a selection has either counts or threads, not both")
        if self.counts is not None:
            if any(n < 0 for n in self.counts):
                raise ValueError(f"negative core count in {self.counts}")
            if sum(self.counts) < 1:
                raise ValueError("a selection must keep at least one core")
        if self.threads is not None and self.threads < 1:
            raise ValueError(f"thread count must be >= 1, got {self.threads}")

    @classmethod
    def of_counts(cls, counts: Iterable[int]) -> "CoreSelection":
        return cls(counts=tuple(int(n) for n in counts))

    @classmethod
    def of_threads(cls, threads: int) -> "CoreSelection":
        return cls(threads=int(threads))

    @property
    def is_affinity(self) -> bool:
        return self.counts is not None

    def selected_cores(self) -> int:
        return sum(self.counts) if self.counts is not None else int(self.threads)  # type: ignore[arg-type]

    def validate(self, topology: CpuTopology) -> None:
        """Raise ValueError unless this selection fits the topology."""
        if self.counts is not None:
            if topology.selection_mode is not SelectionMode.AFFINITY:
                raise ValueError("count-vector selection on a thread-count device")
            if len(self.counts) != len(topology.clusters):
                raise ValueError(
                    f"selection has {len(self.counts)} clusters, topology has {len(topology.clusters)}"
                )
            for i, (n, cluster) in enumerate(zip(self.counts, topology.clusters)):
                if n > cluster.core_count:
                    raise ValueError(f"cluster {i}: selected {n} of {cluster.core_count} cores")
        else:
            if topology.selection_mode is not SelectionMode.THREAD_COUNT:
                raise ValueError("thread-count selection on an affinity device")
            if self.threads > topology.total_cores:  # type: ignore[operator]
                raise ValueError(f"{self.threads} threads on {topology.total_cores} cores")

    def to_json(self) -> Any:
        return list(self.counts) if self.counts is not None else self.threads

    @classmethod
    def from_json(cls, value: Any) -> "CoreSelection":
        if isinstance(value, int):
            return cls.of_threads(value)
        if isinstance(value, (list, tuple)):
            return cls.of_counts(value)
        raise ValueError(f"not a selection: {value!r}")

    def __str__(self) -> str:
        if self.counts is not None:
            return "(" + ",".join(str(n) for n in self.counts) + ")"
        return f"{self.threads}t"


def parse_selection_text(text: str, topology: CpuTopology) -> CoreSelection:
    """Parse CLI-style selection text: ``1,2,0`` (affinity) or ``2`` (threads)."""
    cleaned = text.strip().strip("()")
    if not re.fullmatch(r"\d+(\s*,\s*\d+)*", cleaned):
        raise ValueError(f"cannot parse selection {text!r}")
    parts = [int(p) for p in re.split(r"\s*,\s*", cleaned)]
    if topology.selection_mode is SelectionMode.THREAD_COUNT:
        if len(parts) != 1:
            raise ValueError("thread-count devices take a single integer selection")
        selection = CoreSelection.of_threads(parts[0])
    else:
        selection = CoreSelection.of_counts(parts)
    selection.validate(topology)
    return selection


# --- descriptor ingestion ---------------------------------------------------

_CORE_TYPES = {t.value: t for t in CoreType}
_MODES = {m.value: m for m in SelectionMode}


def _default_capacities(freqs: list[float]) -> list[float]:
    top = max(freqs)
    return [f / top for f in freqs]


def parse_device_descriptor(source: str | Path | dict) -> CpuTopology:
    """Build a topology from a descriptor document (JSON text, path, or dict).

    Clusters may appear in any order; output is re-sorted biggest capacity
    first. Missing ``capacity`` fields default to frequency-proportional
    values (f_max / biggest f_max).
    """
    if isinstance(source, Path):
        doc = json.loads(source.read_text())
    elif isinstance(source, str):
        try:
            doc = json.loads(source)
        except json.JSONDecodeError as exc:
            raise DescriptorError(f"descriptor is not valid JSON: {exc}") from exc
    else:
        doc = source
    if not isinstance(doc, dict):
        raise DescriptorError("descriptor must be a JSON object")

    name = doc.get("device_name")
    if not isinstance(name, str) or not name:
        raise DescriptorError("field device_name: must be a non-empty string")

    mode_text = doc.get("selection_mode", "affinity")
    if mode_text not in _MODES:
        raise DescriptorError(f"field selection_mode: unknown value {mode_text!r}")
    mode = _MODES[mode_text]

    raw_clusters = doc.get("clusters")
    if not isinstance(raw_clusters, list) or not raw_clusters:
        raise DescriptorError("field clusters: must be a non-empty list")

    cores: list[int] = []
    freqs: list[float] = []
    caps: list[float | None] = []
    types: list[CoreType] = []
    for i, entry in enumerate(raw_clusters):
        if not isinstance(entry, dict):
            raise DescriptorError(f"field clusters[{i}]: must be an object")
        try:
            cores.append(int(entry["cores"]))
        except (KeyError, TypeError, ValueError):
            raise DescriptorError(f"field clusters[{i}].cores: missing or not an integer") from None
        try:
            freqs.append(float(entry["max_freq_ghz"]))
        except (KeyError, TypeError, ValueError):
            raise DescriptorError(f"field clusters[{i}].max_freq_ghz: missing or not a number") from None
        cap = entry.get("capacity")
        if cap is not None:
            try:
                cap = float(cap)
            except (TypeError, ValueError):
                raise DescriptorError(f"field clusters[{i}].capacity: not a number") from None
        caps.append(cap)
        type_text = entry.get("core_type")
        if type_text not in _CORE_TYPES:
            raise DescriptorError(f"field clusters[{i}].core_type: unknown value {type_text!r}")
        types.append(_CORE_TYPES[type_text])

    defaults = _default_capacities(freqs)
    filled = [c if c is not None else d for c, d in zip(caps, defaults)]
    try:
        clusters = [
            Cluster(core_count=n, max_freq_ghz=f, capacity=c, core_type=t)
            for n, f, c, t in zip(cores, freqs, filled, types)
        ]
    except DescriptorError as exc:
        raise DescriptorError(f"field clusters: {exc}") from exc
    clusters.sort(key=lambda c: (c.capacity, c.max_freq_ghz), reverse=True)
    return CpuTopology(device_name=name, clusters=tuple(clusters), selection_mode=mode)


def serialize_device_descriptor(topology: CpuTopology) -> dict:
    """Inverse of parse_device_descriptor; capacities written explicitly."""
    return {
        "device_name": topology.device_name,
        "selection_mode": topology.selection_mode.value,
        "clusters": [
            {
                "cores": c.core_count,
                "max_freq_ghz": c.max_freq_ghz,
                "capacity": c.capacity,
                "core_type": c.core_type.value,
            }
            for c in topology.clusters
        ],
    }


# --- sysfs snapshot ingestion -----------------------------------------------


def _read_snapshot_file(path: Path, kind: str) -> str:
    if not path.is_file():
        raise SnapshotError(f"missing {kind} file: {path}")
    return path.read_text().strip()


def parse_sysfs_snapshot(root: str | Path, device_name: str | None = None) -> CpuTopology:
    """Build a topology from a captured /sys/devices/system/cpu-style tree.

    Expects cpu<N>/cpufreq/cpuinfo_max_freq (kHz), cpu<N>/cpu_capacity and
    cpu<N>/cpufreq/related_cpus. Cores listing the same related_cpus set form
    one cluster. Core types are assigned by capacity rank: biggest cluster is
    prime, smallest efficient, anything between performance; a 2-cluster
    device maps to prime + efficient. If any cpu_capacity file is absent,
    every cluster falls back to a frequency-proportional capacity.
    """
    root = Path(root)
    if not root.is_dir():
        raise SnapshotError(f"snapshot root is not a directory: {root}")
    cpu_dirs = sorted(
        (p for p in root.iterdir() if p.is_dir() and re.fullmatch(r"cpu\d+", p.name)),
        key=lambda p: int(p.name[3:]),
    )
    if not cpu_dirs:
        raise SnapshotError(f"no cpu<N> directories under {root}")
    cpu_ids = [int(p.name[3:]) for p in cpu_dirs]
    known = set(cpu_ids)

    freq_khz: dict[int, int] = {}
    capacity: dict[int, float] = {}
    group_of: dict[int, tuple[int, ...]] = {}
    all_have_capacity = True
    for cpu, path in zip(cpu_ids, cpu_dirs):
        raw_freq = _read_snapshot_file(path / "cpufreq" / "cpuinfo_max_freq", "cpuinfo_max_freq")
        try:
            freq_khz[cpu] = int(raw_freq)
        except ValueError:
            raise SnapshotError(f"cpu{cpu}: cpuinfo_max_freq is not an integer: {raw_freq!r}") from None
        raw_group = _read_snapshot_file(path / "cpufreq" / "related_cpus", "related_cpus")
        try:
            members = tuple(sorted(int(tok) for tok in raw_group.split()))
        except ValueError:
            raise SnapshotError(f"cpu{cpu}: related_cpus is not a cpu-id list: {raw_group!r}") from None
        if not members:
            raise SnapshotError(f"cpu{cpu}: related_cpus is empty")
        unknown = [m for m in members if m not in known]
        if unknown:
            raise SnapshotError(f"cpu{cpu}: related_cpus names absent cpus {unknown}")
        if cpu not in members:
            raise SnapshotError(f"cpu{cpu}: related_cpus does not include the cpu itself")
        group_of[cpu] = members
        cap_file = path / "cpu_capacity"
        if cap_file.is_file():
            raw_cap = cap_file.read_text().strip()
            try:
                capacity[cpu] = float(raw_cap)
            except ValueError:
                raise SnapshotError(f"cpu{cpu}: cpu_capacity is not a number: {raw_cap!r}") from None
        else:
            all_have_capacity = False

    groups = sorted(set(group_of.values()))
    seen: set[int] = set()
    for members in groups:
        for m in members:
            if group_of[m] != members:
                raise SnapshotError(f"cpu{m}: related_cpus groups disagree")
            if m in seen:
                raise SnapshotError(f"cpu{m}: appears in two clusters")
            seen.add(m)
    if seen != known:
        raise SnapshotError(f"cpus {sorted(known - seen)} belong to no cluster")

    cluster_freq = [freq_khz[members[0]] / 1e6 for members in groups]
    for members, f in zip(groups, cluster_freq):
        mismatched = [m for m in members if freq_khz[m] / 1e6 != f]
        if mismatched:
            raise SnapshotError(f"cluster {members}: cpus disagree on cpuinfo_max_freq")
    if all_have_capacity:
        cluster_cap = [capacity[members[0]] for members in groups]
    else:
        cluster_cap = _default_capacities(cluster_freq)

    order = sorted(range(len(groups)), key=lambda i: (cluster_cap[i], cluster_freq[i]), reverse=True)
    n_clusters = len(groups)
    clusters = []
    for rank, i in enumerate(order):
        if n_clusters == 1 or rank == 0:
            core_type = CoreType.PRIME
        elif rank == n_clusters - 1:
            core_type = CoreType.EFFICIENT
        else:
            core_type = CoreType.PERFORMANCE
        clusters.append(
            Cluster(
                core_count=len(groups[i]),
                max_freq_ghz=cluster_freq[i],
                capacity=cluster_cap[i],
                core_type=core_type,
            )
        )
    name = device_name if device_name is not None else root.name
    return CpuTopology(device_name=name, clusters=tuple(clusters), selection_mode=SelectionMode.AFFINITY)


# --- search space -----------------------------------------------------------


def enumerate_selections(topology: CpuTopology) -> list[CoreSelection]:
    """Every valid selection, in a fixed deterministic order.

    Affinity mode: all count vectors except all-zero (prod(C_i + 1) - 1 of
    them). Thread mode: 1..total cores.
    """
    if topology.selection_mode is SelectionMode.THREAD_COUNT:
        return [CoreSelection.of_threads(k) for k in range(1, topology.total_cores + 1)]
    ranges = [range(c.core_count + 1) for c in topology.clusters]
    return [
        CoreSelection.of_counts(combo)
        for combo in itertools.product(*ranges)
        if any(combo)
    ]


def capacity_factor(selection: CoreSelection, topology: CpuTopology) -> float:
    """Capacity of the biggest selected cluster over the biggest capacity.

    Drives governor frequency scaling: plans that leave the big cores idle run
    every cluster at a proportionally lower clock.
    """
    selection.validate(topology)
    if not selection.is_affinity:
        raise ValueError("capacity_factor applies to affinity selections")
    assert selection.counts is not None
    for count, cluster in zip(selection.counts, topology.clusters):
        if count > 0:
            return cluster.capacity / topology.clusters[0].capacity
    raise ValueError("empty selection has no capacity factor")
