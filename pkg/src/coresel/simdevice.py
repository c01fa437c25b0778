"""Simulated heterogeneous-SoC device: governor, ground truth, measurement.

The device hides a power model and a saturating memory-bound speed model
behind the same measurement interface a real phone would offer. Measurements
are corrupted the way the real pipeline corrupts them: multiplicative noise on
time and energy, and an energy counter that only advances at fixed update
boundaries and is read on a coarser poll grid.

Everything is immutable; randomness comes from caller-provided streams, so
concurrent trials simply own separate streams.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from coresel.heuristic import MeasurementSample, packed_counts
from coresel.topology import (
    CoreSelection,
    CoreType,
    CpuTopology,
    SelectionMode,
    capacity_factor,
    parse_device_descriptor,
)

PRESET_DIR_ENV = "CORESEL_PRESET_DIR"


class PresetError(ValueError):
    """Raised for unknown preset names or malformed preset files."""


class GovernorKind(str, enum.Enum):
    # capacity_scaled mimics schedutil: every cluster runs at max_freq scaled
    # by the selection's capacity factor. pinned_max never downclocks.
    CAPACITY_SCALED = "capacity_scaled"
    PINNED_MAX = "pinned_max"


@dataclass(frozen=True)
class GroundTruthModel:
    """Hidden truth the search is trying to discover.

    kappa_* are watts per GHz^gamma per active core, one per core type;
    idle_fraction discounts unselected cores (the governor keeps their cluster
    clocked, so they still leak). Speed saturates toward mem_ceiling_tps as
    aggregate issue rate U grows past throughput_half.
    """

    static_power_w: float
    kappa_prime: float
    kappa_performance: float
    kappa_efficient: float
    gamma: float
    idle_fraction: float
    mem_ceiling_tps: float
    throughput_half: float
    ipc: tuple[float, ...]

    def __post_init__(self) -> None:
        positives = {
            "static_power_w": self.static_power_w,
            "kappa_prime": self.kappa_prime,
            "kappa_performance": self.kappa_performance,
            "kappa_efficient": self.kappa_efficient,
            "mem_ceiling_tps": self.mem_ceiling_tps,
            "throughput_half": self.throughput_half,
        }
        for name, value in positives.items():
            if not value > 0:
                raise ValueError(f"{name} must be > 0, got {value}")
        if not 2.0 <= self.gamma <= 3.0:
            raise ValueError(f"gamma must be in [2, 3], got {self.gamma}")
        if not 0 < self.idle_fraction <= 1:
            raise ValueError(f"idle_fraction must be in (0, 1], got {self.idle_fraction}")
        if not self.ipc or any(v <= 0 for v in self.ipc):
            raise ValueError("ipc must be a non-empty tuple of positive values")

    def kappa(self, core_type: CoreType) -> float:
        return {
            CoreType.PRIME: self.kappa_prime,
            CoreType.PERFORMANCE: self.kappa_performance,
            CoreType.EFFICIENT: self.kappa_efficient,
        }[core_type]


def clipped_relative_noise(
    stream: np.random.Generator, sigma: float, size: int | tuple[int, ...]
) -> np.ndarray:
    """Zero-mean multiplicative noise factors minus one, clipped at +-3 sigma.

    Clipping (rather than re-drawing) keeps the number of consumed stream
    values fixed, which is what makes batched and repeated sampling land on
    identical stream positions.
    """
    return np.clip(stream.standard_normal(size), -3.0, 3.0) * sigma


@dataclass(frozen=True)
class SimulatedDevice:
    topology: CpuTopology
    governor: GovernorKind
    truth: GroundTruthModel
    noise_rel_sigma: float = 0.05
    counter_update_s: float = 0.25
    poll_interval_s: float = 0.05
    rng_seed: int = 0
    calibration: dict | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.truth.ipc) != len(self.topology.clusters):
            raise ValueError(
                f"ipc has {len(self.truth.ipc)} entries for {len(self.topology.clusters)} clusters"
            )
        if self.noise_rel_sigma < 0:
            raise ValueError("noise_rel_sigma must be >= 0")
        if self.counter_update_s < 0 or self.poll_interval_s < 0:
            raise ValueError("counter/poll periods must be >= 0")
        if self.counter_update_s > 0 and not 0 < self.poll_interval_s <= self.counter_update_s:
            raise ValueError("poll_interval_s must be in (0, counter_update_s]")

    # -- deterministic models ------------------------------------------------

    def _counts(self, selection: CoreSelection) -> tuple[int, ...]:
        selection.validate(self.topology)
        if selection.is_affinity:
            return selection.counts  # type: ignore[return-value]
        return packed_counts(self.topology, selection.threads)  # type: ignore[arg-type]

    def cluster_frequency(self, selection: CoreSelection, cluster_index: int) -> float:
        """GHz the governor actually runs cluster_index at under this plan."""
        cluster = self.topology.clusters[cluster_index]
        if self.governor is GovernorKind.PINNED_MAX or not selection.is_affinity:
            return cluster.max_freq_ghz
        return cluster.max_freq_ghz * capacity_factor(selection, self.topology)

    def true_speed(self, selection: CoreSelection) -> float:
        """Noise-free decode speed (tokens/s): saturating in aggregate issue rate."""
        counts = self._counts(selection)
        u = 0.0
        for i, n in enumerate(counts):
            if n:
                u += n * self.truth.ipc[i] * self.cluster_frequency(selection, i)
        t = self.truth
        return t.mem_ceiling_tps * u / (u + t.throughput_half)

    def true_power(self, selection: CoreSelection) -> float:
        """Noise-free average power (W) including idle leakage of clocked cores."""
        counts = self._counts(selection)
        t = self.truth
        total = t.static_power_w
        for i, n in enumerate(counts):
            cluster = self.topology.clusters[i]
            f = self.cluster_frequency(selection, i)
            active_equiv = n + (cluster.core_count - n) * t.idle_fraction
            total += t.kappa(cluster.core_type) * active_equiv * f**t.gamma
        return total

    # -- measurement ---------------------------------------------------------

    def measure_batch(
        self,
        selection: CoreSelection,
        n_tokens: int,
        repeats: int,
        stream: np.random.Generator,
    ) -> list[MeasurementSample]:
        """`repeats` independent simulated profiling runs of one selection.

        Per run: elapsed time gets multiplicative noise; the energy counter
        integrates run power (with its own noise factor) but only ticks at
        counter_update_s boundaries and is read on the poll grid, so up to one
        update window of energy goes missing. Each run consumes exactly three
        stream draws (time noise, energy noise, start phase) in a fixed order.
        """
        if n_tokens < 1:
            raise ValueError("n_tokens must be >= 1")
        if repeats < 1:
            raise ValueError("repeats must be >= 1")
        speed_true = self.true_speed(selection)
        power_true = self.true_power(selection)

        noise = clipped_relative_noise(stream, self.noise_rel_sigma, (repeats, 2))
        phase = stream.uniform(0.0, 1.0, repeats)
        elapsed = n_tokens / speed_true * (1.0 + noise[:, 0])
        run_power = power_true * (1.0 + noise[:, 1])

        period = self.counter_update_s
        if period > 0:
            start = phase * period
            end = start + elapsed
            poll = self.poll_interval_s
            first_poll_after_end = np.ceil(end / poll) * poll
            last_tick = np.floor(first_poll_after_end / period) * period
            covered = np.clip(np.minimum(last_tick, end) - start, 0.0, None)
            reported_j = run_power * covered
        else:
            reported_j = run_power * elapsed

        samples = []
        for i in range(repeats):
            e = float(elapsed[i])
            j = float(reported_j[i])
            samples.append(
                MeasurementSample(
                    speed_tps=n_tokens / e,
                    elapsed_s=e,
                    energy_mj_per_tok=j / n_tokens * 1000.0,
                    avg_power_w=j / e,
                )
            )
        return samples

    def measure(
        self, selection: CoreSelection, n_tokens: int, stream: np.random.Generator
    ) -> MeasurementSample:
        """One simulated profiling run (a batch of one)."""
        return self.measure_batch(selection, n_tokens, 1, stream)[0]

    # -- streams and variants ------------------------------------------------

    def make_stream(self, *key: int) -> np.random.Generator:
        """Deterministic child stream of this device's seed; same key, same bits."""
        seq = np.random.SeedSequence(entropy=self.rng_seed, spawn_key=tuple(key))
        return np.random.Generator(np.random.PCG64(seq))

    def without_noise(self) -> "SimulatedDevice":
        """Copy with noise and counter quantization disabled."""
        return replace(self, noise_rel_sigma=0.0, counter_update_s=0.0)


# -- presets -------------------------------------------------------------------

PRESET_NAMES = (
    "mate40pro",
    "v30pro",
    "galaxya56",
    "meizu21",
    "xiaomi15pro",
    "iphone12",
    "iphone15",
)


def _bundled_preset_dir() -> Path:
    return Path(__file__).parent / "presets"


def _preset_dir(data_dir: str | Path | None) -> Path:
    if data_dir is not None:
        return Path(data_dir)
    env = os.environ.get(PRESET_DIR_ENV)
    if env:
        return Path(env)
    return _bundled_preset_dir()


def available_presets(data_dir: str | Path | None = None) -> list[str]:
    directory = _preset_dir(data_dir)
    if not directory.is_dir():
        return []
    return sorted(p.stem for p in directory.glob("*.json"))


def device_from_preset_dict(doc: dict, rng_seed: int = 0) -> SimulatedDevice:
    """Assemble a device from one preset document."""
    for section in ("governor", "ground_truth"):
        if section not in doc:
            raise PresetError(f"preset missing section {section!r}")
    topology = parse_device_descriptor(doc)
    try:
        governor = GovernorKind(doc["governor"])
    except ValueError:
        raise PresetError(f"unknown governor {doc['governor']!r}") from None
    gt = dict(doc["ground_truth"])
    kappa = gt.pop("kappa_w_per_ghz_pow", None)
    if not isinstance(kappa, dict):
        raise PresetError("ground_truth.kappa_w_per_ghz_pow must map core types to coefficients")
    try:
        truth = GroundTruthModel(
            static_power_w=float(gt["static_power_w"]),
            kappa_prime=float(kappa["prime"]),
            kappa_performance=float(kappa["performance"]),
            kappa_efficient=float(kappa["efficient"]),
            gamma=float(gt["gamma"]),
            idle_fraction=float(gt["idle_fraction"]),
            mem_ceiling_tps=float(gt["mem_ceiling_tps"]),
            throughput_half=float(gt["throughput_half"]),
            ipc=tuple(float(v) for v in gt["ipc"]),
        )
    except KeyError as exc:
        raise PresetError(f"ground_truth missing field {exc.args[0]!r}") from None
    except ValueError as exc:
        raise PresetError(f"invalid ground_truth: {exc}") from exc
    noise = doc.get("noise", {})
    try:
        return SimulatedDevice(
            topology=topology,
            governor=governor,
            truth=truth,
            noise_rel_sigma=float(noise.get("rel_sigma", 0.05)),
            counter_update_s=float(noise.get("counter_update_s", 0.25)),
            poll_interval_s=float(noise.get("poll_interval_s", 0.05)),
            rng_seed=rng_seed,
            calibration=doc.get("calibration"),
        )
    except ValueError as exc:
        raise PresetError(f"invalid preset: {exc}") from exc


def load_preset(
    name: str | Path, *, rng_seed: int = 0, data_dir: str | Path | None = None
) -> SimulatedDevice:
    """Load a bundled preset by name, or any preset JSON by path."""
    path = Path(name)
    if not (path.suffix == ".json" and path.is_file()):
        directory = _preset_dir(data_dir)
        path = directory / f"{name}.json"
        if not path.is_file():
            known = ", ".join(available_presets(data_dir)) or "(none found)"
            raise PresetError(f"unknown preset {name!r}; available: {known}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise PresetError(f"preset file {path} is not valid JSON: {exc}") from exc
    return device_from_preset_dict(doc, rng_seed=rng_seed)
