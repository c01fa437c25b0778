"""Reproducible experiments: search-vs-oracle ablation and ranking diagnostics.

Everything here is seeded through SimulatedDevice.make_stream with fixed key
namespaces, so a report regenerated from the same preset and seed is
bit-identical. The ablation answers "how often does the pruned search land on
the exhaustive optimum, with and without the analytic term"; the two
diagnostics check the statistical claims the blended objective rests on
(variance shrinks as (1-alpha)^2 when only the energy channel is noisy, and
blending does not hurt pairwise ordering when the analytic estimate agrees
with true energy).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from coresel.heuristic import HeuristicParams, power_heuristic
from coresel.search import (
    DeviceProvider,
    SearchConfig,
    exhaustive_search,
    find_fastest,
    grow_candidate_tree,
    two_stage_search,
)
from coresel.simdevice import SimulatedDevice, clipped_relative_noise, load_preset
from coresel.topology import CoreSelection, enumerate_selections

# Stream key namespaces, one per experiment, so adding trials to one never
# shifts the draws of another.
_KEY_ABLATION = 10
_KEY_VARIANCE = 20
_KEY_ORDERING = 30


def wilson_interval(successes: int, trials: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if trials <= 0:
        raise ValueError("trials must be > 0")
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def noiseless_oracle(device: SimulatedDevice, config: SearchConfig) -> CoreSelection:
    """Reference selection: exhaustive measured-energy optimum without noise."""
    quiet = device.without_noise()
    provider = DeviceProvider(quiet, quiet.make_stream(0))
    return exhaustive_search(provider, config).chosen


def optimality_rate(
    device: SimulatedDevice,
    config: SearchConfig,
    params: HeuristicParams,
    reference: CoreSelection,
    trials: int,
    arm: int,
) -> int:
    """Number of noisy searches (out of `trials`) that return `reference`.

    `arm` separates the RNG streams of ablation variants run on the same
    device so their draws never overlap.
    """
    hits = 0
    for t in range(trials):
        provider = DeviceProvider(device, device.make_stream(_KEY_ABLATION, t, arm))
        result = two_stage_search(provider, config, params)
        hits += result.chosen == reference
    return hits


@dataclass(frozen=True)
class DeviceAblation:
    """One ablation row: search-space sizes, budgets, and optimality rates."""

    device: str
    reference: str
    exhaustive_space: int
    candidate_space: int
    exhaustive_measurements: int
    search_measurements: int
    rate_with_heuristic: float
    rate_without_heuristic: float
    ci95_with: tuple[float, float]
    ci95_without: tuple[float, float]

    @property
    def space_ratio(self) -> float:
        return self.exhaustive_space / self.candidate_space


@dataclass(frozen=True)
class AblationReport:
    rows: tuple[DeviceAblation, ...]
    trials: int
    seed: int

    def row_for(self, device: str) -> DeviceAblation:
        for row in self.rows:
            if row.device == device:
                return row
        raise KeyError(f"no ablation row for {device!r}")

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "seed": self.seed,
            "rows": [asdict(row) | {"space_ratio": row.space_ratio} for row in self.rows],
        }


def ablate_device(
    device: SimulatedDevice, name: str, config: SearchConfig, trials: int
) -> DeviceAblation:
    """Ablation row for one device: rates at alpha=0.5 versus alpha=0.

    The reference optimum comes from the noiseless exhaustive oracle, not from
    preset metadata, so the row is meaningful for custom descriptors too. The
    candidate space is the stage-2 tree of the noiseless stage-1 plan; budgets
    count ranking-phase measurements (space x repeats).
    """
    reference = noiseless_oracle(device, config)
    quiet = device.without_noise()
    stage1 = find_fastest(DeviceProvider(quiet, quiet.make_stream(0)), config)
    tree = grow_candidate_tree(stage1.selection, device.topology, config)
    space = len(enumerate_selections(device.topology))

    params_with = HeuristicParams.for_topology(device.topology, alpha=0.5)
    params_without = HeuristicParams.for_topology(device.topology, alpha=0.0)
    hits_with = optimality_rate(device, config, params_with, reference, trials, arm=0)
    hits_without = optimality_rate(device, config, params_without, reference, trials, arm=1)

    return DeviceAblation(
        device=name,
        reference=str(reference),
        exhaustive_space=space,
        candidate_space=len(tree),
        exhaustive_measurements=space * config.repeats,
        search_measurements=len(tree) * config.repeats,
        rate_with_heuristic=hits_with / trials,
        rate_without_heuristic=hits_without / trials,
        ci95_with=wilson_interval(hits_with, trials),
        ci95_without=wilson_interval(hits_without, trials),
    )


def run_ablation(
    preset_names: list[str],
    trials: int = 200,
    seed: int = 0,
    config: SearchConfig | None = None,
    data_dir: str | None = None,
    noise: dict | None = None,
) -> AblationReport:
    config = config or SearchConfig()
    rows = []
    for name in preset_names:
        device = load_preset(name, rng_seed=seed, data_dir=data_dir)
        if noise:
            device = replace(device, **noise)
        rows.append(ablate_device(device, name, config, trials))
    return AblationReport(rows=tuple(rows), trials=trials, seed=seed)


def ablation_csv(report: AblationReport) -> str:
    header = (
        "device,reference,exhaustive_space,candidate_space,space_ratio,"
        "exhaustive_measurements,search_measurements,"
        "rate_with_heuristic,ci95_with_lo,ci95_with_hi,"
        "rate_without_heuristic,ci95_without_lo,ci95_without_hi"
    )
    lines = [header]
    for r in report.rows:
        lines.append(
            f"{r.device},{r.reference},{r.exhaustive_space},{r.candidate_space},"
            f"{r.space_ratio:.4f},{r.exhaustive_measurements},{r.search_measurements},"
            f"{r.rate_with_heuristic:.4f},{r.ci95_with[0]:.4f},{r.ci95_with[1]:.4f},"
            f"{r.rate_without_heuristic:.4f},{r.ci95_without[0]:.4f},{r.ci95_without[1]:.4f}"
        )
    return "\n".join(lines) + "\n"


def ablation_markdown(report: AblationReport) -> str:
    lines = [
        f"Optimality-rate ablation, {report.trials} noisy trials per device, seed {report.seed}.",
        "",
        "| device | reference | space | candidates | ratio | rate (blend) | rate (energy only) |",
        "|---|---|---:|---:|---:|---:|---:|",
    ]
    for r in report.rows:
        lines.append(
            f"| {r.device} | {r.reference} | {r.exhaustive_space} | {r.candidate_space} "
            f"| {r.space_ratio:.1f} | {r.rate_with_heuristic:.3f} "
            f"| {r.rate_without_heuristic:.3f} |"
        )
    return "\n".join(lines) + "\n"


# --- ranking diagnostics --------------------------------------------------------


@dataclass(frozen=True)
class VariancePoint:
    alpha: float
    empirical_ratio: float
    predicted_ratio: float


@dataclass(frozen=True)
class VarianceReport:
    """Empirical objective-variance ratios against the (1-alpha)^2 prediction.

    The time channel is held at its noiseless value while the energy channel
    carries the device's multiplicative noise; alpha then only rescales the
    noisy term, so the ratio to the alpha=0 variance must track (1-alpha)^2,
    hitting exactly 1 and 0 at the endpoints.
    """

    selection: str
    sigma: float
    trials: int
    points: tuple[VariancePoint, ...]

    def point_for(self, alpha: float) -> VariancePoint:
        for p in self.points:
            if p.alpha == alpha:
                return p
        raise KeyError(f"no variance point for alpha={alpha}")

    def to_dict(self) -> dict:
        return {
            "selection": self.selection,
            "sigma": self.sigma,
            "trials": self.trials,
            "points": [asdict(p) for p in self.points],
        }


def verify_variance_reduction(
    device: SimulatedDevice,
    alphas: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0),
    trials: int = 10_000,
    selection: CoreSelection | None = None,
    config: SearchConfig | None = None,
) -> VarianceReport:
    """Sample the blended objective of one plan and compare variance ratios.

    One shared energy-noise vector feeds every alpha (that is what a paired
    ablation on a real device would do: same runs, different ranking), so the
    endpoint claims are exact rather than approximate.
    """
    config = config or SearchConfig()
    if 0.0 not in alphas:
        raise ValueError("alphas must include 0.0, the ratio baseline")
    if selection is None:
        quiet = device.without_noise()
        selection = find_fastest(DeviceProvider(quiet, quiet.make_stream(0)), config).selection

    stream = device.make_stream(_KEY_VARIANCE)
    eta = clipped_relative_noise(stream, device.noise_rel_sigma, trials)

    params = HeuristicParams.for_topology(device.topology, alpha=0.5)
    tokens = config.tokens_per_measurement
    elapsed_true = tokens / device.true_speed(selection)
    energy_true = device.true_power(selection) * elapsed_true
    ht_true = power_heuristic(selection, device.topology, params) * elapsed_true

    energy_hat = (energy_true * (1.0 + eta)) / energy_true
    ht_hat = ht_true / ht_true  # noiseless time channel: constant 1.0

    base_var = float(np.var(energy_hat))
    points = []
    for alpha in alphas:
        objective = (1.0 - alpha) * energy_hat + alpha * ht_hat
        ratio = float(np.var(objective) / base_var)
        points.append(VariancePoint(alpha=alpha, empirical_ratio=ratio, predicted_ratio=(1.0 - alpha) ** 2))
    return VarianceReport(
        selection=str(selection),
        sigma=device.noise_rel_sigma,
        trials=trials,
        points=tuple(points),
    )


@dataclass(frozen=True)
class OrderingReport:
    """Pairwise ordering accuracy of the blended objective versus raw energy.

    Scored pairs satisfy the alignment premise: the analytic-estimate-times-
    time product orders the two plans the same way their true energies do.
    Misaligned and exactly tied pairs are excluded and counted. The paired
    z score tests blend > raw at the usual one-sided 95% level.
    """

    alpha: float
    sigma: float
    pairs_scored: int
    pairs_excluded_misaligned: int
    pairs_excluded_tied: int
    accuracy_blended: float
    accuracy_raw: float
    blend_only_correct: int
    raw_only_correct: int
    z_paired: float
    significant_95: bool

    def to_dict(self) -> dict:
        return asdict(self)


def verify_ordering_accuracy(
    device: SimulatedDevice,
    pairs: int = 5_000,
    alpha: float = 0.5,
    config: SearchConfig | None = None,
) -> OrderingReport:
    """Score `pairs` noisy pairwise comparisons against true energy order.

    Each comparison draws one noisy measurement per plan (independent time and
    energy channels, quantization included) and asks both rankers which plan
    is better; ground truth is the noiseless energy order. Both rankers see
    the same draws, so the comparison is paired.
    """
    config = config or SearchConfig()
    topology = device.topology
    space = enumerate_selections(topology)
    if len(space) < 2:
        raise ValueError("need at least two selections to form pairs")
    params = HeuristicParams.for_topology(topology, alpha=alpha)
    tokens = config.tokens_per_measurement

    # Fixed normalization anchor: the true-fastest plan.
    fastest = max(space, key=device.true_speed)
    anchor_elapsed = tokens / device.true_speed(fastest)
    anchor_energy = device.true_power(fastest) * anchor_elapsed
    anchor_ht = power_heuristic(fastest, topology, params) * anchor_elapsed

    true_energy = {}
    true_ht = {}
    for sel in space:
        elapsed = tokens / device.true_speed(sel)
        true_energy[sel] = device.true_power(sel) * elapsed
        true_ht[sel] = power_heuristic(sel, topology, params) * elapsed

    stream = device.make_stream(_KEY_ORDERING)
    scored = misaligned = tied = 0
    blend_correct = raw_correct = blend_only = raw_only = 0
    attempts = 0
    max_attempts = pairs * 10
    while scored < pairs and attempts < max_attempts:
        attempts += 1
        i, j = stream.integers(0, len(space), 2)
        if i == j:
            continue
        a, b = space[int(i)], space[int(j)]
        e_gap = true_energy[a] - true_energy[b]
        ht_gap = true_ht[a] - true_ht[b]
        if e_gap == 0.0 or ht_gap == 0.0:
            tied += 1
            continue
        if (e_gap > 0) != (ht_gap > 0):
            misaligned += 1
            continue
        sample_a = device.measure(a, tokens, stream)
        sample_b = device.measure(b, tokens, stream)
        raw_a = sample_a.energy_j_per_run(tokens) / anchor_energy
        raw_b = sample_b.energy_j_per_run(tokens) / anchor_energy
        ht_a = power_heuristic(a, topology, params) * sample_a.elapsed_s / anchor_ht
        ht_b = power_heuristic(b, topology, params) * sample_b.elapsed_s / anchor_ht
        blend_a = (1.0 - alpha) * raw_a + alpha * ht_a
        blend_b = (1.0 - alpha) * raw_b + alpha * ht_b

        truth_a_better = e_gap < 0
        blend_ok = (blend_a < blend_b) == truth_a_better
        raw_ok = (raw_a < raw_b) == truth_a_better
        blend_correct += blend_ok
        raw_correct += raw_ok
        blend_only += blend_ok and not raw_ok
        raw_only += raw_ok and not blend_ok
        scored += 1
    if scored < pairs:
        raise RuntimeError(
            f"only {scored} of {pairs} pairs satisfied the alignment premise "
            f"after {attempts} draws; the space is too degenerate to score"
        )

    discordant = blend_only + raw_only
    z = (blend_only - raw_only) / math.sqrt(discordant) if discordant else 0.0
    return OrderingReport(
        alpha=alpha,
        sigma=device.noise_rel_sigma,
        pairs_scored=scored,
        pairs_excluded_misaligned=misaligned,
        pairs_excluded_tied=tied,
        accuracy_blended=blend_correct / scored,
        accuracy_raw=raw_correct / scored,
        blend_only_correct=blend_only,
        raw_only_correct=raw_only,
        z_paired=z,
        significant_95=z >= 1.645,
    )
