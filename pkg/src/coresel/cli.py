"""Command-line front end.

Seven subcommands: search, oracle, tree, ablate, theorems, presets, describe.
Values resolve as defaults < config file (--config) < flags, and every
file-writing run echoes its fully resolved configuration to config.json in the
output directory, so re-running from that echo reproduces the run bit for bit.
Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from coresel.experiments import (
    ablation_csv,
    ablation_markdown,
    run_ablation,
    verify_ordering_accuracy,
    verify_variance_reduction,
)
from coresel.heuristic import HeuristicParams
from coresel.search import (
    DeviceProvider,
    SearchConfig,
    exhaustive_search,
    grow_candidate_tree,
    summary_dict,
    two_stage_search,
)
from coresel.simdevice import (
    PRESET_DIR_ENV,
    PresetError,
    SimulatedDevice,
    available_presets,
    load_preset,
)
from coresel.topology import (
    DescriptorError,
    SnapshotError,
    parse_device_descriptor,
    parse_selection_text,
    parse_sysfs_snapshot,
    serialize_device_descriptor,
)


class ConfigError(ValueError):
    """Anything wrong with flags, config files, or referenced inputs."""


# config-section key -> SimulatedDevice field
_NOISE_FIELDS = {
    "rel_sigma": "noise_rel_sigma",
    "counter_update_s": "counter_update_s",
    "poll_interval_s": "poll_interval_s",
}


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; the documented mapping wants 1.
    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError(f"{message}\n{self.format_usage().rstrip()}")


def _dump_json(doc: dict, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    known = {"command", "device", "seed", "noise", "search", "heuristic", "output", "extras"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"config file {path}: unknown sections {sorted(unknown)}")
    return doc


def _fresh_seed() -> int:
    # No seed given anywhere: draw one from OS entropy, but record it.
    return int.from_bytes(os.urandom(8), "big") >> 1


def _section(doc: dict, name: str) -> dict:
    value = doc.get(name, {})
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return dict(value)


@dataclasses.dataclass
class ResolvedRun:
    command: str
    device_ref: str | None
    seed: int
    noise: dict
    search: SearchConfig
    heuristic_overrides: dict
    out_dir: Path | None
    fmt: str
    extras: dict

    def load_device(self) -> SimulatedDevice:
        if self.device_ref is None:
            raise ConfigError("no device given: pass --preset or a config with a device entry")
        device = load_preset(self.device_ref, rng_seed=self.seed)
        overrides = {
            _NOISE_FIELDS[k]: v for k, v in self.noise.items() if v is not None
        }
        if overrides:
            try:
                device = dataclasses.replace(device, **overrides)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad noise override: {exc}") from exc
        return device

    def heuristic_for(self, device: SimulatedDevice) -> HeuristicParams:
        try:
            return HeuristicParams.for_topology(device.topology, **self.heuristic_overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad heuristic config: {exc}") from exc

    def echo(self, device: SimulatedDevice | None, params: HeuristicParams | None) -> dict:
        noise = dict(self.noise)
        if device is not None:
            noise = {
                "rel_sigma": device.noise_rel_sigma,
                "counter_update_s": device.counter_update_s,
                "poll_interval_s": device.poll_interval_s,
            }
        doc = {
            "command": self.command,
            "device": self.device_ref,
            "seed": self.seed,
            "noise": noise,
            "search": self.search.to_dict(),
            "heuristic": params.to_dict() if params is not None else self.heuristic_overrides,
            "output": {
                "directory": str(self.out_dir) if self.out_dir else None,
                "format": self.fmt,
            },
        }
        if self.extras:
            doc["extras"] = self.extras
        return doc


def _resolve(args: argparse.Namespace, extras: dict) -> ResolvedRun:
    doc = _load_config_file(getattr(args, "config", None))

    device_ref = getattr(args, "preset", None) or doc.get("device")
    if device_ref is not None and not isinstance(device_ref, str):
        raise ConfigError("config field 'device' must be a preset name or file path")

    seed = getattr(args, "seed", None)
    if seed is None:
        seed = doc.get("seed")
    if seed is None:
        seed = _fresh_seed()
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    noise = _section(doc, "noise")
    for flag, key in (
        ("sigma", "rel_sigma"),
        ("counter_update", "counter_update_s"),
        ("poll_interval", "poll_interval_s"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            noise[key] = value
    bad = set(noise) - {"rel_sigma", "counter_update_s", "poll_interval_s"}
    if bad:
        raise ConfigError(f"unknown noise fields: {sorted(bad)}")

    search_doc = _section(doc, "search")
    for flag, key in (
        ("epsilon", "epsilon"),
        ("tokens", "tokens_per_measurement"),
        ("repeats", "repeats"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            search_doc[key] = value
    try:
        search = SearchConfig.from_dict(search_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad search config: {exc}") from exc

    heuristic = _section(doc, "heuristic")
    if getattr(args, "alpha", None) is not None:
        heuristic["alpha"] = args.alpha

    out_dir = getattr(args, "out", None)
    if out_dir is None:
        out_section = _section(doc, "output")
        out_dir = out_section.get("directory")
    fmt = getattr(args, "format", None) or _section(doc, "output").get("format") or "all"
    if fmt not in ("all", "json", "csv", "md"):
        raise ConfigError(f"format must be one of all/json/csv/md, got {fmt!r}")

    file_extras = _section(doc, "extras")
    merged_extras = {**file_extras, **{k: v for k, v in extras.items() if v is not None}}

    return ResolvedRun(
        command=args.command,
        device_ref=device_ref,
        seed=seed,
        noise=noise,
        search=search,
        heuristic_overrides=heuristic,
        out_dir=Path(out_dir) if out_dir else None,
        fmt=fmt,
        extras=merged_extras,
    )


def _require_out(run: ResolvedRun) -> Path:
    out = run.out_dir or Path("coresel-out")
    out.mkdir(parents=True, exist_ok=True)
    run.out_dir = out
    return out


def _write_trace(trace: list[dict], path: Path) -> None:
    lines = [json.dumps(record, sort_keys=True) for record in trace]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


# --- subcommand bodies ----------------------------------------------------------


def _cmd_search(run: ResolvedRun) -> int:
    out = _require_out(run)
    device = run.load_device()
    params = run.heuristic_for(device)
    _dump_json(run.echo(device, params), out / "config.json")

    trace: list[dict] = []
    provider = DeviceProvider(device, device.make_stream(0), trace=trace)
    if run.command == "search":
        result = two_stage_search(provider, run.search, params)
    else:
        result = exhaustive_search(provider, run.search, params, ranking=run.extras.get("ranking", "measured_energy"))
    _write_trace(trace, out / "trace.jsonl")
    summary = summary_dict(
        result,
        mode=run.command,
        device_name=run.device_ref or "?",
        config=run.search,
        params=params,
    )
    _dump_json(summary, out / "summary.json")
    print(
        f"{run.command}: device={run.device_ref} chosen={result.chosen} "
        f"stage1={result.stage1} measurements={result.measurement_count} -> {out}"
    )
    return 0


def _cmd_tree(run: ResolvedRun) -> int:
    out = _require_out(run)
    device = run.load_device()
    root_text = run.extras.get("root")
    if not root_text:
        raise ConfigError("tree needs --root (e.g. --root 1,2,0 or --root 2t)")
    try:
        root = parse_selection_text(str(root_text), device.topology)
    except ValueError as exc:
        raise ConfigError(f"bad --root: {exc}") from exc
    _dump_json(run.echo(device, None), out / "config.json")
    tree = grow_candidate_tree(root, device.topology, run.search)
    doc = {
        "device": run.device_ref,
        "root": tree.root.to_json(),
        "nodes": [
            {
                "selection": node.selection.to_json(),
                "depth": node.depth,
                "parent": node.parent,
                "tag": node.tag,
            }
            for node in tree.nodes
        ],
    }
    _dump_json(doc, out / "tree.json")
    for node in tree.nodes:
        print(f"{'  ' * node.depth}{node.selection}  [{node.tag}]")
    return 0


def _cmd_ablate(run: ResolvedRun) -> int:
    out = _require_out(run)
    names = run.extras.get("presets", "all")
    if isinstance(names, str):
        names = available_presets() if names == "all" else [n for n in names.split(",") if n]
    if not names:
        raise ConfigError("ablate: no presets selected")
    run.extras["presets"] = list(names)
    trials = int(run.extras.get("trials", 200))
    if trials < 1:
        raise ConfigError("ablate: --trials must be >= 1")
    run.extras["trials"] = trials
    device = None  # multi-device run; echo records overrides, not one device
    _dump_json(run.echo(device, None), out / "config.json")

    overrides = {
        _NOISE_FIELDS[k]: v for k, v in run.noise.items() if v is not None
    }
    report = run_ablation(
        list(names), trials=trials, seed=run.seed, config=run.search, noise=overrides
    )
    if run.fmt in ("all", "json"):
        _dump_json(report.to_dict(), out / "report.json")
    if run.fmt in ("all", "csv"):
        (out / "report.csv").write_text(ablation_csv(report))
    if run.fmt in ("all", "md"):
        (out / "report.md").write_text(ablation_markdown(report))
    for row in report.rows:
        print(
            f"{row.device}: space={row.exhaustive_space} candidates={row.candidate_space} "
            f"rate(blend)={row.rate_with_heuristic:.3f} rate(raw)={row.rate_without_heuristic:.3f}"
        )
    return 0


def _cmd_theorems(run: ResolvedRun) -> int:
    out = _require_out(run)
    device = run.load_device()
    trials = int(run.extras.get("trials", 10_000))
    pairs = int(run.extras.get("pairs", 5_000))
    if trials < 2 or pairs < 1:
        raise ConfigError("theorems: --trials must be >= 2 and --pairs >= 1")
    run.extras.update(trials=trials, pairs=pairs)
    _dump_json(run.echo(device, None), out / "config.json")

    variance = verify_variance_reduction(device, trials=trials, config=run.search)
    ordering = verify_ordering_accuracy(device, pairs=pairs, config=run.search)
    _dump_json(
        {"variance": variance.to_dict(), "ordering": ordering.to_dict()},
        out / "theorems.json",
    )
    mid = variance.point_for(0.5)
    print(
        f"variance ratio at alpha=0.5: {mid.empirical_ratio:.4f} (predicted {mid.predicted_ratio});"
        f" ordering: blend={ordering.accuracy_blended:.4f} raw={ordering.accuracy_raw:.4f}"
        f" z={ordering.z_paired:.2f}"
    )
    return 0


def _cmd_presets(_run: ResolvedRun) -> int:
    names = available_presets()
    if not names:
        print(f"no presets found (check {PRESET_DIR_ENV})", file=sys.stderr)
        return 0
    for name in names:
        print(name)
    return 0


def _cmd_describe(run: ResolvedRun) -> int:
    snapshot = run.extras.get("snapshot")
    descriptor = run.extras.get("descriptor")
    given = [x for x in (run.device_ref, snapshot, descriptor) if x]
    if len(given) != 1:
        raise ConfigError("describe needs exactly one of --preset, --descriptor, --snapshot")
    if snapshot:
        topology = parse_sysfs_snapshot(snapshot)
    elif descriptor:
        descriptor_path = Path(descriptor)
        if not descriptor_path.is_file():
            raise ConfigError(f"descriptor file not found: {descriptor}")
        topology = parse_device_descriptor(descriptor_path)
    else:
        topology = run.load_device().topology
    print(json.dumps(serialize_device_descriptor(topology), indent=2, sort_keys=True))
    return 0


_COMMANDS = {
    "search": _cmd_search,
    "oracle": _cmd_search,
    "tree": _cmd_tree,
    "ablate": _cmd_ablate,
    "theorems": _cmd_theorems,
    "presets": _cmd_presets,
    "describe": _cmd_describe,
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="coresel", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: _Parser, with_device: bool = True) -> None:
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--out", help="output directory (default coresel-out)")
        if with_device:
            p.add_argument("--preset", help="bundled preset name or preset JSON path")
            p.add_argument("--seed", type=int, help="RNG seed (drawn from entropy if omitted)")
            p.add_argument("--sigma", type=float, help="override relative noise sigma")
            p.add_argument("--counter-update", type=float, dest="counter_update",
                           help="override energy-counter update period (s); 0 disables")
            p.add_argument("--poll-interval", type=float, dest="poll_interval",
                           help="override counter poll interval (s)")
            p.add_argument("--epsilon", type=float, help="speed-floor fraction")
            p.add_argument("--tokens", type=int, help="tokens per measurement")
            p.add_argument("--repeats", type=int, help="repeats per candidate")
            p.add_argument("--alpha", type=float, help="blend weight of the analytic term")

    p = sub.add_parser("search", help="two-stage search on a device")
    common(p)
    p = sub.add_parser("oracle", help="exhaustive search on a device")
    common(p)
    p.add_argument("--ranking", choices=("measured_energy", "blended"))
    p = sub.add_parser("tree", help="print the candidate tree for a root plan")
    common(p)
    p.add_argument("--root", help="root selection, e.g. 1,2,0 or 2t")
    p = sub.add_parser("ablate", help="optimality-rate ablation over presets")
    common(p, with_device=False)
    p.add_argument("--presets", help="comma-separated preset names, or 'all'")
    p.add_argument("--seed", type=int, help="RNG seed (drawn from entropy if omitted)")
    p.add_argument("--sigma", type=float, help="override relative noise sigma")
    p.add_argument("--trials", type=int, help="noisy searches per preset (default 200)")
    p.add_argument("--format", choices=("all", "json", "csv", "md"))
    p = sub.add_parser("theorems", help="variance-reduction and ordering checks")
    common(p)
    p.add_argument("--trials", type=int, help="variance-check samples (default 10000)")
    p.add_argument("--pairs", type=int, help="ordering-check pairs (default 5000)")
    p = sub.add_parser("presets", help="list available device presets")
    p = sub.add_parser("describe", help="parse and print a device description")
    p.add_argument("--preset", help="bundled preset name or preset JSON path")
    p.add_argument("--descriptor", help="descriptor JSON file")
    p.add_argument("--snapshot", help="sysfs snapshot directory")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        extras = {
            key: getattr(args, key)
            for key in ("ranking", "root", "presets", "trials", "pairs", "snapshot", "descriptor")
            if hasattr(args, key)
        }
        run = _resolve(args, extras)
    except ConfigError as exc:
        print(f"coresel: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[run.command](run)
    except (ConfigError, PresetError, DescriptorError, SnapshotError) as exc:
        print(f"coresel: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the documented runtime-error exit
        print(f"coresel: runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
