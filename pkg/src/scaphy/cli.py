"""Command-line front end.

Subcommands mirror the pipeline stages: ``build`` validates a scenario and
emits the dependency graph, ``impact`` derives the impact profile, ``learn``
builds the per-phase call constraints, ``detect`` replays signal/trace
captures into alerts, ``report`` flattens alerts into plot-ready CSV, ``sim``
runs the scan-cycle simulator, and ``pdig`` exports the graph.

Exit codes: 0 clean, 1 usage or scenario error, 2 detection ran and emitted
alerts.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, bundled_scenarios, detect, errors, impact, phases
from . import pipeline, procmap, scenario_path, sim
from .config import RunConfig, config_from_toml

log = logging.getLogger("scaphy")


def _load_config(args: argparse.Namespace) -> RunConfig:
    if getattr(args, "config", None):
        config = config_from_toml(Path(args.config).read_text(encoding="utf-8"))
    else:
        config = RunConfig()
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace

        config = replace(config, seed=args.seed)
    if getattr(args, "denominator_mode", None):
        from dataclasses import replace

        config = replace(config, denominator_mode=args.denominator_mode)
    return config.validate()


def _scenario_dir(args: argparse.Namespace) -> Path:
    raw = args.scenario
    path = Path(raw)
    if path.is_dir():
        return path
    if raw in bundled_scenarios():
        return scenario_path(raw)
    raise FileNotFoundError(f"scenario directory not found: {raw}")


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(getattr(args, "out", None) or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_meta(out: Path, config: RunConfig, extra: dict) -> None:
    meta = {"version": __version__, "config_hash": config.digest(), **extra}
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2))
    (out / "config_echo.toml").write_text(config.to_toml())


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_build(args: argparse.Namespace) -> int:
    config = _load_config(args)
    scenario = pipeline.load_scenario(_scenario_dir(args))
    model = pipeline.build_model(scenario)
    out = _out_dir(args)
    (out / "pdig.json").write_text(procmap.pdig_to_json(model.pdig))
    (out / "processes.json").write_text(procmap.processes_to_json(model.processes))
    _write_meta(out, config, {"command": "build", "scenario": str(scenario.root)})

    print(f"scenario {scenario.root.name}: {len(scenario.elements)} elements, "
          f"{scenario.stl.wire_count} wires, {model.pdig.node_count()} graph nodes")
    print(f"{'process':<14} {'terminal':<16} {'sensor':<16} {'deps':>4} {'nodes':>5}")
    for proc in model.processes:
        print(
            f"{proc.id:<14} {proc.terminal_tag:<16} {proc.sensor_tag:<16} "
            f"{len(proc.dep):>4} {1 + len(proc.dep):>5}"
        )
    return 0


def cmd_impact(args: argparse.Namespace) -> int:
    config = _load_config(args)
    scenario = pipeline.load_scenario(_scenario_dir(args))
    model = pipeline.build_model(scenario)
    profile, annotated = pipeline.derive_profile(model, config)
    out = _out_dir(args)
    (out / "profile.json").write_text(impact.profile_to_json(profile))
    (out / "pdig.json").write_text(procmap.pdig_to_json(annotated))
    (out / "processes.json").write_text(procmap.processes_to_json(model.processes))
    _write_meta(out, config, {"command": "impact", "scenario": str(scenario.root)})

    print(f"annotated graph nodes: {annotated.node_count()} "
          f"(pruned {sorted(profile.pruned) or 'none'})")
    for proc in model.processes:
        maxima = [profile.ic_max[(proc.id, t)] for t in proc.dep
                  if (proc.id, t) in profile.ic_max]
        if not maxima:
            continue
        avg = sum(maxima) / len(maxima)
        lo, hi = profile.bounds[proc.id]
        print(f"{proc.id}: avg/max impact {avg:.2f}/{max(maxima):.2f}, "
              f"outcome bounds [{lo:.4g}, {hi:.4g}]")
    return 0


def cmd_learn(args: argparse.Namespace) -> int:
    config = _load_config(args)
    scenario_dir = _scenario_dir(args)
    constraints = pipeline.learn_constraints(scenario_dir)
    out = _out_dir(args)
    (out / "physics.json").write_text(phases.constraints_to_json(constraints))
    _write_meta(out, config, {"command": "learn", "scenario": str(scenario_dir)})
    for phase in phases.Phase:
        names = constraints.names.get(phase, set())
        print(f"{phase.value}: {len(names)} allowed calls")
    return 0


def cmd_detect(args: argparse.Namespace) -> int:
    config = _load_config(args)
    scenario_dir = _scenario_dir(args)
    out = _out_dir(args)
    bundle = pipeline.ensure_bundle(scenario_dir, config, out, need_constraints=True)

    signals: list[detect.ControlSignal] = []
    if args.signals:
        signals = detect.parse_signals(Path(args.signals).read_text(encoding="utf-8"))

    violations: list[phases.Violation] = []
    if args.trace:
        events = phases.parse_trace(Path(args.trace).read_text(encoding="utf-8"))
        windows = phases.segment_phases(events)
        if bundle.constraints is None:
            raise errors.EmptyTraining(
                "trace checking requires learned constraints; add scenario traces/ or run learn"
            )
        violations = phases.check_physics(
            events, windows, bundle.constraints, bypass_delta_ms=config.bypass_delta_ms
        )
        violations += phases.check_driver_stack(events)

    result = detect.run_detection(
        bundle.detector_model, config, signals=signals, violations=violations
    )

    alerts_path = out / "alerts.jsonl"
    alerts_path.write_text("\n".join(detect.alert_to_json(a) for a in result.alerts) + "\n"
                           if result.alerts else "")
    (out / "incidents.json").write_text(json.dumps(
        [
            {
                "id": inc.id,
                "severity": inc.severity.value,
                "processes": list(inc.processes),
                "t_start": inc.t_start,
                "t_end": inc.t_end,
                "alerts": [json.loads(detect.alert_to_json(a)) for a in inc.alerts],
            }
            for inc in result.incidents
        ],
        indent=2,
    ))
    _write_meta(out, config, {
        "command": "detect",
        "scenario": str(scenario_dir),
        "alerts": len(result.alerts),
        "incidents": len(result.incidents),
    })

    if args.format == "table":
        print(detect.render_table(result, bundle.detector_model))
    else:
        for alert in result.alerts:
            print(detect.alert_to_json(alert))
    print(f"{len(result.alerts)} alerts in {len(result.incidents)} incidents "
          f"-> {alerts_path}", file=sys.stderr)
    return 2 if result.alerts else 0


def cmd_report(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = _out_dir(args)
    alerts_path = out / "alerts.jsonl"
    if not alerts_path.is_file():
        raise FileNotFoundError(f"no alerts at {alerts_path}; run detect first")
    rows = [json.loads(line) for line in alerts_path.read_text().splitlines() if line.strip()]

    scores = ["t,kind,process,score,severity"]
    for r in rows:
        scores.append(
            f"{r['t']},{r['kind']},{r['process'] or ''},"
            f"{'' if r['score'] is None else r['score']},{r['severity']}"
        )
    (out / "scores.csv").write_text("\n".join(scores) + "\n")

    outcome_rows = ["t,process,outcome"]
    if args.signals:
        signals = detect.parse_signals(Path(args.signals).read_text(encoding="utf-8"))
        scenario = pipeline.load_scenario(_scenario_dir(args))
        model = pipeline.build_model(scenario)
        sensors = {p.sensor_tag: p.id for p in model.processes}
        for sig in signals:
            if sig.tag in sensors and not config.is_write_code(sig.protocol, sig.function_code):
                outcome_rows.append(f"{sig.t},{sensors[sig.tag]},{sig.value}")
    (out / "outcomes.csv").write_text("\n".join(outcome_rows) + "\n")
    _write_meta(out, config, {"command": "report", "rows": len(rows)})
    print(f"wrote {out / 'scores.csv'} ({len(rows)} alerts) and {out / 'outcomes.csv'}")
    return 0


def cmd_sim(args: argparse.Namespace) -> int:
    _ = _load_config(args)
    scenario = pipeline.load_scenario(_scenario_dir(args))
    state = sim.initial_state(scenario.elements, scenario.dynamics)
    csv_rows: list[tuple[int, str, float]] = []
    arff_rows: list[tuple[int, dict[str, float]]] = []
    for _cycle in range(args.cycles):
        state = sim.step(state)
        for label, value in state.outcomes.items():
            csv_rows.append((state.cycle, label, value))
        if state.cycle % 100 == 0:
            arff_rows.append((state.cycle, dict(state.element_states)))
    if args.csv:
        Path(args.csv).write_text(sim.outcomes_csv(csv_rows))
    if args.arff:
        tags = sorted(state.element_states)
        Path(args.arff).write_text(
            sim.states_arff(scenario.root.name or "scenario", tags, arff_rows)
        )
    for label, value in state.outcomes.items():
        print(f"{label}: outcome {value:.6g} after {state.cycle} cycles")
    return 0


def cmd_pdig(args: argparse.Namespace) -> int:
    _ = _load_config(args)
    scenario = pipeline.load_scenario(_scenario_dir(args))
    model = pipeline.build_model(scenario)
    if args.format == "dot":
        print(procmap.pdig_to_dot(model.pdig))
    else:
        print(procmap.pdig_to_json(model.pdig))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser, *, scenario_required: bool = True) -> None:
    parser.add_argument("--scenario", required=scenario_required,
                        help="scenario directory or bundled scenario name")
    parser.add_argument("--out", default="out", help="output directory (default: ./out)")
    parser.add_argument("--config", help="TOML run-configuration file")
    parser.add_argument("--seed", type=int, help="seed override for randomized fixtures")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scaphy",
        description="physical-impact and execution-phase detection for ICS control traffic",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="parse a scenario and emit the dependency graph")
    _add_common(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("impact", help="derive impact coefficients and outcome bounds")
    _add_common(p)
    p.set_defaults(func=cmd_impact)

    p = sub.add_parser("learn", help="learn per-phase call constraints from benign traces")
    _add_common(p)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("detect", help="replay signal/trace captures into alerts")
    _add_common(p)
    p.add_argument("--signals", help="signals.jsonl capture to replay")
    p.add_argument("--trace", help="trace.jsonl capture to replay")
    p.add_argument("--format", choices=("jsonl", "table"), default="jsonl")
    p.add_argument("--denominator-mode", choices=("all_dep", "affected_only"),
                   dest="denominator_mode")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("report", help="flatten alerts into CSV plot data")
    _add_common(p)
    p.add_argument("--signals", help="signals capture for the outcome timeline")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sim", help="run the scan-cycle simulator")
    _add_common(p)
    p.add_argument("--cycles", type=int, default=100)
    p.add_argument("--csv", help="write cycle,process,outcome rows here")
    p.add_argument("--arff", help="write element-state report (sampled every 100 cycles) here")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("pdig", help="export the dependency graph")
    _add_common(p)
    p.add_argument("--format", choices=("dot", "json"), default="json")
    p.set_defaults(func=cmd_pdig)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (errors.ScaphyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
