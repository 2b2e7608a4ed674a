"""Scenario loading and model-building orchestration shared by the CLI and
the test harness.

A scenario directory holds the four inputs (``opc_tags.json``,
``alarms_events.json``, ``fbd.stl``, ``dynamics.json``), an optional
``rewrites.json`` namespace table, benign training traces under ``traces/``
and replayable capture files under ``replays/``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from . import detect, impact, ingest, phases, procmap
from .config import RunConfig

log = logging.getLogger(__name__)

OPC_FILE = "opc_tags.json"
TUPLES_FILE = "alarms_events.json"
STL_FILE = "fbd.stl"
DYNAMICS_FILE = "dynamics.json"
REWRITES_FILE = "rewrites.json"
TRACES_DIR = "traces"
REPLAYS_DIR = "replays"


@dataclass(frozen=True)
class Scenario:
    root: Path
    elements: list[ingest.Element]
    tuples: list[ingest.AlarmEventTuple]
    stl: ingest.StlProgram
    dynamics: ingest.DynamicsModel


@dataclass(frozen=True)
class ScenarioModel:
    scenario: Scenario
    processes: list[procmap.ProcessSpec]
    pdig: procmap.Pdig

    def process(self, pid: str) -> procmap.ProcessSpec:
        return next(p for p in self.processes if p.id == pid)


def _read(path: Path) -> str:
    if not path.is_file():
        raise FileNotFoundError(f"required scenario file missing: {path}")
    return path.read_text(encoding="utf-8")


def load_scenario(root: str | Path) -> Scenario:
    root = Path(root)
    elements = ingest.parse_opc_tags(_read(root / OPC_FILE), source_name=str(root / OPC_FILE))
    tuples = ingest.parse_alarms_events(
        _read(root / TUPLES_FILE), elements, source_name=str(root / TUPLES_FILE)
    )
    rewrites: list[tuple[str, str]] = []
    rewrites_path = root / REWRITES_FILE
    if rewrites_path.is_file():
        doc = json.loads(rewrites_path.read_text(encoding="utf-8"))
        rewrites = [(e["pattern"], e["replacement"]) for e in doc]
    stl = ingest.parse_stl(
        _read(root / STL_FILE), elements, rewrites, source_name=str(root / STL_FILE)
    )
    dynamics = ingest.parse_dynamics(
        _read(root / DYNAMICS_FILE), elements, source_name=str(root / DYNAMICS_FILE)
    )
    return Scenario(root=root, elements=elements, tuples=tuples, stl=stl, dynamics=dynamics)


def build_model(scenario: Scenario) -> ScenarioModel:
    """Partition, trace, link transfer points and assemble the graph."""
    _e_term, _e_nterm, stubs = procmap.partition_elements(scenario.elements, scenario.tuples)
    terminal_tags = frozenset(s.terminal_tag for s in stubs)
    processes = [
        procmap.trace_dependencies(stub, scenario.stl, terminal_tags - {stub.terminal_tag})
        for stub in stubs
    ]
    links = procmap.find_ptp(processes)
    pdig = procmap.build_pdig(processes, links, scenario.elements)
    return ScenarioModel(scenario=scenario, processes=processes, pdig=pdig)


def derive_profile(
    model: ScenarioModel, config: RunConfig
) -> tuple[impact.ImpactProfile, procmap.Pdig]:
    return impact.build_profile(
        model.pdig,
        model.processes,
        model.scenario.elements,
        model.scenario.dynamics,
        steady_eps=config.steady_eps,
        cycle_max=config.cycle_max,
        prune_threshold=config.prune_threshold,
    )


def load_training_traces(root: str | Path) -> list[list[phases.ApiEvent]]:
    traces_dir = Path(root) / TRACES_DIR
    traces = []
    for path in sorted(traces_dir.glob("*.jsonl")):
        traces.append(phases.parse_trace(path.read_text(encoding="utf-8"), source_name=str(path)))
    return traces


def learn_constraints(root: str | Path) -> phases.PhysicsConstraints:
    return phases.learn_physics(load_training_traces(root))


def detection_model(
    model: ScenarioModel, profile: impact.ImpactProfile, annotated: procmap.Pdig
) -> detect.DetectionModel:
    return detect.DetectionModel(
        elements=ingest.index_elements(model.scenario.elements),
        processes=model.processes,
        pdig=annotated,
        profile=profile,
        initial_outcomes={
            label: dyn.initial for label, dyn in model.scenario.dynamics.processes.items()
        },
    )


@dataclass(frozen=True)
class ModelBundle:
    model: ScenarioModel
    profile: impact.ImpactProfile
    annotated: procmap.Pdig
    constraints: phases.PhysicsConstraints | None
    detector_model: detect.DetectionModel


def ensure_bundle(
    scenario_dir: str | Path,
    config: RunConfig,
    out_dir: str | Path | None = None,
    *,
    need_constraints: bool = True,
) -> ModelBundle:
    """Build (or reload cached) model artifacts for a scenario.

    ``profile.json`` and ``physics.json`` under ``out_dir`` are reused when
    present; graph construction is cheap and always re-runs.
    """
    scenario = load_scenario(scenario_dir)
    model = build_model(scenario)

    out = Path(out_dir) if out_dir is not None else None
    profile = None
    annotated = None
    if out is not None and (out / "profile.json").is_file():
        profile = impact.profile_from_json((out / "profile.json").read_text())
        annotated = impact._annotate(model.pdig, profile.ic, profile.pruned)
    if profile is None:
        profile, annotated = derive_profile(model, config)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "profile.json").write_text(impact.profile_to_json(profile))

    constraints = None
    if need_constraints:
        if out is not None and (out / "physics.json").is_file():
            constraints = phases.constraints_from_json((out / "physics.json").read_text())
        elif (Path(scenario_dir) / TRACES_DIR).is_dir():
            constraints = learn_constraints(scenario_dir)
            if out is not None:
                out.mkdir(parents=True, exist_ok=True)
                (out / "physics.json").write_text(phases.constraints_to_json(constraints))

    return ModelBundle(
        model=model,
        profile=profile,
        annotated=annotated,
        constraints=constraints,
        detector_model=detection_model(model, profile, annotated),
    )
