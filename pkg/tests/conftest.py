from __future__ import annotations

import pytest

from scaphy import detect, impact, ingest, phases, pipeline, procmap, scenario_path
from scaphy.config import RunConfig


@pytest.fixture(scope="session")
def config() -> RunConfig:
    return RunConfig()


@pytest.fixture(scope="session")
def water_bundle(config):
    return pipeline.ensure_bundle(scenario_path("water"), config)


@pytest.fixture(scope="session")
def power_bundle(config):
    return pipeline.ensure_bundle(scenario_path("power"), config)


@pytest.fixture(scope="session")
def conveyor_bundle(config):
    return pipeline.ensure_bundle(scenario_path("conveyor"), config, need_constraints=False)


@pytest.fixture(scope="session")
def run_replay(config):
    """Replay a scenario's capture files through the full detection path."""

    def _run(scenario: str, signals_file: str | None = None, trace_file: str | None = None,
             run_config: RunConfig | None = None) -> detect.DetectionResult:
        cfg = run_config or config
        root = scenario_path(scenario)
        bundle = pipeline.ensure_bundle(root, cfg)
        signals: list[detect.ControlSignal] = []
        violations: list[phases.Violation] = []
        if signals_file:
            signals = detect.parse_signals((root / "replays" / signals_file).read_text())
        if trace_file:
            events = phases.parse_trace((root / "replays" / trace_file).read_text())
            windows = phases.segment_phases(events)
            violations = phases.check_physics(
                events, windows, bundle.constraints, bypass_delta_ms=cfg.bypass_delta_ms
            )
            violations += phases.check_driver_stack(events)
        return detect.run_detection(
            bundle.detector_model, cfg, signals=signals, violations=violations
        )

    return _run


def make_elements(tags: list[str]) -> list[ingest.Element]:
    """Boolean elements (initial 0) straight from tag names."""
    entries = [{"tag": t, "value": 0} for t in tags]
    import json

    return ingest.parse_opc_tags(json.dumps(entries))


def make_synthetic_model(
    dep: list[str],
    *,
    terminal: str = "TERM.0.BOOL",
    sensor: str = "SENSE.0.REAL",
    process_id: str = "P",
    ic_values: dict[str, float] | None = None,
    ordering: list[tuple[str, str]] | None = None,
) -> detect.DetectionModel:
    """A one-process detection model with hand-authored impact values."""
    tags = [terminal, *dep]
    elements = make_elements(tags)
    sensor_el = ingest.parse_opc_tags(
        f'[{{"tag": "{sensor}", "value": 0.0, "range": [0, 100]}}]'
    )[0]
    elements.append(sensor_el)
    by_tag = ingest.index_elements(elements)
    if ordering is None:
        ordering = list(zip(dep, dep[1:]))
    spec = procmap.ProcessSpec(
        id=process_id,
        sensor=by_tag[sensor],
        terminal=by_tag[terminal],
        paths=(tuple(dep),) if dep else (),
        dep=tuple(dep),
        ordering=tuple(ordering),
    )
    ic_values = ic_values if ic_values is not None else {t: 0.5 for t in dep}
    ic = {(process_id, t, 1.0): v for t, v in ic_values.items()}
    ic_max = {(process_id, t): abs(v) for t, v in ic_values.items()}
    profile = impact.ImpactProfile(
        ic=ic, ic_max=ic_max, bounds={process_id: (0.0, 100.0)}, pruned=frozenset()
    )
    pdig = procmap.build_pdig([spec], [], elements)
    return detect.DetectionModel(
        elements=by_tag,
        processes=[spec],
        pdig=pdig,
        profile=profile,
        initial_outcomes={process_id: 0.0},
    )


def write_signal(t_ms: float, tag: str | None, value: float | None, *,
                 protocol: str = "modbus", fc: int = 5) -> detect.ControlSignal:
    return detect.ControlSignal(
        t=int(t_ms * 1_000_000), protocol=protocol, function_code=fc, tag=tag, value=value
    )
