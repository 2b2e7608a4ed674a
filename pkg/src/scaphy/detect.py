"""Control-signal anomaly detection, scoring and alert fusion.

The detector consumes two timestamped streams against the impact-annotated
model: state-changing wire commands (plus sensor readings riding the same
capture) and host API-trace violations.  Signal-side checks:

inconsistent state
    two dependency elements of one process hold states whose signed impact
    coefficients point in opposite directions (both nonzero).
outside setpoint
    a process outcome leaves the [lowest, highest] range learned during
    impact derivation; transfer-point propagation feeds the sink process the
    source's outcome before the check.
signal-set anomalies
    per-process signal windows, closed after a quiet gap, are checked for
    missing coverage, extraneous commands and precedence violations.

Signals enter a process window whenever the addressed element belongs to the
process graph-wise (dependency member or terminal).  The *expected* command
set is narrower: elements that are terminals of other processes are commanded
by their own process, and pruned elements carry no impact, so neither is
expected, and a direct command to another process's terminal inside this
window is extraneous here.

Scores follow the normalized impact ratio: the affected states' absolute
coefficients summed, over the per-element maxima summed across the process
dependency set (the ``all_dep`` denominator; ``affected_only`` restricts the
denominator to the affected elements).  Host-side violations carry a high
severity floor.  Alerts close in time that reference the same or
transfer-linked processes fuse into one incident.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .config import RunConfig
from .impact import ImpactProfile
from .ingest import Element
from .phases import Violation
from .procmap import Pdig, ProcessSpec, PtpLink

log = logging.getLogger(__name__)


class AlertKind(str, Enum):
    INCONSISTENT_STATE = "inconsistent_state"
    OUTSIDE_SETPOINT = "outside_setpoint"
    MISSING_SIGNAL = "missing_signal"
    EXTRANEOUS_SIGNAL = "extraneous_signal"
    OUT_OF_ORDER = "out_of_order"
    PHYSICS_INJECTION = "physics_injection"
    PHYSICS_BYPASS = "physics_bypass"
    DEVICE_STACK_TAMPER = "device_stack_tamper"


PHYSICS_KINDS = (
    AlertKind.PHYSICS_INJECTION,
    AlertKind.PHYSICS_BYPASS,
    AlertKind.DEVICE_STACK_TAMPER,
)


class Severity(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"

    @property
    def rank(self) -> int:
        return {"low": 0, "medium": 1, "high": 2}[self.value]


@dataclass(frozen=True)
class ControlSignal:
    t: int
    protocol: str
    function_code: int
    tag: str | None
    value: float | None


@dataclass(frozen=True)
class Seed:
    """An unscored detection finding."""

    kind: AlertKind
    t: int
    process: str | None = None
    affected: tuple[tuple[str, float | None], ...] = ()
    evidence: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class Alert:
    kind: AlertKind
    t: int
    process: str | None
    affected: tuple[tuple[str, float | None], ...]
    score: float | None
    severity: Severity
    evidence: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class Incident:
    id: int
    alerts: tuple[Alert, ...]
    processes: tuple[str, ...]
    t_start: int
    t_end: int

    @property
    def severity(self) -> Severity:
        return max((a.severity for a in self.alerts), key=lambda s: s.rank)


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------

@dataclass
class DetectionModel:
    """Everything the detector needs, immutable and shareable."""

    elements: dict[str, Element]
    processes: list[ProcessSpec]
    pdig: Pdig
    profile: ImpactProfile
    initial_outcomes: dict[str, float]

    def __post_init__(self) -> None:
        self.by_id = {p.id: p for p in self.processes}
        self.sensors = {p.sensor_tag: p.id for p in self.processes}
        self.terminals = {p.terminal_tag: p.id for p in self.processes}
        self.ptp: tuple[PtpLink, ...] = tuple(self.pdig.ptp)

    def member_processes(self, tag: str) -> list[ProcessSpec]:
        """Processes this element belongs to graph-wise."""
        return [p for p in self.processes if tag in p.dep or tag == p.terminal_tag]

    def expected_commands(self, process: ProcessSpec) -> tuple[str, ...]:
        """Dependency members this process's own control traffic commands."""
        other_terminals = set(self.terminals) - {process.terminal_tag}
        return tuple(
            tag
            for tag in process.dep
            if tag not in other_terminals and tag not in self.profile.pruned
        )

    def associated(self, process: ProcessSpec) -> frozenset[str]:
        return frozenset(self.expected_commands(process)) | {process.terminal_tag}

    def transfer_state(self, tag: str) -> float | None:
        el = self.elements.get(tag)
        if el is None or not el.tag.state_domain:
            return None
        return float(max(el.tag.state_domain))

    def related(self, a: str, b: str) -> bool:
        if a == b:
            return True
        for link in self.ptp:
            pair = {link.source_process, link.sink_process}
            if {a, b} <= pair:
                return True
        return False


# ---------------------------------------------------------------------------
# Signal parsing
# ---------------------------------------------------------------------------

def parse_signals(text: str, *, source_name: str = "signals.jsonl") -> list[ControlSignal]:
    signals: list[ControlSignal] = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        row = json.loads(line)
        signals.append(
            ControlSignal(
                t=int(row["t"]),
                protocol=str(row.get("protocol", "raw")),
                function_code=int(row.get("fc", 0)),
                tag=row.get("tag"),
                value=float(row["value"]) if row.get("value") is not None else None,
            )
        )
    signals.sort(key=lambda s: s.t)
    return signals


# ---------------------------------------------------------------------------
# Stateless checks
# ---------------------------------------------------------------------------

def check_setpoint(
    outcome: float,
    process_id: str,
    profile: ImpactProfile,
) -> bool:
    """True when the outcome sits outside the learned closed interval."""
    if process_id not in profile.bounds:
        from . import errors

        raise errors.UnknownProcess(f"no learned bounds for process {process_id!r}")
    lo, hi = profile.bounds[process_id]
    return not (lo <= outcome <= hi)


def check_signal_set(
    window_signals: Sequence[tuple[ControlSignal, float]],
    process: ProcessSpec,
    model: DetectionModel,
    config: RunConfig,
) -> list[Seed]:
    """Missing / extraneous / out-of-order verdicts for one closed window.

    ``window_signals`` pairs each state-changing signal with the value it
    wrote, in arrival order.
    """
    if not window_signals:
        return []
    seeds: list[Seed] = []
    t_close = window_signals[-1][0].t
    expected = model.expected_commands(process)
    associated = model.associated(process)

    covered: list[str] = []
    first_index: dict[str, int] = {}
    last_value: dict[str, float] = {}
    extraneous_seen: list[str] = []
    for i, (sig, value) in enumerate(window_signals):
        tag = sig.tag or ""
        first_index.setdefault(tag, i)
        last_value[tag] = value
        if tag in expected and tag not in covered:
            covered.append(tag)
        if tag not in associated and tag not in extraneous_seen:
            extraneous_seen.append(tag)

    for tag in extraneous_seen:
        seeds.append(
            Seed(
                kind=AlertKind.EXTRANEOUS_SIGNAL,
                t=t_close,
                process=process.id,
                affected=((tag, last_value.get(tag)),),
                evidence=(f"command to {tag} is not part of {process.id} control traffic",),
            )
        )

    if expected and covered and len(covered) < len(expected):
        missing = tuple(tag for tag in expected if tag not in covered)
        fraction = len(missing) / len(expected)
        if fraction >= config.min_missing_fraction:
            seeds.append(
                Seed(
                    kind=AlertKind.MISSING_SIGNAL,
                    t=t_close,
                    process=process.id,
                    affected=tuple((tag, None) for tag in missing),
                    evidence=(
                        f"window covered {sorted(covered)} of expected {sorted(expected)}",
                    ),
                )
            )

    for a, b in process.ordering:
        if a in first_index and b in first_index and first_index[a] > first_index[b]:
            seeds.append(
                Seed(
                    kind=AlertKind.OUT_OF_ORDER,
                    t=t_close,
                    process=process.id,
                    affected=((a, last_value.get(a)), (b, last_value.get(b))),
                    evidence=(f"{b} was commanded before {a}, violating {a} -> {b}",),
                )
            )
    return seeds


# ---------------------------------------------------------------------------
# Streaming detector
# ---------------------------------------------------------------------------

@dataclass
class _Window:
    signals: list[tuple[ControlSignal, float]] = field(default_factory=list)
    last_t: int = 0


class Detector:
    """Streams control signals against the model, tracking world state."""

    def __init__(self, model: DetectionModel, config: RunConfig):
        self.model = model
        self.config = config
        self.states: dict[str, float] = {
            tag: el.current_state for tag, el in model.elements.items()
        }
        self.outcomes: dict[str, float] = dict(model.initial_outcomes)
        self.outside: dict[str, bool] = {p.id: False for p in model.processes}
        self.windows: dict[str, _Window] = {}
        self.seeds: list[Seed] = []
        self._inconsistent_emitted: set = set()

    # -- window bookkeeping --------------------------------------------------

    def _append_window(self, pid: str, sig: ControlSignal, value: float) -> None:
        window = self.windows.get(pid)
        if window is not None and sig.t - window.last_t > self.config.quiet_gap_ns:
            self._close_window(pid)
            window = None
        if window is None:
            window = _Window()
            self.windows[pid] = window
        window.signals.append((sig, value))
        window.last_t = sig.t

    def _close_window(self, pid: str) -> None:
        window = self.windows.pop(pid, None)
        if window is None:
            return
        process = self.model.by_id[pid]
        self.seeds.extend(check_signal_set(window.signals, process, self.model, self.config))

    # -- signal application ---------------------------------------------------

    def apply_signal(self, sig: ControlSignal) -> list[Seed]:
        """Update world state with one wire message and emit alert seeds."""
        before = len(self.seeds)
        self._apply(sig)
        return self.seeds[before:]

    def _apply(self, sig: ControlSignal) -> None:
        if sig.tag is None:
            return  # session chatter (keepalives, test frames)
        is_write = self.config.is_write_code(sig.protocol, sig.function_code)
        element = self.model.elements.get(sig.tag)
        if element is None:
            if is_write:
                self.seeds.append(
                    Seed(
                        kind=AlertKind.EXTRANEOUS_SIGNAL,
                        t=sig.t,
                        process=None,
                        affected=(),
                        evidence=(f"write to unknown tag {sig.tag!r}",),
                        flags=("unknown_tag",),
                    )
                )
            return

        if sig.tag in self.model.sensors:
            pid = self.model.sensors[sig.tag]
            if is_write:
                # Sensors never legitimately receive control signals.
                self.seeds.append(
                    Seed(
                        kind=AlertKind.EXTRANEOUS_SIGNAL,
                        t=sig.t,
                        process=pid,
                        affected=((sig.tag, sig.value),),
                        evidence=(f"control signal addressed to sensor {sig.tag}",),
                    )
                )
            elif sig.value is not None:
                self.outcomes[pid] = sig.value
                self._setpoint_edge(pid, sig.t, cause=f"reading {sig.value} on {sig.tag}")
            return

        if not is_write or sig.value is None:
            return  # actuator poll

        for proc in self.model.member_processes(sig.tag):
            self._append_window(proc.id, sig, sig.value)

        old = self.states.get(sig.tag)
        if old == sig.value:
            return  # no state change
        self.states[sig.tag] = sig.value

        for link in self.model.ptp:
            if link.element != sig.tag:
                continue
            if sig.value == self.model.transfer_state(sig.tag):
                source_value = self.outcomes[link.source_process]
                self.outcomes[link.sink_process] = source_value
                self._setpoint_edge(
                    link.sink_process,
                    sig.t,
                    cause=(
                        f"transfer via {link.element}: {link.sink_process} assumed "
                        f"{source_value} from {link.source_process}"
                    ),
                    affected=((sig.tag, sig.value),),
                )

        self._check_inconsistent(sig.tag, sig.value, sig.t)

    def _setpoint_edge(
        self,
        pid: str,
        t: int,
        cause: str,
        affected: tuple[tuple[str, float | None], ...] = (),
    ) -> None:
        if pid not in self.model.profile.bounds:
            return
        now_outside = check_setpoint(self.outcomes[pid], pid, self.model.profile)
        if now_outside and not self.outside[pid]:
            lo, hi = self.model.profile.bounds[pid]
            self.seeds.append(
                Seed(
                    kind=AlertKind.OUTSIDE_SETPOINT,
                    t=t,
                    process=pid,
                    affected=affected or ((self.model.by_id[pid].terminal_tag, None),),
                    evidence=(
                        f"{pid} outcome {self.outcomes[pid]} outside learned [{lo}, {hi}]; "
                        + cause,
                    ),
                )
            )
        self.outside[pid] = now_outside

    def _check_inconsistent(self, tag: str, value: float, t: int) -> None:
        profile = self.model.profile
        for proc in self.model.processes:
            if tag not in proc.dep:
                continue
            my_ic = profile.ic.get((proc.id, tag, float(value)))
            if not my_ic:
                continue
            opposing: list[tuple[str, float]] = []
            for other in proc.dep:
                if other == tag:
                    continue
                other_state = self.states.get(other)
                if other_state is None:
                    continue
                other_ic = profile.ic.get((proc.id, other, float(other_state)))
                if other_ic and (other_ic > 0) != (my_ic > 0):
                    opposing.append((other, other_state))
            if opposing:
                affected = ((tag, value), *opposing)
                key = (proc.id, frozenset(affected))
                if key in self._inconsistent_emitted:
                    continue
                self._inconsistent_emitted.add(key)
                self.seeds.append(
                    Seed(
                        kind=AlertKind.INCONSISTENT_STATE,
                        t=t,
                        process=proc.id,
                        affected=affected,
                        evidence=(
                            f"{tag}={value} drives {proc.id} against "
                            + ", ".join(f"{o}={s}" for o, s in opposing),
                        ),
                    )
                )

    def finish(self) -> list[Seed]:
        for pid in list(self.windows):
            self._close_window(pid)
        return self.seeds


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def severity_band(score: float, config: RunConfig) -> Severity:
    if score <= config.severity_low_max:
        return Severity.LOW
    if score <= config.severity_medium_max:
        return Severity.MEDIUM
    return Severity.HIGH


def score_value(
    affected: Sequence[tuple[str, float | None]],
    process: str | None,
    model: DetectionModel,
    config: RunConfig,
) -> tuple[float | None, tuple[str, ...]]:
    """Normalized impact ratio for an affected-element set, plus flags."""
    if not affected:
        return 0.0, ()
    profile = model.profile
    numerator = 0.0
    for tag, state in affected:
        if state is None:
            numerator += profile.ic_max_for(tag, process) or 0.0
        else:
            numerator += abs(profile.ic_for(tag, state, process) or 0.0)

    if config.denominator_mode == "affected_only":
        denominator = sum(profile.ic_max_for(tag, process) or 0.0 for tag, _ in affected)
    else:
        if process is None or process not in model.by_id:
            denominator = sum(profile.ic_max_for(tag, process) or 0.0 for tag, _ in affected)
        else:
            denominator = profile.dep_denominator(model.by_id[process].dep, process)

    if denominator <= 0.0:
        return None, ("zero_denominator",)
    return min(max(numerator / denominator, 0.0), 1.0), ()


def score_seeds(
    seeds: Iterable[Seed],
    model: DetectionModel,
    config: RunConfig,
) -> list[Alert]:
    """Score seeds into alerts; empty physical findings are dropped, host-side
    violations carry a high severity floor."""
    alerts: list[Alert] = []
    for seed in seeds:
        if seed.kind in PHYSICS_KINDS:
            if seed.process is not None and seed.affected:
                score, flags = score_value(seed.affected, seed.process, model, config)
                if score is None:
                    score = 1.0
            else:
                score, flags = 1.0, ()
            severity = Severity.HIGH
        elif not seed.affected:
            if "unknown_tag" not in seed.flags:
                continue  # nothing affected, nothing to report
            score, flags = 0.0, ()
            severity = Severity.LOW
        else:
            score, flags = score_value(seed.affected, seed.process, model, config)
            severity = Severity.MEDIUM if score is None else severity_band(score, config)
        alerts.append(
            Alert(
                kind=seed.kind,
                t=seed.t,
                process=seed.process,
                affected=seed.affected,
                score=score,
                severity=severity,
                evidence=seed.evidence,
                flags=seed.flags + flags,
            )
        )
    return alerts


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

def fuse(alerts: Sequence[Alert], model: DetectionModel, config: RunConfig) -> list[Incident]:
    """Group alerts that are close in time and reference the same process, a
    transfer-linked process, or no process at all."""
    incidents: list[dict] = []
    for alert in sorted(alerts, key=lambda a: a.t):
        chosen = None
        for inc in incidents:
            if alert.t - inc["t_end"] > config.fusion_window_ns:
                continue
            if (
                alert.process is None
                or not inc["processes"]
                or any(model.related(alert.process, p) for p in inc["processes"])
            ):
                chosen = inc
                break
        if chosen is None:
            chosen = {"alerts": [], "processes": set(), "t_start": alert.t, "t_end": alert.t}
            incidents.append(chosen)
        chosen["alerts"].append(alert)
        if alert.process is not None:
            chosen["processes"].add(alert.process)
        chosen["t_end"] = max(chosen["t_end"], alert.t)
    return [
        Incident(
            id=i + 1,
            alerts=tuple(inc["alerts"]),
            processes=tuple(sorted(inc["processes"])),
            t_start=inc["t_start"],
            t_end=inc["t_end"],
        )
        for i, inc in enumerate(incidents)
    ]


# ---------------------------------------------------------------------------
# End-to-end run
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectionResult:
    alerts: tuple[Alert, ...]
    incidents: tuple[Incident, ...]


def violations_to_seeds(violations: Sequence[Violation]) -> list[Seed]:
    kind_map = {
        "injection": AlertKind.PHYSICS_INJECTION,
        "bypass": AlertKind.PHYSICS_BYPASS,
        "device_stack_tamper": AlertKind.DEVICE_STACK_TAMPER,
    }
    seeds = []
    for v in violations:
        seeds.append(
            Seed(
                kind=kind_map[v.kind],
                t=v.event.t,
                process=None,
                affected=(),
                evidence=(v.detail,),
            )
        )
    return seeds


def run_detection(
    model: DetectionModel,
    config: RunConfig,
    signals: Sequence[ControlSignal] = (),
    violations: Sequence[Violation] = (),
) -> DetectionResult:
    detector = Detector(model, config)
    for sig in signals:
        detector.apply_signal(sig)
    seeds = detector.finish() + violations_to_seeds(violations)
    alerts = sorted(score_seeds(seeds, model, config), key=lambda a: a.t)
    incidents = fuse(alerts, model, config)
    return DetectionResult(alerts=tuple(alerts), incidents=tuple(incidents))


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def alert_to_json(alert: Alert) -> str:
    return json.dumps(
        {
            "t": alert.t,
            "kind": alert.kind.value,
            "process": alert.process,
            "affected": [{"tag": t, "state": s} for t, s in alert.affected],
            "score": alert.score,
            "severity": alert.severity.value,
            "evidence": list(alert.evidence),
            "flags": list(alert.flags),
        }
    )


def render_table(result: DetectionResult, model: DetectionModel) -> str:
    """Per-element report: one row per dependency element with its signal
    status, plus the host-side findings, grouped by incident."""
    lines: list[str] = []
    for incident in result.incidents:
        lines.append(
            f"INCIDENT {incident.id}  severity={incident.severity.value}  "
            f"t=[{incident.t_start}..{incident.t_end}]  "
            f"processes={', '.join(incident.processes) or '-'}"
        )
        signal_status: dict[str, list[str]] = {}
        for alert in incident.alerts:
            for tag, _state in alert.affected:
                signal_status.setdefault(tag, []).append(alert.kind.value)
        for pid in incident.processes:
            proc = model.by_id[pid]
            lines.append(f"  process {pid} (terminal {proc.terminal_tag}):")
            lines.append(f"    {'element':<18} {'finding':<40}")
            for tag in (proc.terminal_tag, *proc.dep):
                findings = ", ".join(sorted(set(signal_status.get(tag, [])))) or "-"
                marker = "SIGNAL*" if signal_status.get(tag) else "       "
                lines.append(f"    {tag:<18} {marker} {findings}")
        host = [a for a in incident.alerts if a.kind in PHYSICS_KINDS]
        if host:
            lines.append("  host findings:")
            for alert in host:
                lines.append(f"    {alert.kind.value}: {'; '.join(alert.evidence)}")
        for alert in incident.alerts:
            if alert.kind in PHYSICS_KINDS:
                continue
            score = "n/a" if alert.score is None else f"{alert.score:.3f}"
            lines.append(
                f"  {alert.kind.value:<20} severity={alert.severity.value:<6} "
                f"score={score}  {'; '.join(alert.evidence)}"
            )
        lines.append("")
    if not result.incidents:
        lines.append("no findings")
    return "\n".join(lines)
