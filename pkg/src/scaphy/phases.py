"""Execution-phase segmentation of host API traces and per-phase call
constraints.

Control hosts run in a recognisable rhythm: a one-off initialization, then
cycles of process monitoring (open a device object for read, poll it inside a
tight loop) and process altering (open for write, send the computed signal,
close the handle).  The segmenter keys on the device-object open calls as
phase identifiers, uses the code-location/stack-depth loop signature to spot
the monitoring loop, and closes an altering window at the CloseHandle that
confirms it.  Whatever follows a completed altering window is attributed to
the next monitoring window.

From segmented benign runs, :func:`learn_physics` unions the observed API
names and device-object access patterns per phase into the allowed sets.
:func:`check_physics` then reports two violation families on replayed traces:
injections (a call inside a window that the phase's set does not allow) and
bypasses (a physical-interface transmit with no device-object write shortly
before it).  :func:`check_driver_stack` separately flags repeat attachments
to a device stack, and :func:`map_s3` summarises which stack layers a trace
touched.

Segmentation and checking stream over one ordered trace; independent traces
can be processed in parallel against a shared read-only constraint set.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from . import errors

log = logging.getLogger(__name__)

DEFAULT_BYPASS_DELTA_MS = 100.0
NS_PER_MS = 1_000_000

# Setup-flavoured calls that indicate initialization-layer activity.
INIT_APIS = frozenset(
    {
        "LoadLibrary",
        "LoadLibraryEx",
        "GetProcAddress",
        "CreateService",
        "OpenSCManager",
        "StartService",
        "RegCreateKey",
        "RegOpenKey",
        "CoInitialize",
        "CoCreateInstance",
        "WSAStartup",
    }
)

# Kernel driver-layer calls.
DRIVER_APIS = frozenset(
    {
        "IoCreateDevice",
        "IoAttachDeviceToDeviceStack",
        "IoCallDriver",
        "DeviceIoControl",
        "ZwCreateFile",
        "ZwWriteFile",
    }
)

ATTACH_API = "IoAttachDeviceToDeviceStack"


class Access(str, Enum):
    READ = "READ"
    WRITE = "WRITE"


class Space(str, Enum):
    USER = "user"
    KERNEL = "kernel"


class Phase(str, Enum):
    INITIALIZATION = "initialization"
    PROCESS_MONITORING = "process_monitoring"
    PROCESS_ALTERING = "process_altering"


class SubPhase(str, Enum):
    STATE_REPRESENTATION = "state_representation"
    EVENT_HANDLING = "event_handling"


class S3Layer(str, Enum):
    S0_PHYSICAL_IO = "S0"
    S1_ICS_DRIVER = "S1"
    S2_DEVICE_OBJECT = "S2"
    S3_ICS_CALLBACK = "S3"
    S4_1_INIT = "S4.1"
    S4_2_MONITORING = "S4.2"
    S4_3_ALTERING = "S4.3"


@dataclass(frozen=True)
class ApiEvent:
    t: int  # monotonic nanoseconds
    api: str | None
    eip: str
    depth: int
    space: Space = Space.USER
    obj: str | None = None
    access: Access | None = None
    share: int | None = None
    phy_tx: bool = False


@dataclass(frozen=True)
class PhaseWindow:
    phase: Phase
    start_idx: int
    end_idx: int  # inclusive
    sub_phase: SubPhase | None = None
    confirmed: bool = True

    def indices(self) -> range:
        return range(self.start_idx, self.end_idx + 1)


@dataclass(frozen=True)
class Violation:
    kind: str  # injection | bypass | device_stack_tamper
    event_idx: int
    event: ApiEvent
    phase: Phase | None
    detail: str


@dataclass
class PhysicsConstraints:
    """Per-phase allowed API names and device-object operation patterns.

    The altering and monitoring sets always contain the identifier skeleton
    (the open/transfer/close triplet) even when training never exhibited it.
    """

    names: dict[Phase, set[str]] = field(default_factory=dict)
    patterns: dict[Phase, set[tuple[str, str | None, str | None]]] = field(default_factory=dict)
    degraded: bool = False

    def allows(self, phase: Phase, event: ApiEvent) -> bool:
        if event.api is None:
            return True
        if event.api not in self.names.get(phase, set()):
            return False
        if event.obj is not None and not self.degraded:
            pattern = (event.api, event.obj, event.access.value if event.access else None)
            return pattern in self.patterns.get(phase, set())
        return True


SKELETON_NAMES = {
    Phase.PROCESS_MONITORING: {"CreateFile", "ReadFile", "CloseHandle"},
    Phase.PROCESS_ALTERING: {"CreateFile", "WriteFile", "CloseHandle"},
    Phase.INITIALIZATION: set(),
}


# ---------------------------------------------------------------------------
# Trace parsing
# ---------------------------------------------------------------------------

def parse_trace(text: str, *, source_name: str = "trace.jsonl") -> list[ApiEvent]:
    events: list[ApiEvent] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise errors.ScenarioError(
                f"invalid JSON: {exc}", source=source_name, line=line_no
            ) from exc
        events.append(
            ApiEvent(
                t=int(row["t"]),
                api=row.get("api"),
                obj=row.get("obj"),
                access=Access(row["access"]) if row.get("access") else None,
                share=row.get("share"),
                eip=str(row.get("eip", "")),
                depth=int(row.get("depth", 0)),
                space=Space(row.get("space", "user")),
                phy_tx=bool(row.get("phy_tx", False)),
            )
        )
    events.sort(key=lambda e: e.t)
    return events


def event_to_json(event: ApiEvent) -> str:
    row: dict = {"t": event.t, "eip": event.eip, "depth": event.depth, "space": event.space.value}
    if event.api is not None:
        row["api"] = event.api
    if event.obj is not None:
        row["obj"] = event.obj
    if event.access is not None:
        row["access"] = event.access.value
    if event.share is not None:
        row["share"] = event.share
    if event.phy_tx:
        row["phy_tx"] = True
    return json.dumps(row)


# ---------------------------------------------------------------------------
# Phase segmentation
# ---------------------------------------------------------------------------

def _is_device_open(event: ApiEvent, access: Access) -> bool:
    return event.api == "CreateFile" and event.obj is not None and event.access is access


def segment_phases(trace: Sequence[ApiEvent]) -> list[PhaseWindow]:
    """Segment an ordered trace into non-overlapping phase windows."""
    if not trace:
        return []

    windows: list[PhaseWindow] = []

    first_device_open = next(
        (i for i, e in enumerate(trace) if e.api == "CreateFile" and e.obj is not None),
        None,
    )
    if first_device_open is None:
        # No device-object activity at all: the whole trace is setup.
        windows.append(PhaseWindow(Phase.INITIALIZATION, 0, len(trace) - 1))
        return windows
    if first_device_open > 0:
        windows.append(PhaseWindow(Phase.INITIALIZATION, 0, first_device_open - 1))

    phase: Phase | None = None
    start = first_device_open
    anchor: tuple[str, int] | None = None
    anchor_revisited = False
    saw_read = False
    saw_write = False
    explicit_open = True

    def close(end_idx: int) -> None:
        nonlocal phase
        if phase is None or end_idx < start:
            phase = None
            return
        if phase is Phase.PROCESS_MONITORING:
            confirmed = saw_read and (anchor_revisited or not explicit_open)
            sub = (
                SubPhase.EVENT_HANDLING
                if anchor_revisited
                else (SubPhase.STATE_REPRESENTATION if saw_read else None)
            )
            if not confirmed:
                log.warning("monitoring window [%d..%d] unconfirmed", start, end_idx)
            windows.append(PhaseWindow(phase, start, end_idx, sub_phase=sub, confirmed=confirmed))
        else:
            confirmed = saw_write
            if not confirmed:
                log.warning("altering window [%d..%d] unconfirmed", start, end_idx)
            windows.append(PhaseWindow(phase, start, end_idx, confirmed=confirmed))
        phase = None

    def open_window(new_phase: Phase, idx: int, *, explicit: bool) -> None:
        nonlocal phase, start, anchor, anchor_revisited, saw_read, saw_write, explicit_open
        phase = new_phase
        start = idx
        anchor = None
        anchor_revisited = False
        saw_read = False
        saw_write = False
        explicit_open = explicit

    i = first_device_open
    n = len(trace)
    while i < n:
        event = trace[i]
        # Device opens transition phases; one more open of the same kind
        # while the phase is running stays inside the window (that is how
        # extra handle creation mid-phase gets attributed and checked).
        if _is_device_open(event, Access.READ) and phase is not Phase.PROCESS_MONITORING:
            close(i - 1)
            open_window(Phase.PROCESS_MONITORING, i, explicit=True)
        elif _is_device_open(event, Access.WRITE) and phase is not Phase.PROCESS_ALTERING:
            close(i - 1)
            open_window(Phase.PROCESS_ALTERING, i, explicit=True)
        elif phase is None:
            # Tail after a completed altering window: the host returns to
            # monitoring, and later memory-freeing calls land here too.
            open_window(Phase.PROCESS_MONITORING, i, explicit=False)

        if phase is Phase.PROCESS_MONITORING and (i > start or not explicit_open):
            key = (event.eip, event.depth)
            if anchor is None:
                anchor = key
            elif key == anchor:
                anchor_revisited = True
            if event.api == "ReadFile":
                saw_read = True
        elif phase is Phase.PROCESS_ALTERING:
            if event.api == "WriteFile":
                saw_write = True
            if event.api == "CloseHandle" and saw_write:
                close(i)
        i += 1
    close(n - 1)
    return windows


def window_of(windows: Sequence[PhaseWindow], idx: int) -> PhaseWindow | None:
    for w in windows:
        if w.start_idx <= idx <= w.end_idx:
            return w
    return None


# ---------------------------------------------------------------------------
# Constraint learning and checking
# ---------------------------------------------------------------------------

def learn_physics(
    traces: Sequence[Sequence[ApiEvent]],
    windows_per_trace: Sequence[Sequence[PhaseWindow]] | None = None,
) -> PhysicsConstraints:
    """Union per-phase API names and device-object patterns over benign runs
    captured while each dependency element state was toggled."""
    if windows_per_trace is None:
        windows_per_trace = [segment_phases(t) for t in traces]

    names: dict[Phase, set[str]] = {p: set() for p in Phase}
    patterns: dict[Phase, set[tuple[str, str | None, str | None]]] = {p: set() for p in Phase}
    any_window = False
    for trace, windows in zip(traces, windows_per_trace):
        for window in windows:
            any_window = True
            for idx in window.indices():
                event = trace[idx]
                if event.api is None or event.space is Space.KERNEL:
                    continue
                names[window.phase].add(event.api)
                if event.obj is not None:
                    patterns[window.phase].add(
                        (event.api, event.obj, event.access.value if event.access else None)
                    )
    if not any_window:
        raise errors.EmptyTraining("no phase windows found in any training trace")

    degraded = False
    for phase, skeleton in SKELETON_NAMES.items():
        missing = skeleton - names[phase]
        if missing and phase is not Phase.INITIALIZATION:
            log.warning("training never exhibited %s in %s; skeleton added", missing, phase.value)
            if not patterns[phase]:
                degraded = True
        names[phase] |= skeleton
    return PhysicsConstraints(names=names, patterns=patterns, degraded=degraded)


def check_physics(
    trace: Sequence[ApiEvent],
    windows: Sequence[PhaseWindow],
    constraints: PhysicsConstraints,
    *,
    bypass_delta_ms: float = DEFAULT_BYPASS_DELTA_MS,
) -> list[Violation]:
    """Report injection and bypass violations on a segmented trace."""
    violations: list[Violation] = []
    for window in windows:
        for idx in window.indices():
            event = trace[idx]
            if event.phy_tx or event.api is None:
                continue
            if event.space is Space.KERNEL:
                # Kernel activity sits below the program phases; the bypass
                # and device-stack checks own that territory.
                continue
            if not constraints.allows(window.phase, event):
                violations.append(
                    Violation(
                        kind="injection",
                        event_idx=idx,
                        event=event,
                        phase=window.phase,
                        detail=_describe(event) + f" not allowed in {window.phase.value}",
                    )
                )

    delta_ns = int(bypass_delta_ms * NS_PER_MS)
    last_device_write_t: int | None = None
    for idx, event in enumerate(trace):
        if event.api == "WriteFile" and event.obj is not None:
            last_device_write_t = event.t
        if not event.phy_tx:
            continue
        if last_device_write_t is None or event.t - last_device_write_t > delta_ns:
            violations.append(
                Violation(
                    kind="bypass",
                    event_idx=idx,
                    event=event,
                    phase=None,
                    detail="physical transmit with no device-object write "
                    f"in the preceding {bypass_delta_ms:g} ms",
                )
            )
    return violations


def check_driver_stack(trace: Sequence[ApiEvent]) -> list[Violation]:
    """First completed attachment per device stack is the benign driver; any
    repeat attachment on the same stack is tampering."""
    attach_counts: dict[str, int] = {}
    violations: list[Violation] = []
    for idx, event in enumerate(trace):
        if event.api != ATTACH_API:
            continue
        stack = event.obj or "<unknown-stack>"
        attach_counts[stack] = attach_counts.get(stack, 0) + 1
        if attach_counts[stack] > 1:
            violations.append(
                Violation(
                    kind="device_stack_tamper",
                    event_idx=idx,
                    event=event,
                    phase=None,
                    detail=f"repeat attachment #{attach_counts[stack]} to device stack {stack}",
                )
            )
    return violations


def _describe(event: ApiEvent) -> str:
    if event.obj is not None:
        access = f", {event.access.value}" if event.access else ""
        return f"{event.api}({event.obj}{access})"
    return str(event.api)


# ---------------------------------------------------------------------------
# Stack-layer activity report
# ---------------------------------------------------------------------------

def layer_of(event: ApiEvent) -> S3Layer | None:
    """Map one event to at most one stack layer."""
    if event.phy_tx:
        return S3Layer.S0_PHYSICAL_IO
    if event.api is None:
        return None
    if event.space is Space.KERNEL and event.api in DRIVER_APIS:
        return S3Layer.S1_ICS_DRIVER
    if event.obj is not None and event.api in ("ReadFile", "WriteFile"):
        return S3Layer.S2_DEVICE_OBJECT
    if event.obj is not None and event.api in ("CreateFile", "CloseHandle"):
        return S3Layer.S3_ICS_CALLBACK
    if event.api in INIT_APIS:
        return S3Layer.S4_1_INIT
    if event.api == "ReadFile":
        return S3Layer.S4_2_MONITORING
    if event.api == "WriteFile":
        return S3Layer.S4_3_ALTERING
    return None


@dataclass(frozen=True)
class S3Report:
    counts: dict[S3Layer, int]
    present: dict[S3Layer, bool]


def map_s3(trace: Sequence[ApiEvent]) -> S3Report:
    """Per-layer activity summary.

    The event mapping covers the stack layers (S0 through S3 plus the named
    program-layer indicators); the phase sub-layers additionally report
    present when segmentation finds their windows or their indicator call
    appears anywhere in the trace.
    """
    counts = {layer: 0 for layer in S3Layer}
    for event in trace:
        layer = layer_of(event)
        if layer is not None:
            counts[layer] += 1

    windows = segment_phases(trace)
    phases_seen = {w.phase for w in windows if w.end_idx >= w.start_idx}
    names_seen = {e.api for e in trace if e.api}

    present = {layer: counts[layer] > 0 for layer in S3Layer}
    present[S3Layer.S4_1_INIT] = counts[S3Layer.S4_1_INIT] > 0 or (
        Phase.INITIALIZATION in phases_seen
    )
    present[S3Layer.S4_2_MONITORING] = (
        counts[S3Layer.S4_2_MONITORING] > 0
        or "ReadFile" in names_seen
        or Phase.PROCESS_MONITORING in phases_seen
    )
    present[S3Layer.S4_3_ALTERING] = (
        counts[S3Layer.S4_3_ALTERING] > 0
        or "WriteFile" in names_seen
        or Phase.PROCESS_ALTERING in phases_seen
    )
    return S3Report(counts=counts, present=present)


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

def constraints_to_json(constraints: PhysicsConstraints) -> str:
    doc = {
        phase.value: sorted(constraints.names.get(phase, set())) for phase in Phase
    }
    doc["patterns"] = {
        phase.value: [
            {"api": api, "obj": obj, "access": access}
            for api, obj, access in sorted(
                constraints.patterns.get(phase, set()),
                key=lambda p: (p[0], p[1] or "", p[2] or ""),
            )
        ]
        for phase in Phase
    }
    doc["degraded"] = constraints.degraded
    return json.dumps(doc, indent=2)


def constraints_from_json(text: str) -> PhysicsConstraints:
    doc = json.loads(text)
    names = {phase: set(doc.get(phase.value, [])) for phase in Phase}
    patterns = {
        phase: {
            (p["api"], p.get("obj"), p.get("access"))
            for p in doc.get("patterns", {}).get(phase.value, [])
        }
        for phase in Phase
    }
    return PhysicsConstraints(names=names, patterns=patterns, degraded=doc.get("degraded", False))
