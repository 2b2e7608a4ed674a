"""Scenario ingestion: OPC tag lists, monitored-parameter tuples, statement
lists and process dynamics.

All four parsers are pure functions over text.  They validate aggressively and
raise the typed errors from :mod:`scaphy.errors`; nothing here keeps state, so
any number of callers may parse concurrently.

Input formats
-------------
``opc_tags.json``
    JSON array of ``{"tag": "NAME.ID.TYPE", "value": <number>}``.  Entries may
    carry ``"levels": [..]`` (explicit discrete states, required for INT) or
    ``"range": [lo, hi]`` (REAL tags, quantised to three switching levels).
``alarms_events.json``
    JSON array of ``{"sensor": tag, "terminal": tag, "process_label": str?}``.
``fbd.stl``
    Line oriented text.  ``NETWORK <n>`` headers open blocks, statements are
    ``LOAD|AND|OR|STORE <tag>``, ``#`` starts a comment line.
``dynamics.json``
    Object keyed by process label, see :class:`ProcessDynamics`.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

from . import errors

log = logging.getLogger(__name__)

StateValue = float

# Number of quantised switching levels for REAL tags declared via "range".
REAL_QUANT_LEVELS = 3


class ValueType(str, Enum):
    BOOL = "BOOL"
    INT = "INT"
    REAL = "REAL"


class Role(str, Enum):
    TERMINAL = "terminal"
    NONTERMINAL = "nonterminal"


@dataclass(frozen=True)
class OpcTag:
    """A parsed NAME.ID.TYPE identifier plus the enumerable state domain."""

    raw: str
    name: str
    id: int
    value_type: ValueType
    state_domain: tuple[StateValue, ...]

    def __str__(self) -> str:  # pragma: no cover - display helper
        return self.raw


@dataclass(frozen=True)
class Element:
    tag: OpcTag
    role: Role
    current_state: StateValue
    # True when the state domain had to be collapsed to the initial value
    # because no levels/range were declared for a non-BOOL tag.
    domain_flagged: bool = False

    @property
    def raw_tag(self) -> str:
        return self.tag.raw

    def with_role(self, role: Role) -> "Element":
        return replace(self, role=role)


@dataclass(frozen=True)
class AlarmEventTuple:
    sensor: Element
    terminal: Element
    process_label: str | None = None


@dataclass(frozen=True)
class StlStatement:
    op: str  # LOAD | AND | OR | STORE
    tag: str  # full NAME.ID.TYPE, post-rewrite
    line: int


@dataclass(frozen=True)
class StlNetwork:
    index: int
    statements: tuple[StlStatement, ...]

    @property
    def store_target(self) -> str:
        for st in self.statements:
            if st.op == "STORE":
                return st.tag
        raise AssertionError("validated network lost its STORE")

    @property
    def operands(self) -> tuple[str, ...]:
        return tuple(st.tag for st in self.statements if st.op != "STORE")


@dataclass(frozen=True)
class StlProgram:
    networks: tuple[StlNetwork, ...]

    def networks_storing(self, tag: str) -> tuple[StlNetwork, ...]:
        return tuple(n for n in self.networks if n.store_target == tag)

    @property
    def wire_count(self) -> int:
        """Operand-to-target connections across all networks."""
        return sum(len(n.operands) for n in self.networks)


@dataclass(frozen=True)
class RateEntry:
    """One per-scan-cycle contribution of an (element, state) pair.

    Exactly one form is populated: a constant additive ``rate``, or a
    proportional relaxation ``gain``/``target`` pair contributing
    ``gain * (target - outcome)`` per cycle.
    """

    tag: str
    state: StateValue
    rate: float | None = None
    gain: float | None = None
    target: float | None = None

    @property
    def proportional(self) -> bool:
        return self.gain is not None


@dataclass(frozen=True)
class ProcessDynamics:
    label: str
    initial: float
    clamp: tuple[float, float]
    rates: tuple[RateEntry, ...]
    sv: float | None = None
    gain_p: float | None = None


@dataclass(frozen=True)
class DynamicsModel:
    processes: Mapping[str, ProcessDynamics]

    def for_process(self, label: str) -> ProcessDynamics:
        try:
            return self.processes[label]
        except KeyError:
            raise errors.MissingDynamics(f"no dynamics defined for process {label!r}") from None


RewriteRule = tuple[str, str]


# ---------------------------------------------------------------------------
# OPC tags
# ---------------------------------------------------------------------------

def split_tag(raw: str, *, source: str = "opc_tags") -> tuple[str, int, str]:
    """Split ``NAME.ID.TYPE``; NAME may itself contain dots (e.g. LOADS.0)."""
    parts = raw.split(".")
    if len(parts) < 3:
        raise errors.MalformedTag(f"tag {raw!r} does not split into NAME.ID.TYPE", source=source)
    name = ".".join(parts[:-2])
    id_text, type_text = parts[-2], parts[-1]
    if not name:
        raise errors.MalformedTag(f"tag {raw!r} has an empty element name", source=source)
    if not id_text.isdigit():
        raise errors.MalformedTag(
            f"tag {raw!r} id field {id_text!r} is not a non-negative integer", source=source
        )
    return name, int(id_text), type_text


def _state_domain(
    raw: str,
    value_type: ValueType,
    levels: Sequence[float] | None,
    value_range: Sequence[float] | None,
    *,
    source: str,
) -> tuple[tuple[StateValue, ...], bool]:
    if value_type is ValueType.BOOL:
        return (0, 1), False
    if levels:
        return tuple(float(v) for v in levels), False
    if value_type is ValueType.REAL and value_range:
        lo, hi = float(value_range[0]), float(value_range[1])
        if hi < lo:
            raise errors.ValueOutsideDomain(
                f"tag {raw!r} range [{lo}, {hi}] is inverted", source=source
            )
        mid = (lo + hi) / 2.0
        return (lo, mid, hi), False
    # No enumerable states declared: keep only the initial value and flag the
    # element so switching-based derivation can skip it loudly.
    return (), True


def parse_opc_tags(source: str, *, source_name: str = "opc_tags.json") -> list[Element]:
    """Parse the OPC tag list into elements with populated state domains.

    Elements come back with the nonterminal placeholder role; partitioning
    assigns the real roles later.
    """
    try:
        entries = json.loads(source)
    except json.JSONDecodeError as exc:
        raise errors.ScenarioError(f"invalid JSON: {exc}", source=source_name) from exc
    if not isinstance(entries, list):
        raise errors.ScenarioError("expected a JSON array of tag entries", source=source_name)

    elements: list[Element] = []
    seen: set[str] = set()
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "tag" not in entry or "value" not in entry:
            raise errors.ScenarioError(
                f"entry {i} must be an object with 'tag' and 'value'", source=source_name
            )
        raw = str(entry["tag"])
        name, num, type_text = split_tag(raw, source=source_name)
        try:
            value_type = ValueType(type_text.upper())
        except ValueError:
            raise errors.UnknownValueType(
                f"tag {raw!r} has unknown value type {type_text!r}", source=source_name
            ) from None
        if raw in seen:
            raise errors.DuplicateTag(f"tag {raw!r} appears more than once", source=source_name)
        seen.add(raw)

        domain, flagged = _state_domain(
            raw, value_type, entry.get("levels"), entry.get("range"), source=source_name
        )
        value = entry["value"]
        if flagged:
            log.warning(
                "tag %s declares no levels/range; states collapsed to its initial value", raw
            )
            domain = (float(value),)
        if float(value) not in tuple(float(s) for s in domain):
            raise errors.ValueOutsideDomain(
                f"tag {raw!r} initial value {value!r} is outside domain {list(domain)}",
                source=source_name,
            )
        tag = OpcTag(raw=raw, name=name, id=num, value_type=value_type, state_domain=domain)
        elements.append(
            Element(tag=tag, role=Role.NONTERMINAL, current_state=value, domain_flagged=flagged)
        )
    return elements


def elements_to_json(elements: Iterable[Element]) -> str:
    """Canonical serialisation; parse_opc_tags(elements_to_json(e)) == e."""
    out = []
    for el in elements:
        entry: dict = {"tag": el.raw_tag, "value": el.current_state}
        if el.tag.value_type is not ValueType.BOOL and not el.domain_flagged:
            entry["levels"] = list(el.tag.state_domain)
        out.append(entry)
    return json.dumps(out, indent=2)


def index_elements(elements: Iterable[Element]) -> dict[str, Element]:
    return {el.raw_tag: el for el in elements}


# ---------------------------------------------------------------------------
# Alarms & events tuples
# ---------------------------------------------------------------------------

def parse_alarms_events(
    source: str,
    elements: Sequence[Element],
    *,
    source_name: str = "alarms_events.json",
) -> list[AlarmEventTuple]:
    """Parse monitored-parameter tuples; each pairs a sensor with the terminal
    element whose state embodies the process goal."""
    try:
        entries = json.loads(source)
    except json.JSONDecodeError as exc:
        raise errors.ScenarioError(f"invalid JSON: {exc}", source=source_name) from exc
    if not isinstance(entries, list):
        raise errors.ScenarioError("expected a JSON array of tuples", source=source_name)

    by_tag = index_elements(elements)
    tuples: list[AlarmEventTuple] = []
    for i, entry in enumerate(entries):
        sensor_tag = str(entry.get("sensor", ""))
        terminal_tag = str(entry.get("terminal", ""))
        for t in (sensor_tag, terminal_tag):
            if t not in by_tag:
                raise errors.UnresolvableTag(
                    f"tuple {i}: tag {t!r} does not resolve to a parsed element",
                    source=source_name,
                )
        if sensor_tag == terminal_tag:
            raise errors.SensorEqualsTerminal(
                f"tuple {i}: sensor and terminal are both {sensor_tag!r}", source=source_name
            )
        label = entry.get("process_label")
        tuples.append(
            AlarmEventTuple(
                sensor=by_tag[sensor_tag],
                terminal=by_tag[terminal_tag],
                process_label=str(label) if label is not None else None,
            )
        )
    return tuples


def tuples_to_json(tuples: Iterable[AlarmEventTuple]) -> str:
    out = []
    for t in tuples:
        entry: dict = {"sensor": t.sensor.raw_tag, "terminal": t.terminal.raw_tag}
        if t.process_label is not None:
            entry["process_label"] = t.process_label
        out.append(entry)
    return json.dumps(out, indent=2)


# ---------------------------------------------------------------------------
# Statement lists
# ---------------------------------------------------------------------------

_MNEMONICS = ("LOAD", "AND", "OR", "STORE")
_NETWORK_RE = re.compile(r"^NETWORK\s+(\d+)\s*$", re.IGNORECASE)


def apply_rewrites(tag: str, rewrites: Sequence[RewriteRule]) -> str:
    """Apply the namespace rewrite table to one STL tag.

    Rewrites run before OPC matching, never after; the default empty table is
    the identity.
    """
    for pattern, replacement in rewrites:
        tag = re.sub(pattern, replacement, tag)
    return tag


def parse_stl(
    source: str,
    elements: Sequence[Element],
    rewrites: Sequence[RewriteRule] = (),
    *,
    source_name: str = "fbd.stl",
) -> StlProgram:
    """Parse a statement-list export into ordered networks.

    Only operand-to-target connectivity matters downstream, so the grammar is
    the four-mnemonic subset; anything else is rejected loudly.
    """
    by_tag = index_elements(elements)
    networks: list[StlNetwork] = []
    current: list[StlStatement] | None = None
    current_index: int | None = None

    def close_network(line_no: int) -> None:
        nonlocal current, current_index
        if current is None:
            return
        stores = [s for s in current if s.op == "STORE"]
        operands = [s for s in current if s.op != "STORE"]
        if len(stores) != 1:
            raise errors.NetworkWithoutStore(
                f"network {current_index} has {len(stores)} STORE statements, expected exactly 1",
                source=source_name,
                line=line_no,
            )
        if not operands:
            raise errors.NetworkWithoutStore(
                f"network {current_index} has no operand statements",
                source=source_name,
                line=line_no,
            )
        networks.append(StlNetwork(index=current_index or 0, statements=tuple(current)))
        current, current_index = None, None

    for line_no, raw_line in enumerate(source.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        header = _NETWORK_RE.match(line)
        if header:
            close_network(line_no)
            current = []
            current_index = int(header.group(1))
            continue
        parts = line.split(None, 1)
        op = parts[0].upper()
        if op not in _MNEMONICS:
            raise errors.UnknownMnemonic(
                f"unsupported mnemonic {parts[0]!r}", source=source_name, line=line_no
            )
        if len(parts) != 2:
            raise errors.ScenarioError(
                f"{op} statement is missing its tag", source=source_name, line=line_no
            )
        if current is None:
            raise errors.ScenarioError(
                "statement appears before any NETWORK header", source=source_name, line=line_no
            )
        tag = apply_rewrites(parts[1].strip(), rewrites)
        if tag not in by_tag:
            raise errors.UnresolvableTag(
                f"STL tag {tag!r} does not resolve to a parsed element",
                source=source_name,
                line=line_no,
            )
        current.append(StlStatement(op=op, tag=tag, line=line_no))
    close_network(len(source.splitlines()))
    return StlProgram(networks=tuple(networks))


def stl_to_text(program: StlProgram) -> str:
    """Canonical serialisation; parse_stl(stl_to_text(p), ...) == p
    structurally (line numbers aside)."""
    lines: list[str] = []
    for net in program.networks:
        lines.append(f"NETWORK {net.index}")
        for st in net.statements:
            lines.append(f"{st.op} {st.tag}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------

def parse_dynamics(
    source: str,
    elements: Sequence[Element],
    *,
    source_name: str = "dynamics.json",
) -> DynamicsModel:
    """Parse the scan-cycle dynamics description.

    Processes missing from the file are not an error here; impact derivation
    fails fast for those processes only.
    """
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise errors.ScenarioError(f"invalid JSON: {exc}", source=source_name) from exc
    if not isinstance(doc, dict):
        raise errors.ScenarioError("expected an object keyed by process label", source=source_name)

    by_tag = index_elements(elements)
    processes: dict[str, ProcessDynamics] = {}
    for label, body in doc.items():
        clamp = body.get("clamp")
        if (
            not isinstance(clamp, (list, tuple))
            or len(clamp) != 2
            or float(clamp[0]) > float(clamp[1])
        ):
            raise errors.ClampInverted(
                f"process {label!r} clamp {clamp!r} must be [min, max] with min <= max",
                source=source_name,
            )
        lo, hi = float(clamp[0]), float(clamp[1])
        initial = float(body.get("initial", 0.0))
        if not (lo <= initial <= hi):
            raise errors.ClampInverted(
                f"process {label!r} initial {initial} lies outside clamp [{lo}, {hi}]",
                source=source_name,
            )
        rates: list[RateEntry] = []
        for entry in body.get("rates", []):
            tag = str(entry.get("tag", ""))
            if tag not in by_tag:
                raise errors.UnresolvableTag(
                    f"process {label!r} rate entry tag {tag!r} is unknown", source=source_name
                )
            state = float(entry.get("state"))
            domain = tuple(float(s) for s in by_tag[tag].tag.state_domain)
            if state not in domain:
                raise errors.RateForUnknownState(
                    f"process {label!r}: state {state} is outside {tag} domain {list(domain)}",
                    source=source_name,
                )
            if "gain" in entry:
                rates.append(
                    RateEntry(
                        tag=tag,
                        state=state,
                        gain=float(entry["gain"]),
                        target=float(entry.get("target", hi)),
                    )
                )
            else:
                rates.append(RateEntry(tag=tag, state=state, rate=float(entry.get("rate", 0.0))))
        sv = body.get("sv")
        gain_p = body.get("gain_p")
        processes[label] = ProcessDynamics(
            label=label,
            initial=initial,
            clamp=(lo, hi),
            rates=tuple(rates),
            sv=float(sv) if sv is not None else None,
            gain_p=float(gain_p) if gain_p is not None else None,
        )
    return DynamicsModel(processes=processes)


def dynamics_to_json(model: DynamicsModel) -> str:
    doc: dict = {}
    for label, dyn in model.processes.items():
        rates = []
        for r in dyn.rates:
            if r.proportional:
                rates.append({"tag": r.tag, "state": r.state, "gain": r.gain, "target": r.target})
            else:
                rates.append({"tag": r.tag, "state": r.state, "rate": r.rate})
        body: dict = {"initial": dyn.initial, "clamp": list(dyn.clamp), "rates": rates}
        if dyn.sv is not None:
            body["sv"] = dyn.sv
        if dyn.gain_p is not None:
            body["gain_p"] = dyn.gain_p
        doc[label] = body
    return json.dumps(doc, indent=2)
