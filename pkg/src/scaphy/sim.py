"""Deterministic scan-cycle process simulator.

One scan cycle is the atomic time unit.  Each cycle, every process outcome
moves by the sum of its active rate contributions and is then clamped to its
saturation bounds.  A contribution is either a constant rate, a proportional
relaxation ``gain * (target - outcome)``, or, when the process declares a
setpoint loop (``sv`` plus ``gain_p``), the positive-rate actuator is driven
as ``gain_p * (sv - outcome)`` capped at that actuator's own rate.  Large
``gain_p`` values step past the setpoint before the intake shuts off, which
is the overshoot operators tune against.

States are values: stepping returns a new state, so independent simulations
can run concurrently while one simulation stays strictly sequential.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from . import errors
from .ingest import DynamicsModel, Element, ProcessDynamics


@dataclass(frozen=True)
class SimState:
    cycle: int
    element_states: Mapping[str, float]
    outcomes: Mapping[str, float]
    dynamics: DynamicsModel
    # Per-element switchable states; empty mapping disables validation.
    domains: Mapping[str, frozenset[float]] = field(default_factory=dict)

    def outcome(self, process: str) -> float:
        return self.outcomes[process]

    def fingerprint(self) -> str:
        """Stable digest of the observable state, for reset-discipline checks."""
        payload = json.dumps(
            {
                "cycle": self.cycle,
                "elements": dict(sorted(self.element_states.items())),
                "outcomes": dict(sorted(self.outcomes.items())),
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()

    def _replace(self, **changes) -> "SimState":
        base = {
            "cycle": self.cycle,
            "element_states": self.element_states,
            "outcomes": self.outcomes,
            "dynamics": self.dynamics,
            "domains": self.domains,
        }
        base.update(changes)
        return SimState(**base)


def initial_state(elements: Iterable[Element], dynamics: DynamicsModel) -> SimState:
    els = list(elements)
    return SimState(
        cycle=0,
        element_states={el.raw_tag: el.current_state for el in els},
        outcomes={label: dyn.initial for label, dyn in dynamics.processes.items()},
        dynamics=dynamics,
        domains={
            el.raw_tag: frozenset(float(s) for s in el.tag.state_domain) for el in els
        },
    )


def _contribution(dyn: ProcessDynamics, states: Mapping[str, float], outcome: float) -> float:
    total = 0.0
    loop_active = dyn.sv is not None and dyn.gain_p is not None
    for entry in dyn.rates:
        if states.get(entry.tag) != entry.state:
            continue
        if entry.proportional:
            total += entry.gain * (entry.target - outcome)
        elif loop_active and entry.rate > 0:
            # Setpoint loop drives the intake actuator; it cannot exceed the
            # actuator's physical rate and never runs in reverse.
            demanded = dyn.gain_p * (dyn.sv - outcome)
            total += min(max(demanded, 0.0), entry.rate)
        else:
            total += entry.rate
    return total


def step(state: SimState) -> SimState:
    """Advance every process one scan cycle."""
    new_outcomes: dict[str, float] = {}
    for label, value in state.outcomes.items():
        dyn = state.dynamics.for_process(label)
        moved = value + _contribution(dyn, state.element_states, value)
        lo, hi = dyn.clamp
        new_outcomes[label] = min(max(moved, lo), hi)
    return state._replace(cycle=state.cycle + 1, outcomes=new_outcomes)


def set_state(state: SimState, tag: str, new_state: float) -> SimState:
    """Switch one element; outcomes do not move until the next step."""
    if tag not in state.element_states:
        raise errors.StateOutsideDomain(f"unknown element {tag!r}")
    domain = state.domains.get(tag)
    if domain and float(new_state) not in domain:
        raise errors.StateOutsideDomain(
            f"{tag}: state {new_state!r} is outside domain {sorted(domain)}"
        )
    new_elements = dict(state.element_states)
    new_elements[tag] = new_state
    return state._replace(element_states=new_elements)


def run_until(
    state: SimState,
    predicate: Callable[[SimState], bool],
    max_cycles: int,
) -> tuple[SimState, dict[str, list[float]], bool]:
    """Step until the predicate holds or the cycle budget runs out.

    Returns the final state, the ordered per-process outcome traces, and a
    truncation flag.  A predicate that holds before any step yields the
    initial outcomes as single-entry traces.
    """
    if max_cycles < 1:
        raise ValueError("max_cycles must be >= 1")
    traces: dict[str, list[float]] = {label: [] for label in state.outcomes}
    if predicate(state):
        for label, value in state.outcomes.items():
            traces[label].append(value)
        return state, traces, False
    truncated = True
    for _ in range(max_cycles):
        state = step(state)
        for label, value in state.outcomes.items():
            traces[label].append(value)
        if predicate(state):
            truncated = False
            break
    return state, traces, truncated


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def outcomes_csv(rows: Iterable[tuple[int, str, float]]) -> str:
    lines = ["cycle,process,outcome"]
    for cycle, process, outcome in rows:
        lines.append(f"{cycle},{process},{outcome}")
    return "\n".join(lines) + "\n"


def states_arff(
    relation: str,
    tags: list[str],
    rows: Iterable[tuple[int, Mapping[str, float]]],
) -> str:
    """Element-state report in ARFF shape, one row per sampling interval."""
    lines = [f"@RELATION {relation}", ""]
    lines.append("@ATTRIBUTE cycle NUMERIC")
    for tag in tags:
        safe = tag.replace(" ", "_")
        lines.append(f"@ATTRIBUTE {safe} NUMERIC")
    lines += ["", "@DATA"]
    for cycle, states in rows:
        lines.append(",".join([str(cycle)] + [str(states.get(t, "")) for t in tags]))
    return "\n".join(lines) + "\n"
