"""Impact-coefficient derivation and the per-scenario impact profile.

Each dependency element state gets a signed coefficient in [-1, 1] describing
how hard, and in which direction, holding that state drives its process
outcome.  The derivation switches one state at a time in the simulator,
always restarting from the same initial configuration, and accumulates one
"slice" per scan cycle: the outcome change divided by the distance from the
boundary outcome (the clamp bound in the direction of first movement, then
the running extremum).  The coefficient is the accumulated slice sum averaged
over cycles; derivation stops once successive coefficients change by less
than the steady-state threshold, or at the cycle budget.

Two equivalent forms are exposed: the cycle-by-cycle accumulator used against
a live simulation, and an instantaneous form over a recorded outcome trace.
They agree to floating-point noise by construction and the tests hold them to
1e-9.

Derivations for different (element, state) pairs are independent; they may
run in parallel, each owning a private simulator state.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from . import errors, sim
from .ingest import DynamicsModel, Element
from .procmap import Pdig, PdigNode, ProcessSpec

log = logging.getLogger(__name__)

DIVISION_GUARD_EPS = 1e-12
DEFAULT_STEADY_EPS = 0.01
DEFAULT_CYCLE_MAX = 10_000
DEFAULT_PRUNE_THRESHOLD = 0.01


class IcAccumulator:
    """Streaming impact accumulation over successive process outcomes.

    Feed the initial outcome via :meth:`start`, then one outcome per scan
    cycle.  The boundary outcome is fixed to the clamp bound on the side of
    the first movement and then tracked toward the observed extremum; a cycle
    whose remaining headroom is below the division guard contributes a zero
    slice (the process cannot move further, so its marginal impact is zero).
    """

    def __init__(self, clamp: tuple[float, float], steady_eps: float = DEFAULT_STEADY_EPS):
        self.clamp = clamp
        self.steady_eps = steady_eps
        self.psi: float | None = None
        self.direction = 0
        self.aggregate = 0.0
        self.cycles = 0
        self.prev_outcome: float | None = None
        self.prev_ic: float | None = None
        self.ic = 0.0
        self.steady = False
        self.steady_cycle: int | None = None
        self.boundary_reached = False
        self.psi_schedule: list[float] = []
        self.ic_history: list[float] = []

    def start(self, initial_outcome: float) -> None:
        self.prev_outcome = initial_outcome

    def feed(self, outcome: float) -> float:
        if self.prev_outcome is None:
            raise RuntimeError("feed() before start()")
        if self.psi is None:
            delta = outcome - self.prev_outcome
            if delta > 0:
                self.direction, self.psi = 1, self.clamp[1]
            elif delta < 0:
                self.direction, self.psi = -1, self.clamp[0]
            else:
                # No movement yet; the bound is arbitrary since slices are 0.
                self.direction, self.psi = 0, self.clamp[1]
        denom = abs(self.psi - self.prev_outcome)
        if denom < DIVISION_GUARD_EPS:
            slice_value = 0.0
        else:
            slice_value = (outcome - self.prev_outcome) / denom
        if abs(slice_value) > 1.0 + 1e-9:
            raise errors.ImpactBoundError(
                f"slice {slice_value:.6f} exceeds magnitude 1 "
                f"(outcome {self.prev_outcome} -> {outcome}, boundary {self.psi})"
            )
        self.psi_schedule.append(self.psi)
        self.aggregate += slice_value
        self.cycles += 1
        self.ic = self.aggregate / self.cycles
        self.ic_history.append(self.ic)
        if (
            not self.steady
            and self.prev_ic is not None
            and abs(self.ic - self.prev_ic) < self.steady_eps
        ):
            self.steady = True
            self.steady_cycle = self.cycles
        self.prev_ic = self.ic
        if self.direction > 0:
            self.psi = max(self.psi, outcome)
        elif self.direction < 0:
            self.psi = min(self.psi, outcome)
        if self.direction != 0 and abs(self.psi - outcome) < DIVISION_GUARD_EPS:
            # The process sits on the boundary outcome; it cannot move
            # further, so continuing would only dilute the average.
            self.boundary_reached = True
        self.prev_outcome = outcome
        return self.ic


@dataclass(frozen=True)
class IcResult:
    ic: float
    initial: float
    trace: tuple[float, ...]
    psi_schedule: tuple[float, ...]
    steady: bool
    steady_cycle: int | None


def derive_ic(
    tag: str,
    state_value: float,
    process: str,
    base_state: sim.SimState,
    *,
    steady_eps: float = DEFAULT_STEADY_EPS,
    cycle_max: int = DEFAULT_CYCLE_MAX,
) -> IcResult:
    """Switch one element state and evaluate its impact on one process."""
    dyn = base_state.dynamics.for_process(process)
    switched = sim.set_state(base_state, tag, state_value)
    acc = IcAccumulator(dyn.clamp, steady_eps)
    acc.start(switched.outcomes[process])
    trace: list[float] = []
    current = switched
    for _ in range(cycle_max):
        current = sim.step(current)
        outcome = current.outcomes[process]
        trace.append(outcome)
        acc.feed(outcome)
        if acc.steady or acc.boundary_reached:
            break
    if not acc.steady and not acc.boundary_reached:
        log.warning(
            "derivation %s=%s on %s hit the %d-cycle budget before steady state",
            tag,
            state_value,
            process,
            cycle_max,
        )
    return IcResult(
        ic=acc.ic,
        initial=switched.outcomes[process],
        trace=tuple(trace),
        psi_schedule=tuple(acc.psi_schedule),
        steady=acc.steady,
        steady_cycle=acc.steady_cycle,
    )


def replay_trace(
    outcomes: Sequence[float],
    clamp: tuple[float, float],
    *,
    steady_eps: float = DEFAULT_STEADY_EPS,
) -> IcAccumulator:
    """Run the accumulator over a recorded trace (first entry is the initial
    outcome) and return it for inspection."""
    if len(outcomes) < 2:
        raise ValueError("trace needs the initial outcome plus at least one cycle")
    acc = IcAccumulator(clamp, steady_eps)
    acc.start(outcomes[0])
    for value in outcomes[1:]:
        acc.feed(value)
    return acc


def derive_ic_instantaneous(
    outcomes: Sequence[float],
    psi_schedule: Sequence[float],
) -> float:
    """Instantaneous coefficient from a recorded trace and boundary schedule.

    ``outcomes[0]`` is the initial outcome; ``psi_schedule[i]`` is the
    boundary used for the transition into ``outcomes[i + 1]``.  The cumulative
    slice sum grows linearly through the cycles, so its per-cycle slope equals
    the iterative coefficient at the trace end.
    """
    if len(outcomes) < 2:
        raise ValueError("trace needs the initial outcome plus at least one cycle")
    transitions = len(outcomes) - 1
    if len(psi_schedule) != transitions:
        raise ValueError("psi schedule must cover every transition")
    aggregate = 0.0
    for i in range(transitions):
        prev, curr = outcomes[i], outcomes[i + 1]
        denom = abs(psi_schedule[i] - prev)
        aggregate += 0.0 if denom < DIVISION_GUARD_EPS else (curr - prev) / denom
    return aggregate / transitions


# ---------------------------------------------------------------------------
# Profile assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImpactProfile:
    """Signed impact coefficients, per-element maxima, learned outcome bounds
    and the pruned element set for one scenario."""

    ic: dict[tuple[str, str, float], float]  # (process, tag, state) -> value
    ic_max: dict[tuple[str, str], float]  # (process, tag) -> max |value|
    bounds: dict[str, tuple[float, float]]  # process -> [lowest, highest]
    pruned: frozenset[str]

    def ic_for(self, tag: str, state: float, process: str | None = None) -> float | None:
        """Strict per-process lookup, falling back to the strongest value any
        process derived for this state."""
        if process is not None:
            value = self.ic.get((process, tag, float(state)))
            if value is not None:
                return value
        candidates = [v for (p, t, s), v in self.ic.items() if t == tag and s == float(state)]
        if not candidates:
            return None
        return max(candidates, key=abs)

    def ic_max_for(self, tag: str, process: str | None = None) -> float | None:
        if process is not None:
            value = self.ic_max.get((process, tag))
            if value is not None:
                return value
        candidates = [v for (p, t), v in self.ic_max.items() if t == tag]
        if not candidates:
            return None
        return max(candidates)

    def dep_denominator(self, process_dep: Iterable[str], process: str) -> float:
        return sum(self.ic_max.get((process, tag), 0.0) for tag in process_dep)


def build_profile(
    pdig: Pdig,
    processes: list[ProcessSpec],
    elements: list[Element],
    dynamics: DynamicsModel,
    *,
    steady_eps: float = DEFAULT_STEADY_EPS,
    cycle_max: int = DEFAULT_CYCLE_MAX,
    prune_threshold: float = DEFAULT_PRUNE_THRESHOLD,
) -> tuple[ImpactProfile, Pdig]:
    """Derive coefficients for every (dependency element, state) per process,
    learn outcome bounds, prune non-impactful elements and annotate the graph.

    Every derivation restarts from the identical initial configuration; the
    reset discipline is enforced with a state digest.
    """
    by_tag = {el.raw_tag: el for el in elements}
    reference = sim.initial_state(elements, dynamics)
    reference_fp = reference.fingerprint()

    ic: dict[tuple[str, str, float], float] = {}
    bounds: dict[str, tuple[float, float]] = {}

    for proc in processes:
        try:
            dyn = dynamics.for_process(proc.id)
        except errors.MissingDynamics:
            log.warning("process %s has no dynamics; impact derivation skipped", proc.id)
            continue
        low = high = dyn.initial
        for tag in proc.dep:
            element = by_tag[tag]
            if element.domain_flagged:
                log.warning("element %s has no enumerable states; skipped", tag)
                continue
            for state in element.tag.state_domain:
                base = sim.initial_state(elements, dynamics)
                if base.fingerprint() != reference_fp:
                    raise AssertionError("derivation must start from the shared initial state")
                result = derive_ic(
                    tag,
                    state,
                    proc.id,
                    base,
                    steady_eps=steady_eps,
                    cycle_max=cycle_max,
                )
                ic[(proc.id, tag, float(state))] = result.ic
                observed = (result.initial, *result.trace)
                low = min(low, min(observed))
                high = max(high, max(observed))
        bounds[proc.id] = (low, high)

    ic_max: dict[tuple[str, str], float] = {}
    for (pid, tag, _state), value in ic.items():
        key = (pid, tag)
        ic_max[key] = max(ic_max.get(key, 0.0), abs(value))

    derived_tags = {tag for (_pid, tag) in ic_max}
    pruned = frozenset(
        tag
        for tag in derived_tags
        if max(v for (p, t), v in ic_max.items() if t == tag) < prune_threshold
    )

    annotated = _annotate(pdig, ic, pruned)
    profile = ImpactProfile(ic=ic, ic_max=ic_max, bounds=bounds, pruned=pruned)
    return profile, annotated


def _annotate(
    pdig: Pdig,
    ic: dict[tuple[str, str, float], float],
    pruned: frozenset[str],
) -> Pdig:
    nodes: dict[str, PdigNode] = {}
    for tag, node in pdig.nodes.items():
        if tag in pruned:
            continue
        impact = tuple(
            (pid, state, value) for (pid, t, state), value in sorted(ic.items()) if t == tag
        )
        nodes[tag] = replace(node, impact=impact)
    edges = tuple(e for e in pdig.edges if e.a not in pruned and e.b not in pruned)
    ptp = tuple(l for l in pdig.ptp if l.element not in pruned)
    return Pdig(nodes=nodes, edges=edges, ptp=ptp)


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

def profile_to_json(profile: ImpactProfile) -> str:
    doc = {
        "ic": [
            {"process": p, "tag": t, "state": s, "value": v}
            for (p, t, s), v in sorted(profile.ic.items())
        ],
        "ic_max": [
            {"process": p, "tag": t, "value": v} for (p, t), v in sorted(profile.ic_max.items())
        ],
        "bounds": {pid: [lo, hi] for pid, (lo, hi) in sorted(profile.bounds.items())},
        "pruned": sorted(profile.pruned),
    }
    return json.dumps(doc, indent=2)


def profile_from_json(text: str) -> ImpactProfile:
    doc = json.loads(text)
    return ImpactProfile(
        ic={
            (e["process"], e["tag"], float(e["state"])): float(e["value"]) for e in doc["ic"]
        },
        ic_max={(e["process"], e["tag"]): float(e["value"]) for e in doc["ic_max"]},
        bounds={pid: (float(b[0]), float(b[1])) for pid, b in doc["bounds"].items()},
        pruned=frozenset(doc["pruned"]),
    )
