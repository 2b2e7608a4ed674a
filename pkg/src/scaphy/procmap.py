"""Process identification, dependency tracing and the dependency/impact graph.

Pipeline order: :func:`partition_elements` splits the element pool into
terminal and non-terminal sets (one process per terminal), then
:func:`trace_dependencies` walks the statement list from each terminal to
collect its ordered dependency paths, :func:`find_ptp` links processes that
share transfer elements, and :func:`build_pdig` assembles the graph.

Construction is single threaded; the resulting objects are immutable and safe
to share read-only.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

from .ingest import Element, Role, StlProgram

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProcessSpec:
    """One physical process: goal element, its sensor, and traced dependencies.

    ``paths`` holds the ordered dependency paths; ``dep`` is their union with
    first-occurrence order preserved; ``ordering`` holds the directed
    precedence pairs extracted from path order (used for out-of-order signal
    detection, nothing else).
    """

    id: str
    sensor: Element
    terminal: Element
    paths: tuple[tuple[str, ...], ...] = ()
    dep: tuple[str, ...] = ()
    ordering: tuple[tuple[str, str], ...] = ()

    @property
    def terminal_tag(self) -> str:
        return self.terminal.raw_tag

    @property
    def sensor_tag(self) -> str:
        return self.sensor.raw_tag


@dataclass(frozen=True)
class PtpLink:
    """A transfer element: terminal of the sink process, dependency of the
    source.  Switching it makes the sink outcome assume the source's value."""

    element: str
    source_process: str
    sink_process: str


@dataclass(frozen=True)
class PdigNode:
    tag: str
    role: Role
    states: tuple[float, ...]
    # (process id, state) -> signed impact coefficient; populated by the
    # impact stage, empty until then.
    impact: tuple[tuple[str, float, float], ...] = ()


@dataclass(frozen=True)
class PdigEdge:
    a: str
    b: str
    kind: str  # "process" | "element"
    directed: bool = False


@dataclass(frozen=True)
class Pdig:
    nodes: dict[str, PdigNode] = field(default_factory=dict)
    edges: tuple[PdigEdge, ...] = ()
    ptp: tuple[PtpLink, ...] = ()

    def node_count(self) -> int:
        return len(self.nodes)


def partition_elements(
    elements: list[Element], tuples
) -> tuple[list[Element], list[Element], list[ProcessSpec]]:
    """Split elements into terminal/non-terminal sets and mint process stubs.

    The two sets are disjoint, their union covers the pool, and the terminal
    count equals the process count.  An element named terminal by two tuples
    is reported and both processes are kept.
    """
    terminal_tags: dict[str, str] = {}
    stubs: list[ProcessSpec] = []
    for i, t in enumerate(tuples):
        label = t.process_label or f"proc-{t.terminal.raw_tag}"
        if t.terminal.raw_tag in terminal_tags:
            log.warning(
                "terminal collision: %s is the terminal of both %s and %s; keeping both",
                t.terminal.raw_tag,
                terminal_tags[t.terminal.raw_tag],
                label,
            )
        terminal_tags.setdefault(t.terminal.raw_tag, label)
        stubs.append(
            ProcessSpec(
                id=label,
                sensor=t.sensor.with_role(Role.NONTERMINAL),
                terminal=t.terminal.with_role(Role.TERMINAL),
            )
        )

    e_term: list[Element] = []
    e_nterm: list[Element] = []
    for el in elements:
        if el.raw_tag in terminal_tags:
            e_term.append(el.with_role(Role.TERMINAL))
        else:
            e_nterm.append(el.with_role(Role.NONTERMINAL))
    return e_term, e_nterm, stubs


def trace_dependencies(
    stub: ProcessSpec,
    stl: StlProgram,
    other_terminals: frozenset[str] = frozenset(),
) -> ProcessSpec:
    """Trace the statement list from the process terminal into dependency paths.

    Each network storing the terminal seeds one path.  Operands are appended
    in statement order; an operand that is itself a store target of other
    networks is expanded depth-first in place.  Expansion stops at elements
    that are terminals of other processes (their upstream machinery belongs to
    that process) and at already-visited store targets, so control loops
    terminate.  Precedence pairs are the consecutive pairs along each path,
    deduplicated across paths.
    """
    terminal = stub.terminal_tag
    seed_networks = stl.networks_storing(terminal)
    if not seed_networks:
        log.warning("process %s: no network stores terminal %s", stub.id, terminal)
        return replace(stub, paths=(), dep=(), ordering=())

    paths: list[tuple[str, ...]] = []
    for net in seed_networks:
        path: list[str] = []

        def expand(network) -> None:
            for operand in network.operands:
                if operand == terminal:
                    continue  # the goal element never depends on itself
                if operand in path:
                    continue  # re-encountered store target: loop, stop branch
                path.append(operand)
                if operand in other_terminals:
                    continue  # process boundary: do not trace through
                for sub in stl.networks_storing(operand):
                    expand(sub)

        expand(net)
        if path:
            paths.append(tuple(path))

    dep: list[str] = []
    for path in paths:
        for tag in path:
            if tag not in dep:
                dep.append(tag)

    ordering: list[tuple[str, str]] = []
    for path in paths:
        for a, b in zip(path, path[1:]):
            if (a, b) not in ordering:
                ordering.append((a, b))

    return replace(stub, paths=tuple(paths), dep=tuple(dep), ordering=tuple(ordering))


def find_ptp(processes: list[ProcessSpec]) -> list[PtpLink]:
    """Link processes through shared transfer elements.

    An element that is the terminal of one process and a dependency member of
    another becomes a transfer point; the dependent process is the source, the
    owning process the sink.
    """
    links: list[PtpLink] = []
    for sink in processes:
        for source in processes:
            if source.id == sink.id:
                continue
            if sink.terminal_tag in source.dep:
                links.append(
                    PtpLink(
                        element=sink.terminal_tag,
                        source_process=source.id,
                        sink_process=sink.id,
                    )
                )
    # An element must not be both source-side and sink-side for one pair.
    by_pair: dict[tuple[str, str, str], int] = {}
    for link in links:
        key = (link.element, *sorted((link.source_process, link.sink_process)))
        by_pair[key] = by_pair.get(key, 0) + 1
        if by_pair[key] > 1:
            raise AssertionError(f"transfer element {link.element} is two-sided for {key[1:]}")
    return links


def build_pdig(
    processes: list[ProcessSpec],
    ptp_links: list[PtpLink],
    elements: list[Element],
) -> Pdig:
    """Assemble the graph: process edges link each terminal to its dependency
    members, directed element edges carry precedence, undirected element edges
    join co-path members without an ordering constraint."""
    by_tag = {el.raw_tag: el for el in elements}
    terminal_tags = {p.terminal_tag for p in processes}

    nodes: dict[str, PdigNode] = {}

    def ensure_node(tag: str) -> None:
        if tag in nodes:
            return
        el = by_tag[tag]
        role = Role.TERMINAL if tag in terminal_tags else Role.NONTERMINAL
        nodes[tag] = PdigNode(tag=tag, role=role, states=tuple(el.tag.state_domain))

    edges: list[PdigEdge] = []
    seen_edges: set[tuple[str, str, str, bool]] = set()

    def add_edge(a: str, b: str, kind: str, directed: bool) -> None:
        if a == b:
            return
        key = (a, b, kind, directed) if directed else (*sorted((a, b)), kind, directed)
        if key in seen_edges:
            return
        seen_edges.add(key)
        edges.append(PdigEdge(a=a, b=b, kind=kind, directed=directed))

    for proc in processes:
        ensure_node(proc.terminal_tag)
        for tag in proc.dep:
            ensure_node(tag)
            add_edge(proc.terminal_tag, tag, "process", directed=False)
        ordered = set(proc.ordering)
        for a, b in proc.ordering:
            add_edge(a, b, "element", directed=True)
        for path in proc.paths:
            for i, a in enumerate(path):
                for b in path[i + 1 :]:
                    if (a, b) not in ordered and (b, a) not in ordered:
                        add_edge(a, b, "element", directed=False)

    return Pdig(nodes=nodes, edges=tuple(edges), ptp=tuple(ptp_links))


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def pdig_to_json(pdig: Pdig) -> str:
    doc = {
        "nodes": [
            {
                "tag": n.tag,
                "role": n.role.value,
                "states": list(n.states),
                **(
                    {"impact": [{"process": p, "state": s, "value": v} for p, s, v in n.impact]}
                    if n.impact
                    else {}
                ),
            }
            for n in pdig.nodes.values()
        ],
        "edges": [
            {"a": e.a, "b": e.b, "kind": e.kind, "directed": e.directed} for e in pdig.edges
        ],
        "ptp": [
            {"element": l.element, "source": l.source_process, "sink": l.sink_process}
            for l in pdig.ptp
        ],
    }
    return json.dumps(doc, indent=2)


def pdig_to_dot(pdig: Pdig) -> str:
    lines = ["digraph pdig {"]
    for n in pdig.nodes.values():
        shape = "doublecircle" if n.role is Role.TERMINAL else "ellipse"
        lines.append(f'  "{n.tag}" [shape={shape}];')
    for e in pdig.edges:
        arrow = "->" if e.directed else "-> "
        style = "solid" if e.kind == "process" else "dashed"
        attrs = f'[style={style}{"" if e.directed else ", dir=none"}]'
        lines.append(f'  "{e.a}" {arrow.strip()} "{e.b}" {attrs};')
    for l in pdig.ptp:
        lines.append(f'  "{l.element}" [color=red, label="{l.element}\\n(transfer)"];')
    lines.append("}")
    return "\n".join(lines)


def processes_to_json(processes: list[ProcessSpec]) -> str:
    doc = [
        {
            "id": p.id,
            "sensor": p.sensor_tag,
            "terminal": p.terminal_tag,
            "paths": [list(path) for path in p.paths],
            "dep": list(p.dep),
            "ordering": [list(pair) for pair in p.ordering],
        }
        for p in processes
    ]
    return json.dumps(doc, indent=2)
