"""Function-call task graphs, ready sets, LPT selection, and the trap rule."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional

from asyncfc.cml import is_identifier


class GraphError(ValueError):
    pass


class CycleFound(GraphError):
    def __init__(self, ids: list[str]):
        self.ids = ids
        super().__init__(f"dependency cycle through {', '.join(ids)}")


class InvalidState(ValueError):
    pass


@dataclass(frozen=True)
class CallNode:
    id: str
    name: str
    body_tokens: int
    exec_ms: float
    deps: frozenset = frozenset()

    def __post_init__(self):
        if not is_identifier(self.id):
            raise GraphError(f"node id {self.id!r} is not an identifier")
        if self.body_tokens < 1:
            raise GraphError(f"{self.id}: body_tokens must be >= 1")
        if not self.exec_ms > 0:
            raise GraphError(f"{self.id}: exec_ms must be > 0")
        if self.id in self.deps:
            raise GraphError(f"{self.id}: depends on itself")
        object.__setattr__(self, "deps", frozenset(self.deps))

    @property
    def body(self) -> str:
        """Call text: dependency results are passed as arguments by id."""
        return f"{self.name}({', '.join(sorted(self.deps))})"

    def gen_ms(self, tpot_ms: float) -> float:
        return self.body_tokens * tpot_ms


@dataclass(frozen=True)
class TaskGraph:
    nodes: Mapping[str, CallNode]
    tpot_ms: float = 5.0
    graph_id: str = "graph"
    description: str = ""

    def __post_init__(self):
        for node in self.nodes.values():
            missing = node.deps - self.nodes.keys()
            if missing:
                raise GraphError(f"{node.id}: unknown deps {sorted(missing)}")

    @classmethod
    def from_nodes(cls, nodes: Iterable[CallNode], **kw) -> "TaskGraph":
        table: dict[str, CallNode] = {}
        for n in nodes:
            if n.id in table:
                raise GraphError(f"duplicate node id {n.id!r}")
            table[n.id] = n
        return cls(table, **kw)

    def __len__(self) -> int:
        return len(self.nodes)

    def ids(self) -> list[str]:
        return sorted(self.nodes)

    def children(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {i: [] for i in self.nodes}
        for n in self.nodes.values():
            for d in n.deps:
                out[d].append(n.id)
        return out

    def components(self) -> list[list[str]]:
        """Weakly connected components, ordered by smallest member id."""
        parent = {i: i for i in self.nodes}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for n in self.nodes.values():
            for d in n.deps:
                parent[find(d)] = find(n.id)
        groups: dict[str, list[str]] = {}
        for i in sorted(self.nodes):
            groups.setdefault(find(i), []).append(i)
        return sorted(groups.values(), key=lambda g: g[0])

    def with_exec(self, exec_ms: Mapping[str, float]) -> "TaskGraph":
        nodes = {i: replace(n, exec_ms=exec_ms.get(i, n.exec_ms)) for i, n in self.nodes.items()}
        return replace(self, nodes=nodes)

    def subgraph(self, ids: Iterable[str]) -> "TaskGraph":
        keep = set(ids)
        nodes = {i: replace(n, deps=n.deps & keep) for i, n in self.nodes.items() if i in keep}
        return replace(self, nodes=nodes)

    def to_json(self) -> dict:
        doc = {"tpot_ms": self.tpot_ms}
        if self.graph_id != "graph":
            doc["graph_id"] = self.graph_id
        if self.description:
            doc["description"] = self.description
        doc["tasks"] = [
            {
                "id": n.id,
                "name": n.name,
                "body_tokens": n.body_tokens,
                "exec_ms": n.exec_ms,
                "deps": sorted(n.deps),
            }
            for n in (self.nodes[i] for i in topological_order(self))
        ]
        return doc


def graph_from_json(doc: Mapping, graph_id: Optional[str] = None) -> TaskGraph:
    """Build a graph from the JSON schema ``{"tpot_ms", "tasks": [...]}``."""
    if not isinstance(doc, Mapping) or "tasks" not in doc:
        raise GraphError("graph document needs a 'tasks' list")
    try:
        nodes = [
            CallNode(
                id=str(t["id"]),
                name=str(t["name"]),
                body_tokens=int(t["body_tokens"]),
                exec_ms=float(t["exec_ms"]),
                deps=frozenset(t.get("deps", ())),
            )
            for t in doc["tasks"]
        ]
    except KeyError as exc:
        raise GraphError(f"task entry missing field {exc}") from None
    g = TaskGraph.from_nodes(
        nodes,
        tpot_ms=float(doc.get("tpot_ms", 5.0)),
        graph_id=str(doc.get("graph_id", graph_id or "graph")),
        description=str(doc.get("description", "")),
    )
    topological_check(g)
    return g


def load_graph(path) -> TaskGraph:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    return graph_from_json(doc, graph_id=path.stem)


# ---------------------------------------------------------------------------
# Session state and policy


@dataclass
class SessionState:
    completed: set = field(default_factory=set)
    in_flight: set = field(default_factory=set)
    pending: set = field(default_factory=set)

    @classmethod
    def initial(cls, graph: TaskGraph) -> "SessionState":
        return cls(set(), set(), set(graph.nodes))

    def check(self, graph: TaskGraph) -> None:
        c, f, p = self.completed, self.in_flight, self.pending
        if c & f or c & p or f & p or (c | f | p) != set(graph.nodes):
            raise InvalidState("completed/in_flight/pending must partition the node ids")

    def dispatch(self, node_id: str) -> None:
        self.pending.remove(node_id)
        self.in_flight.add(node_id)

    def complete(self, node_id: str) -> None:
        self.in_flight.discard(node_id)
        self.pending.discard(node_id)
        self.completed.add(node_id)

    @property
    def done(self) -> bool:
        return not self.pending and not self.in_flight


def ready_set(graph: TaskGraph, state: SessionState) -> set:
    state.check(graph)
    return {i for i in state.pending if graph.nodes[i].deps <= state.completed}


def lpt_key(node: CallNode):
    return (-node.exec_ms, node.id)


def lpt_pick(graph: TaskGraph, candidates: Iterable[str]) -> Optional[str]:
    best = min(candidates, key=lambda i: lpt_key(graph.nodes[i]), default=None)
    return best


def lpt_next(graph: TaskGraph, state: SessionState) -> Optional[str]:
    """Ready node with the longest estimated execution; ties go to the smaller id."""
    return lpt_pick(graph, ready_set(graph, state))


def should_trap(graph: TaskGraph, state: SessionState, has_other_tokens: bool) -> bool:
    """Whether the model must pause: nothing callable, work outstanding, nothing to say.

    Outstanding work counts calls still waiting on dependencies and calls in
    flight; the model cannot finish while it awaits any result.
    """
    if has_other_tokens:
        return False
    if ready_set(graph, state):
        return False
    return bool(state.pending or state.in_flight)


def topological_order(graph: TaskGraph) -> list[str]:
    """Kahn order with lexicographic tie-break; raises :class:`CycleFound`."""
    import heapq

    indeg = {i: len(n.deps) for i, n in graph.nodes.items()}
    kids = graph.children()
    heap = [i for i, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        i = heapq.heappop(heap)
        order.append(i)
        for k in kids[i]:
            indeg[k] -= 1
            if indeg[k] == 0:
                heapq.heappush(heap, k)
    if len(order) != len(graph.nodes):
        raise CycleFound(_find_cycle(graph, set(graph.nodes) - set(order)))
    return order


def _find_cycle(graph: TaskGraph, remaining: set) -> list[str]:
    # every leftover node has a leftover dep; walk deps until a repeat
    start = min(remaining)
    path, seen = [], {}
    node = start
    while node not in seen:
        seen[node] = len(path)
        path.append(node)
        node = min(d for d in graph.nodes[node].deps if d in remaining)
    return sorted(path[seen[node]:])


def topological_check(graph: TaskGraph) -> None:
    topological_order(graph)


def depth_levels(graph: TaskGraph) -> dict[str, int]:
    level: dict[str, int] = {}
    for i in topological_order(graph):
        deps = graph.nodes[i].deps
        level[i] = 1 + max((level[d] for d in deps), default=-1)
    return level
