"""Directed labeled state graphs over heterogeneous node classes.

Every node belongs to a class that fixes its feature width; agent classes
additionally own an action set. Arcs always point into a live agent and are
labeled with the relation ``(class of target agent, class of source)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError


@dataclass(frozen=True)
class NodeClass:
    name: str
    feature_width: int
    is_agent: bool
    action_count: int = 0


@dataclass(frozen=True)
class ClassTable:
    classes: tuple[NodeClass, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        for c in self.classes:
            if (c.action_count > 0) != c.is_agent:
                raise ConfigError(f"class {c.name!r}: action_count > 0 iff is_agent")
            if c.feature_width < 1:
                raise ConfigError(f"class {c.name!r}: feature_width must be positive")

    def __len__(self) -> int:
        return len(self.classes)

    def __getitem__(self, i: int) -> NodeClass:
        return self.classes[i]

    @property
    def agent_classes(self) -> list[int]:
        return [i for i, c in enumerate(self.classes) if c.is_agent]

    def index(self, name: str) -> int:
        for i, c in enumerate(self.classes):
            if c.name == name:
                return i
        raise KeyError(name)


def build_relations(table: ClassTable) -> dict[tuple[int, int], int]:
    """Map (agent class, node class) to a relation id, agent class major."""
    agents = table.agent_classes
    if not agents:
        raise ConfigError("class table has no agent classes")
    rel = {}
    for n in agents:
        for m in range(len(table)):
            rel[(n, m)] = len(rel)
    return rel


@dataclass(frozen=True, eq=False)
class StateGraph:
    """Immutable graph; node ``i`` has class ``node_classes[i]``.

    ``arcs`` is an ``(E, 3)`` integer array of ``(source, target, relation)``.
    """
    node_classes: np.ndarray
    features: tuple[np.ndarray, ...]
    arcs: np.ndarray
    agent_ids: tuple[int, ...]

    @classmethod
    def build(cls, node_classes: Sequence[int], features: Iterable[Sequence[float]],
              arcs: Iterable[Sequence[int]], agent_ids: Iterable[int]) -> "StateGraph":
        arcs = np.asarray(list(arcs), dtype=np.int64).reshape(-1, 3)
        return cls(np.asarray(node_classes, dtype=np.int64),
                   tuple(np.asarray(f, dtype=np.float32) for f in features),
                   arcs, tuple(int(a) for a in agent_ids))

    @property
    def num_nodes(self) -> int:
        return len(self.node_classes)

    @property
    def num_arcs(self) -> int:
        return len(self.arcs)

    def __eq__(self, other) -> bool:
        if not isinstance(other, StateGraph):
            return NotImplemented
        return (np.array_equal(self.node_classes, other.node_classes)
                and len(self.features) == len(other.features)
                and all(np.array_equal(a, b) for a, b in zip(self.features, other.features))
                and np.array_equal(self.arcs, other.arcs)
                and self.agent_ids == other.agent_ids)

    def permuted(self, perm: Sequence[int]) -> "StateGraph":
        """Relabel node ``i`` as ``perm[i]``; arcs are rewritten to match."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        arcs = self.arcs.copy()
        if len(arcs):
            arcs[:, 0] = perm[arcs[:, 0]]
            arcs[:, 1] = perm[arcs[:, 1]]
        return StateGraph(self.node_classes[inv], tuple(self.features[i] for i in inv),
                          arcs, tuple(int(perm[a]) for a in self.agent_ids))


def in_neighbors(g: StateGraph, node: int, relation: int) -> list[int]:
    if not 0 <= node < g.num_nodes:
        raise KeyError(f"unknown node id {node}")
    a = g.arcs
    hit = (a[:, 1] == node) & (a[:, 2] == relation)
    return [int(s) for s in a[hit, 0]]


def validate(g: StateGraph, table: ClassTable) -> list[str]:
    """All invariant violations of ``g``; an empty list means the graph is valid."""
    problems = []
    n = g.num_nodes
    if not g.agent_ids:
        problems.append("no agent nodes")
    if len(g.features) != n:
        problems.append(f"{len(g.features)} feature vectors for {n} nodes")
    for i, c in enumerate(g.node_classes):
        if not 0 <= c < len(table):
            problems.append(f"node {i}: class id {c} out of range")
            continue
        if i < len(g.features) and g.features[i].shape != (table[c].feature_width,):
            problems.append(f"node {i}: feature length {g.features[i].size}, "
                            f"class {table[c].name!r} expects {table[c].feature_width}")
    agents = set()
    for a in g.agent_ids:
        if not 0 <= a < n:
            problems.append(f"agent id {a} is not a node")
        elif not (0 <= g.node_classes[a] < len(table)) or not table[g.node_classes[a]].is_agent:
            problems.append(f"agent id {a} has a non-agent class")
        if a in agents:
            problems.append(f"agent id {a} listed twice")
        agents.add(a)
    try:
        rel = build_relations(table)
    except ConfigError as exc:
        problems.append(str(exc))
        rel = {}
    seen = set()
    for src, dst, r in g.arcs.tolist():
        tag = f"arc {src}->{dst}"
        if not (0 <= src < n and 0 <= dst < n):
            problems.append(f"{tag}: endpoint is not a node")
            continue
        if src == dst:
            problems.append(f"{tag}: self-loops are not stored as arcs")
        if dst not in agents:
            problems.append(f"{tag}: target is not a live agent")
        expected = rel.get((int(g.node_classes[dst]), int(g.node_classes[src])))
        if expected != r:
            problems.append(f"{tag}: relation {r}, expected {expected}")
        if (src, dst) in seen:
            problems.append(f"{tag}: duplicate arc")
        seen.add((src, dst))
    return problems


def random_graph(table: ClassTable, num_nodes: int, rng: np.random.Generator,
                 arc_prob: float = 0.5) -> StateGraph:
    """A valid graph with random classes, features and arcs into agent nodes.

    At least one node is an agent. Every node of an agent class is live.
    """
    agent_classes = table.agent_classes
    if not agent_classes:
        raise ConfigError("class table has no agent classes")
    classes = rng.integers(len(table), size=num_nodes)
    classes[rng.integers(num_nodes)] = rng.choice(agent_classes)
    agents = [i for i, c in enumerate(classes) if table[c].is_agent]
    rel = build_relations(table)
    arcs = [(j, i, rel[(int(classes[i]), int(classes[j]))])
            for i in agents for j in range(num_nodes)
            if j != i and rng.random() < arc_prob]
    features = [rng.uniform(-1.0, 1.0, table[c].feature_width) for c in classes]
    return StateGraph.build(classes, features, arcs, agents)


def disjoint_union(graphs: Sequence[StateGraph]) -> tuple[StateGraph, np.ndarray]:
    """Batch graphs into one; returns the union and each graph's node offset."""
    sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    arcs = []
    for g, off in zip(graphs, offsets):
        a = g.arcs.copy()
        a[:, :2] += off
        arcs.append(a)
    union = StateGraph(
        np.concatenate([g.node_classes for g in graphs]),
        tuple(f for g in graphs for f in g.features),
        np.concatenate(arcs) if arcs else np.zeros((0, 3), dtype=np.int64),
        tuple(int(a + off) for g, off in zip(graphs, offsets) for a in g.agent_ids),
    )
    return union, offsets


# ---------------------------------------------------------------- text format


def to_text(g: StateGraph) -> str:
    lines = [f"nodes {g.num_nodes} arcs {g.num_arcs}"]
    for i, (c, f) in enumerate(zip(g.node_classes, g.features)):
        vals = " ".join(f"{float(x):.9g}" for x in f)
        lines.append(f"{i} {int(c)} {vals}".rstrip())
    for s, d, r in g.arcs.tolist():
        lines.append(f"{s} {d} {r}")
    lines.append("agents " + " ".join(str(a) for a in g.agent_ids))
    return "\n".join(lines).rstrip() + "\n"


def from_text(text: str, table: ClassTable | None = None) -> StateGraph:
    """Parse ``to_text`` output.

    Without an ``agents`` line, every node of an agent class in ``table`` is
    taken to be a live agent.
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty graph text")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "nodes" or head[2] != "arcs":
        raise FormatError(f"bad header {lines[0]!r}")
    n, m = int(head[1]), int(head[3])
    if len(lines) < 1 + n + m:
        raise FormatError(f"expected {n} node and {m} arc lines")
    classes, feats = [], []
    for k, ln in enumerate(lines[1:1 + n]):
        parts = ln.split()
        if int(parts[0]) != k:
            raise FormatError(f"node line {k} has id {parts[0]}")
        classes.append(int(parts[1]))
        feats.append([float(x) for x in parts[2:]])
    arcs = [[int(x) for x in ln.split()] for ln in lines[1 + n:1 + n + m]]
    rest = lines[1 + n + m:]
    if rest and rest[0].startswith("agents"):
        agents = [int(x) for x in rest[0].split()[1:]]
    elif table is not None:
        agents = [i for i, c in enumerate(classes) if table[c].is_agent]
    else:
        raise FormatError("no agents line and no class table to infer agents from")
    return StateGraph.build(classes, feats, arcs, agents)
