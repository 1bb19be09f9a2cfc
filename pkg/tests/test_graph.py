import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetmarl.errors import ConfigError, FormatError
from hetmarl.graph import (ClassTable, NodeClass, StateGraph, build_relations, disjoint_union,
                           from_text, in_neighbors, random_graph, to_text, validate)


def table(agents: int, entities: int, width: int = 4) -> ClassTable:
    classes = [NodeClass(f"a{i}", width, True, 3) for i in range(agents)]
    classes += [NodeClass(f"e{i}", width, False) for i in range(entities)]
    return ClassTable(classes)


# three-class fixture: c1 is an entity class, c2 and c3 are agent classes
THREE = ClassTable((NodeClass("c1", 4, False), NodeClass("c2", 5, True, 4),
                   NodeClass("c3", 6, True, 2)))


def three_class_graph() -> StateGraph:
    classes = [0, 0, 1, 1, 2, 2, 0, 1]
    rel = build_relations(THREE)
    pairs = [(0, 2), (1, 2), (3, 2), (4, 5), (6, 5), (2, 5), (0, 4), (7, 4), (5, 4), (2, 7)]
    arcs = [(s, d, rel[(classes[d], classes[s])]) for s, d in pairs]
    feats = [np.arange(THREE[c].feature_width, dtype=float) + i for i, c in enumerate(classes)]
    return StateGraph.build(classes, feats, arcs, [2, 3, 4, 5, 7])


def test_relation_count_is_agents_times_classes():
    assert len(build_relations(table(2, 1))) == 6
    assert len(build_relations(table(1, 0))) == 1


def test_relations_are_agent_major_bijection():
    rel = build_relations(THREE)
    assert sorted(rel.values()) == list(range(6))
    # (agent class, node class) labels in 1-based naming: (2,1) (2,2) (2,3) (3,1) (3,2) (3,3)
    assert list(rel) == [(1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2)]


def test_no_agent_classes_is_a_config_error():
    with pytest.raises(ConfigError):
        build_relations(table(0, 2))


def test_class_table_rejects_agent_without_actions():
    with pytest.raises(ConfigError):
        ClassTable((NodeClass("x", 4, True, 0),))


def test_in_neighbors_reads_arcs():
    g = StateGraph.build([0, 0, 1], [np.zeros(4)] * 2 + [np.zeros(5)],
                         [(0, 2, 1), (1, 2, 1)], [2])
    assert sorted(in_neighbors(g, 2, 1)) == [0, 1]
    assert in_neighbors(g, 0, 1) == []


def test_in_neighbors_unknown_node():
    with pytest.raises(KeyError):
        in_neighbors(three_class_graph(), 99, 0)


def test_in_neighbors_matches_scan_on_fixture():
    g = three_class_graph()
    for node in range(g.num_nodes):
        for r in range(6):
            scan = [s for s, d, rr in g.arcs.tolist() if d == node and rr == r]
            assert in_neighbors(g, node, r) == scan


def test_validate_well_formed_eight_node_graph():
    assert validate(three_class_graph(), THREE) == []


def test_validate_empty_graph():
    g = StateGraph.build([], [], [], [])
    assert "no agent nodes" in validate(g, THREE)


def test_validate_reports_feature_width():
    g = three_class_graph()
    feats = list(g.features)
    feats[3] = np.zeros(2, dtype=np.float32)
    bad = StateGraph(g.node_classes, tuple(feats), g.arcs, g.agent_ids)
    problems = validate(bad, THREE)
    assert any("node 3" in p and "expects 5" in p for p in problems)


def test_validate_reports_every_violation():
    g = three_class_graph()
    arcs = np.vstack([g.arcs, [[2, 2, 4], [2, 0, 0], [0, 2, 0]]])
    bad = StateGraph(g.node_classes, g.features, arcs, g.agent_ids)
    problems = validate(bad, THREE)
    assert any("self-loop" in p for p in problems)
    assert any("not a live agent" in p for p in problems)
    assert any("duplicate" in p for p in problems)
    assert any("relation" in p for p in problems)


def test_permuted_graph_stays_valid():
    g = three_class_graph()
    perm = np.random.default_rng(0).permutation(g.num_nodes)
    h = g.permuted(perm)
    assert validate(h, THREE) == []
    for i in range(g.num_nodes):
        np.testing.assert_array_equal(g.features[i], h.features[perm[i]])


def test_disjoint_union_offsets():
    g = three_class_graph()
    u, offsets = disjoint_union([g, g])
    assert u.num_nodes == 16 and u.num_arcs == 20
    assert list(offsets) == [0, 8]
    assert validate(u, THREE) == []


def test_text_round_trip():
    g = three_class_graph()
    text = to_text(g)
    assert text.splitlines()[0] == "nodes 8 arcs 10"
    assert from_text(text, THREE) == g


def test_text_rejects_truncation():
    text = to_text(three_class_graph())
    with pytest.raises(FormatError):
        from_text("\n".join(text.splitlines()[:5]), THREE)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 9))
def test_random_graphs_are_valid_and_round_trip(seed, n):
    rng = np.random.default_rng(seed)
    g = random_graph(THREE, n, rng)
    assert validate(g, THREE) == []
    assert from_text(to_text(g), THREE) == g
