import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetmarl.errors import ContractError
from hetmarl.graph import StateGraph
from hetmarl.replay import PRIORITY_FLOOR, PrioritizedReplay, SumTree, Transition

G = StateGraph.build([0], [np.zeros(1)], [], [0])


def tr(tag: int = 0) -> Transition:
    return Transition(G, {0: tag}, G, {0: float(tag)}, False, {0: np.ones(2, bool)})


def filled(n: int, capacity: int = 64, alpha: float = 0.6) -> PrioritizedReplay:
    buf = PrioritizedReplay(capacity, alpha)
    for i in range(n):
        buf.push(tr(i))
    return buf


def test_transition_checks_agent_keys():
    with pytest.raises(ContractError):
        Transition(G, {1: 0}, G, {0: 0.0}, False, {})


def test_push_into_empty_buffer_gets_priority_one():
    buf = filled(1)
    assert buf.raw[0] == 1.0


def test_push_uses_current_max_priority():
    buf = filled(2)
    buf.update_priorities([0], [5.0 - PRIORITY_FLOOR])
    buf.push(tr(2))
    assert buf.raw[2] == pytest.approx(5.0)


def test_ring_overwrites_oldest():
    buf = filled(5, capacity=4)
    assert len(buf) == 4
    assert buf.items[0].actions == {0: 4}
    assert buf.ids[0] == 4


def test_stale_ids_are_skipped():
    buf = filled(5, capacity=4)
    buf.update_priorities([0], [9.0])  # id 0 was overwritten by id 4
    assert buf.raw[0] == 1.0


def test_equal_priorities_sample_uniformly_with_unit_weights():
    buf = filled(8)
    np.testing.assert_allclose(buf.probabilities(), 1 / 8)
    _, w, _ = buf.sample(8, 0.6, 0.4, np.random.default_rng(0))
    np.testing.assert_allclose(w, 1.0)


def test_probabilities_alpha_one():
    buf = filled(2, alpha=1.0)
    buf.update_priorities([0, 1], [1.0 - PRIORITY_FLOOR, 3.0 - PRIORITY_FLOOR])
    np.testing.assert_allclose(buf.probabilities(), [0.25, 0.75])


def test_frequencies_alpha_point_six():
    buf = filled(2)
    buf.update_priorities([0, 1], [1.0 - PRIORITY_FLOOR, 3.0 - PRIORITY_FLOOR])
    expected = np.array([1.0, 3.0 ** 0.6]) / (1.0 + 3.0 ** 0.6)
    np.testing.assert_allclose(buf.probabilities(), expected, rtol=1e-9)
    rng = np.random.default_rng(0)
    counts = np.zeros(2)
    for _ in range(100_000 // 2):
        _, _, ids = buf.sample(2, 0.6, 0.4, rng)
        np.add.at(counts, ids, 1)
    freq = counts / counts.sum()
    assert np.all(np.abs(freq - [0.341, 0.659]) <= 0.01)


def test_importance_weights_are_normalized():
    buf = filled(16)
    rng = np.random.default_rng(1)
    buf.update_priorities(range(16), rng.uniform(0, 4, 16))
    _, w, ids = buf.sample(8, 0.6, 0.4, rng)
    probs = buf.probabilities()[ids]
    raw = (16 * probs) ** -0.4
    np.testing.assert_allclose(w, raw / raw.max())
    assert w.max() == 1.0


def test_empty_buffer_sample_is_rejected():
    with pytest.raises(ContractError):
        PrioritizedReplay(4).sample(1)


def test_priority_floor_and_absolute_value():
    buf = filled(3)
    buf.update_priorities([0, 1, 2], [0.0, 2.0, -2.0])
    assert buf.raw[0] == PRIORITY_FLOOR
    assert buf.raw[1] == buf.raw[2] == 2.0 + PRIORITY_FLOOR


def test_changing_alpha_reweights_tree():
    buf = filled(2)
    buf.update_priorities([0, 1], [1.0 - PRIORITY_FLOOR, 3.0 - PRIORITY_FLOOR])
    buf.sample(2, alpha=1.0, rng=np.random.default_rng(0))
    np.testing.assert_allclose(buf.probabilities(), [0.25, 0.75])


def test_sumtree_find_locates_mass():
    t = SumTree(4)
    for i, v in enumerate([1.0, 0.0, 2.0, 1.0]):
        t.update(i, v)
    assert t.total == 4.0
    np.testing.assert_array_equal(t.find(np.array([0.0, 0.99, 1.0, 2.5, 3.5])), [0, 0, 2, 2, 3])


def test_sumtree_root_tracks_flat_oracle_over_long_sequence():
    rng = np.random.default_rng(0)
    buf = PrioritizedReplay(300, alpha=0.6)
    for _ in range(10_000):
        if len(buf) < 2 or rng.random() < 0.5:
            buf.push(tr())
        else:
            ids = rng.integers(max(0, buf.pushed - 300), buf.pushed, size=3)
            buf.update_priorities(ids, rng.exponential(2.0, size=3))
    oracle = np.sum(buf.raw[:len(buf)] ** 0.6)
    assert abs(buf.tree.total - oracle) <= 1e-5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 50), st.floats(0, 100)), max_size=80))
def test_sumtree_invariant_random_operations(ops):
    buf = PrioritizedReplay(16, alpha=0.6)
    for is_push, k, d in ops:
        if is_push or not len(buf):
            buf.push(tr())
        else:
            buf.update_priorities([k % buf.pushed], [d])
    nodes = buf.tree.nodes
    cap = buf.tree.capacity
    for i in range(1, cap):
        assert nodes[i] == nodes[2 * i] + nodes[2 * i + 1]
    assert abs(buf.tree.total - np.sum(buf.raw[:len(buf)] ** 0.6)) <= 1e-5
