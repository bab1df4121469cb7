import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alphagfn.graph import (DagGraph, Trajectory, TrajectoryCapExceeded, count_complete_trajectories,
                            dump_dag, enumerate_complete_trajectories, enumerate_subtrajectories,
                            load_dag, merge_terminal, random_pointed_dag, unmerge_edges,
                            validate_pointed)


def two_state():
    return DagGraph.from_edges([(0, 1)], source=0, sink=1)


def test_two_state_chain_is_valid():
    g = two_state()
    assert validate_pointed(g) == []
    trajs = enumerate_complete_trajectories(g)
    assert [t.states for t in trajs] == [(0, 1)]


def test_isolated_state_flagged():
    g = DagGraph.from_edges([(0, 1), (1, 2)], source=0, sink=2, num_states=4)
    kinds = [v.kind for v in validate_pointed(g)]
    assert kinds.count("not_on_complete_trajectory") == 1


def test_cycle_and_degree_violations():
    g = DagGraph.from_edges([(0, 1), (1, 2), (2, 1), (1, 3)], source=0, sink=3)
    assert "cycle" in {v.kind for v in validate_pointed(g)}
    g = DagGraph.from_edges([(0, 1), (1, 2), (2, 3)], source=1, sink=3)
    assert "source_has_parent" in {v.kind for v in validate_pointed(g)}


def test_setgen_graph_valid(tiny_setgen):
    g = tiny_setgen.graph
    assert g.num_states == 8
    assert validate_pointed(g) == []
    assert len(enumerate_complete_trajectories(g)) == 6


def test_diamond_two_trajectories(diamond):
    trajs = enumerate_complete_trajectories(diamond)
    assert [t.states for t in trajs] == [(0, 1, 3, 4), (0, 2, 3, 4)]


def test_cap_exceeded_reports_count(tiny_setgen):
    with pytest.raises(TrajectoryCapExceeded) as info:
        enumerate_complete_trajectories(tiny_setgen.graph, cap=4)
    assert info.value.count > 4


@pytest.mark.parametrize("n_edges, expected", [(1, [(0, 1)]), (3, 6), (4, 10)])
def test_subtrajectory_counts(n_edges, expected):
    g = DagGraph.from_edges([(i, i + 1) for i in range(n_edges)], source=0, sink=n_edges)
    t = enumerate_complete_trajectories(g)[0]
    pairs = enumerate_subtrajectories(t)
    if isinstance(expected, list):
        assert pairs == expected
    else:
        assert len(pairs) == expected
        assert len(set(pairs)) == expected


def test_trajectory_rejects_non_edge(diamond):
    with pytest.raises(ValueError):
        Trajectory.of(diamond, (0, 3))
    with pytest.raises(ValueError):
        Trajectory.of(diamond, (0,))


def test_merge_two_state_self_loop():
    mg = merge_terminal(two_state())
    assert mg.num_states == 1
    assert mg.edges == ((0, 0),)


def test_merge_setgen(tiny_setgen):
    mg = merge_terminal(tiny_setgen.graph)
    assert mg.num_states == 7
    assert sorted(unmerge_edges(mg)) == sorted(tiny_setgen.graph.edges)


def test_dump_load_roundtrip(diamond):
    text = "# fixture\n" + dump_dag(diamond)
    g2 = load_dag(text)
    assert g2.edges == diamond.edges and g2.source == 0 and g2.sink == 4


def test_backward_is_transpose(small_setgen):
    g = small_setgen.graph
    fwd = {(u, int(v)) for u in range(g.num_states) for v in g.children(u)}
    bwd = {(int(p), s) for s in range(g.num_states) for p in g.parents(s)}
    assert fwd == bwd == set(g.edges)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), layers=st.integers(1, 4), skip=st.sampled_from([0.0, 0.3]))
def test_random_dag_properties(seed, layers, skip):
    g = random_pointed_dag(np.random.default_rng(seed), num_layers=layers, width=3, skip_prob=skip)
    assert validate_pointed(g) == []
    trajs = enumerate_complete_trajectories(g)
    assert len(trajs) == count_complete_trajectories(g)
    assert len({t.states for t in trajs}) == len(trajs)
    assert [t.states for t in trajs] == sorted(t.states for t in trajs)
    for t in trajs:
        assert t.is_complete and t.states[0] == g.source and t.states[-1] == g.sink
        assert all(g.has_edge(a, b) for a, b in zip(t.states[:-1], t.states[1:]))
    mg = merge_terminal(g)
    assert mg.num_states == g.num_states - 1
    assert sorted(unmerge_edges(mg)) == sorted(g.edges)
    indeg = g.in_degree()
    assert all(indeg[s] > 0 for s in range(g.num_states) if s != g.source)
