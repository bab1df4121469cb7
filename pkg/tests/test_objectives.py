import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alphagfn.envs import Env, SetGenSpec, build_setgen
from alphagfn.graph import DagGraph, Trajectory, enumerate_complete_trajectories, enumerate_subtrajectories
from alphagfn.model import init_params, policy_tables, tables_from_probabilities
from alphagfn.objectives import (ObjectiveSpec, _TrajectoryTerms, all_edge_db_residuals,
                                 alpha_subtb_residual, batch_loss_and_grads, db_residual,
                                 fl_reparameterize, fl_residual, grad_wrt_pf_slice, slice_weights,
                                 tb_residual, trajectory_loss, vanilla_residual)
from alphagfn.oracle import env_oracle

KINDS = ("DB", "TB", "SubTB_lambda", "FL_DB", "FL_SubTB_lambda")


@pytest.fixture
def diamond_env(diamond):
    # oracle flows with uniform backward: F(a) = F(b) = 0.5, z = 1, P_F(a | s0) = 0.5
    return Env.from_rewards(diamond, {3: 1.0})


@pytest.fixture
def lattice_env():
    # two binary layers: uniform P_F makes the first two steps 0.5 each
    g = DagGraph.from_edges([(0, 1), (0, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 5), (4, 5)],
                            source=0, sink=5)
    return Env.from_rewards(g, {3: 1.0, 4: 2.0})


def test_balanced_edge(diamond_env):
    _, _, t = env_oracle(diamond_env)
    tr = Trajectory.of(diamond_env.graph, (0, 1, 3, 4))
    assert alpha_subtb_residual(t, diamond_env, tr, 0, 1, ObjectiveSpec("DB", 0.5)).value == 0.0
    r = alpha_subtb_residual(t, diamond_env, tr, 0, 1, ObjectiveSpec("DB", 0.9))
    assert r.value == pytest.approx(2.197225, abs=1e-6)
    assert r.loss == pytest.approx(4.827796, abs=1e-6)
    assert r.edge_count == 1 and r.span == (0, 1)


def test_db_residual_by_hand(diamond_env):
    # F(s) = 2, P_F = 0.5, F(s') = 1, P_B = 1
    g = diamond_env.graph
    pf = np.full(g.num_edges, 0.5)
    pf[[g.edge_id(1, 3), g.edge_id(2, 3), g.edge_id(3, 4)]] = 1.0
    lf = np.zeros(g.num_states)
    t = tables_from_probabilities(diamond_env, pf, lf, log_z=math.log(2))
    assert db_residual(t, diamond_env, (0, 1), ObjectiveSpec("DB", 0.5)).value == pytest.approx(0.0, abs=1e-15)
    assert db_residual(t, diamond_env, (0, 1), ObjectiveSpec("DB", 0.8)).value == pytest.approx(math.log(4), abs=1e-12)
    with pytest.raises(KeyError):
        db_residual(t, diamond_env, (0, 3), ObjectiveSpec("DB", 0.8))


def test_tb_on_oracle_flows(tiny_setgen):
    _, _, t = env_oracle(tiny_setgen)
    trajs = enumerate_complete_trajectories(tiny_setgen.graph)
    assert len(trajs) == 6
    for tr in trajs:
        assert abs(tb_residual(t, tiny_setgen, tr, ObjectiveSpec("TB", 0.5)).value) <= 1e-12
        assert tb_residual(t, tiny_setgen, tr, ObjectiveSpec("TB", 0.9)).value == pytest.approx(6.591674, abs=1e-6)
    t.log_z += math.log(2)
    assert tb_residual(t, tiny_setgen, trajs[0], ObjectiveSpec("TB", 0.5)).value == pytest.approx(math.log(2), abs=1e-12)


def test_slice_out_of_range(tiny_setgen):
    p = init_params(tiny_setgen, "tabular")
    tr = enumerate_complete_trajectories(tiny_setgen.graph)[0]
    for i, j in [(1, 1), (2, 1), (0, 4), (-1, 2)]:
        with pytest.raises(IndexError):
            alpha_subtb_residual(p, tiny_setgen, tr, i, j, ObjectiveSpec("SubTB_lambda", 0.5))


def test_lambda_one_two_edge_loss():
    g = DagGraph.from_edges([(0, 1), (1, 2), (0, 3), (3, 2)], source=0, sink=2)
    # states 1 and 3 are terminals; a complete path has two edges
    env = Env.from_rewards(g, {1: 0.7, 3: 0.2})
    p = init_params(env, "tabular", init_scale=1.0, seed=4)
    tr = Trajectory.of(g, (0, 1, 2))
    spec = ObjectiveSpec("SubTB_lambda", 0.5, 1.0)
    r = [alpha_subtb_residual(p, env, tr, i, j, spec).value for i, j in [(0, 1), (1, 2), (0, 2)]]
    assert trajectory_loss(p, env, tr, spec) == pytest.approx(sum(v * v for v in r) / 3, rel=1e-14)


def test_single_edge_trajectory_loss():
    g = DagGraph.from_edges([(0, 1)], source=0, sink=1)
    env = Env.from_rewards(g, {0: 0.3})
    p = init_params(env, "tabular", init_scale=1.0, seed=1)
    tr = Trajectory.of(g, (0, 1))
    for kind in KINDS:
        spec = ObjectiveSpec(kind, 0.3, 1.7)
        r = alpha_subtb_residual(p, env, tr, 0, 1, spec).value
        assert trajectory_loss(p, env, tr, spec) == pytest.approx(r * r, rel=1e-14)


def test_zero_residuals_give_zero_grads(tiny_setgen):
    _, pf, _ = env_oracle(tiny_setgen)
    flows, _, _ = env_oracle(tiny_setgen)
    g = tiny_setgen.graph
    p = init_params(tiny_setgen, "tabular")
    p.arrays["forward_logits"] = np.log(pf)
    p.arrays["log_flow"] = flows.log_flow.copy()
    p.arrays["log_z"] = np.array(math.log(flows.z))
    trajs = enumerate_complete_trajectories(g)
    loss, grads = batch_loss_and_grads(p, tiny_setgen, trajs, ObjectiveSpec("SubTB_lambda", 0.5))
    assert loss <= 1e-28
    assert max(float(np.max(np.abs(v))) for v in grads.values()) <= 1e-13


def test_fl_zero_energy_matches_plain(diamond_env):
    p = init_params(diamond_env, "tabular", init_scale=1.0, seed=9)
    tr = Trajectory.of(diamond_env.graph, (0, 2, 3, 4))
    for i, j in enumerate_subtrajectories(tr):
        if j == tr.num_edges:
            continue  # the sink end differs by convention (log R vs 0)
        a = alpha_subtb_residual(p, diamond_env, tr, i, j, ObjectiveSpec("SubTB_lambda", 0.7)).value
        b = fl_residual(p, diamond_env, tr, i, j, ObjectiveSpec("SubTB_lambda", 0.7)).value
        assert a == b


def test_fl_edge_absorbed_by_reparameterisation(tiny_setgen):
    # inner edges adding an element: energy is absorbed by F~ = F * exp(energy)
    flows, pf, t = env_oracle(tiny_setgen)
    t.log_flow = fl_reparameterize(flows.log_flow, tiny_setgen)
    t.log_flow[tiny_setgen.graph.sink] = t.log_z
    for tr in enumerate_complete_trajectories(tiny_setgen.graph):
        for i, j in enumerate_subtrajectories(tr):
            r = fl_residual(t, tiny_setgen, tr, i, j, ObjectiveSpec("FL_SubTB_lambda", 0.5)).value
            assert abs(r) <= 1e-12


@pytest.mark.parametrize("alpha, m, pf_slice, extra", [(0.9, 1, 0.5, 8.788898), (0.1, 2, 0.25, -35.155593)])
def test_gradient_shift_by_hand(lattice_env, alpha, m, pf_slice, extra):
    p = init_params(lattice_env, "tabular", init_scale=0.0)
    tr = Trajectory.of(lattice_env.graph, (0, 1, 3, 5))
    spec = ObjectiveSpec("SubTB_lambda", alpha)
    assert math.exp(sum(policy_tables(p, lattice_env).log_pf[tr.edge_ids(lattice_env.graph)[:m]])) == pytest.approx(pf_slice)
    ga = grad_wrt_pf_slice(p, lattice_env, tr, 0, m, spec)
    g0 = grad_wrt_pf_slice(p, lattice_env, tr, 0, m, spec.with_alpha(0.5))
    assert ga - g0 == pytest.approx(extra, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), alpha=st.floats(0.01, 0.99))
def test_specialisations_and_half(small_setgen, seed, alpha):
    rng = np.random.default_rng(seed)
    env = small_setgen
    p = init_params(env, "tabular", seed=seed, init_scale=1.0)
    t = policy_tables(p, env)
    trajs = enumerate_complete_trajectories(env.graph)
    tr = trajs[int(rng.integers(len(trajs)))]
    st_ = tr.states
    for kind in ("DB", "FL_DB"):
        spec = ObjectiveSpec(kind, alpha)
        for k in range(tr.num_edges):
            a = db_residual(t, env, (st_[k], st_[k + 1]), spec).value
            b = alpha_subtb_residual(t, env, tr, k, k + 1, spec).value
            assert a == pytest.approx(b, abs=1e-12)
    spec = ObjectiveSpec("TB", alpha)
    assert tb_residual(t, env, tr, spec).value == alpha_subtb_residual(t, env, tr, 0, tr.num_edges, spec).value
    # alpha = 0.5 reproduces the plain residual bit for bit
    for i, j in enumerate_subtrajectories(tr):
        for fl in (False, True):
            kind = "FL_SubTB_lambda" if fl else "SubTB_lambda"
            assert alpha_subtb_residual(t, env, tr, i, j, ObjectiveSpec(kind, 0.5)).value == \
                vanilla_residual(t, env, tr, i, j, fl).value
            # the shift is exactly m * log(alpha / (1 - alpha))
            d = alpha_subtb_residual(t, env, tr, i, j, ObjectiveSpec(kind, alpha)).value - \
                vanilla_residual(t, env, tr, i, j, fl).value
            assert d == pytest.approx((j - i) * math.log(alpha / (1 - alpha)), abs=1e-11)


def test_all_edge_residuals_match_single_edge(small_setgen):
    p = init_params(small_setgen, "tabular", seed=5, init_scale=1.0)
    t = policy_tables(p, small_setgen)
    g = small_setgen.graph
    r = all_edge_db_residuals(t, small_setgen, 0.3)
    for e, (s, d) in enumerate(g.edges):
        assert r[e] == pytest.approx(db_residual(t, small_setgen, (s, d), ObjectiveSpec("DB", 0.3)).value, abs=1e-12)


@given(n=st.integers(1, 60), lam=st.floats(0.05, 3.0), kind=st.sampled_from(KINDS))
def test_slice_weights_normalised(n, lam, kind):
    w = slice_weights(n, ObjectiveSpec(kind, 0.5, lam))
    assert np.all(np.isfinite(w)) and np.all(w >= 0)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.tril(w) == 0)


def _fd_check(params, env, batch, spec, names=None, max_per_array=None, rng=None):
    _, grads = batch_loss_and_grads(params, env, batch, spec)
    worst = 0.0
    for name, arr in params.arrays.items():
        if names and name not in names:
            continue
        idxs = np.arange(arr.size)
        if max_per_array and arr.size > max_per_array:
            idxs = rng.choice(arr.size, max_per_array, replace=False)
        for idx in idxs:
            q = params.copy()
            flat = q.arrays[name].reshape(-1)
            flat[idx] += 1e-6
            lp, _ = batch_loss_and_grads(q, env, batch, spec)
            flat[idx] -= 2e-6
            lm, _ = batch_loss_and_grads(q, env, batch, spec)
            fd = (lp - lm) / 2e-6
            an = grads[name].reshape(-1)[idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-4))
    return worst


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("backward", ["uniform", "learned"])
def test_tabular_gradients_finite_difference(kind, backward):
    env = build_setgen(SetGenSpec(vocab_size=4, set_capacity=2), seed=0)
    rng = np.random.default_rng(11)
    p = init_params(env, "tabular", seed=3, init_scale=0.7, backward=backward)
    trajs = enumerate_complete_trajectories(env.graph)
    batch = [trajs[int(i)] for i in rng.integers(0, len(trajs), 3)]
    assert _fd_check(p, env, batch, ObjectiveSpec(kind, 0.8, 1.3)) <= 1e-5


@pytest.mark.parametrize("kind", KINDS)
def test_mlp_gradients_finite_difference(kind):
    env = build_setgen(SetGenSpec(vocab_size=4, set_capacity=2), seed=0)
    rng = np.random.default_rng(12)
    p = init_params(env, "mlp", seed=2, hidden=6, backward="learned")
    # zero biases put the all-zero source features exactly on the activation kink
    for name in ("b0", "b1", "b2"):
        p.arrays[name] = rng.normal(0.0, 0.3, size=p.arrays[name].shape)
    trajs = enumerate_complete_trajectories(env.graph)
    batch = [trajs[int(i)] for i in rng.integers(0, len(trajs), 3)]
    assert _fd_check(p, env, batch, ObjectiveSpec(kind, 0.3, 0.9), max_per_array=12, rng=rng) <= 1e-5


def test_bitseq_lambda_above_one_is_finite(tiny_bitseq):
    p = init_params(tiny_bitseq, "tabular", init_scale=1.0)
    tr = enumerate_complete_trajectories(tiny_bitseq.graph)[0]
    loss, grads = batch_loss_and_grads(p, tiny_bitseq, [tr], ObjectiveSpec("SubTB_lambda", 0.6, 1.9))
    assert math.isfinite(loss) and all(np.all(np.isfinite(v)) for v in grads.values())


def test_objective_spec_validation():
    with pytest.raises(ValueError):
        ObjectiveSpec("DB", 1.0)
    with pytest.raises(ValueError):
        ObjectiveSpec("GAFN", 0.5)
    with pytest.raises(ValueError):
        ObjectiveSpec("DB", 0.5, 0.0)
    assert ObjectiveSpec("DB", 0.5).alpha_shift == 0.0
