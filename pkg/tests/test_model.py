import math

import numpy as np
import pytest

from alphagfn.envs import Env, SetGenSpec, build_setgen
from alphagfn.model import (LOG_PROB_FLOOR, NonFiniteGradient, OptimizerState, adam_step,
                            backward_dist, clip_grad_norm, forward_dist, init_params,
                            load_checkpoint, policy_tables, sample_backward, sample_batch,
                            sample_trajectory, save_checkpoint)
from alphagfn.objectives import ObjectiveSpec, batch_loss_and_grads
from alphagfn.graph import enumerate_complete_trajectories


def test_forward_dist_softmax_by_hand(tiny_setgen):
    g = tiny_setgen.graph
    p = init_params(tiny_setgen, "tabular")
    s = g.labels.index((0,))
    kids = g.child_edges(s)
    assert len(kids) == 2
    p.arrays["forward_logits"][kids] = [math.log(2), 0.0]
    assert forward_dist(p, tiny_setgen, s) == pytest.approx([2 / 3, 1 / 3], abs=1e-15)


def test_backward_dist_at_sink(tiny_setgen):
    p = init_params(tiny_setgen, "tabular")
    got = backward_dist(p, tiny_setgen, tiny_setgen.graph.sink)
    assert sorted(got, reverse=True) == pytest.approx([4 / 7, 2 / 7, 1 / 7], abs=1e-15)


def test_uniform_backward_and_normalisation(small_setgen):
    g = small_setgen.graph
    p = init_params(small_setgen, "tabular", init_scale=1.0, backward="learned", seed=3)
    t = policy_tables(p, small_setgen)
    for s in range(g.num_states):
        if g.out_degree()[s]:
            assert t.pf[g.child_edges(s)].sum() == pytest.approx(1.0, abs=1e-12)
        if s not in (g.source, g.sink):
            assert t.pb[g.parent_in_edges(s)].sum() == pytest.approx(1.0, abs=1e-12)
    u = policy_tables(init_params(small_setgen, "tabular"), small_setgen)
    inner = g.edge_dst != g.sink
    assert np.allclose(u.pb[inner], 1.0 / g.in_degree()[g.edge_dst[inner]])


def test_log_prob_floor(tiny_setgen):
    p = init_params(tiny_setgen, "tabular")
    g = tiny_setgen.graph
    kids = g.child_edges(g.source)
    p.arrays["forward_logits"][kids] = [0.0, -200.0, -200.0]
    t = policy_tables(p, tiny_setgen)
    assert t.log_pf.min() == LOG_PROB_FLOOR
    assert t.pf_clamped.sum() == 2


def test_epsilon_mixture_frequency(diamond):
    env = Env.from_rewards(diamond, {3: 1.0})
    p = init_params(env, "tabular")
    p.arrays["forward_logits"][diamond.child_edges(0)] = [math.log(9), 0.0]
    eps, n = 0.3, 100_000
    rng = np.random.default_rng(0)
    t = policy_tables(p, env)
    hits = sum(sample_trajectory(p, env, eps, rng, t).states[1] == 1 for _ in range(n))
    q = (1 - eps) * 0.9 + eps * 0.5
    assert abs(hits / n - q) <= 3 * math.sqrt(q * (1 - q) / n)


def test_samples_are_complete(small_setgen):
    p = init_params(small_setgen, "mlp", hidden=8, seed=1)
    rng = np.random.default_rng(1)
    g = small_setgen.graph
    for tr in sample_batch(p, small_setgen, 20, 0.1, rng):
        assert tr.states[0] == g.source and tr.states[-1] == g.sink
        assert all(g.has_edge(a, b) for a, b in zip(tr.states[:-1], tr.states[1:]))
    x = int(small_setgen.terminals[0])
    tr = sample_backward(p, small_setgen, x, rng)
    assert tr.states[-2] == x and tr.states[0] == g.source
    with pytest.raises(ValueError):
        sample_trajectory(p, small_setgen, 1.5, rng)


def test_adam_first_step_by_hand(tiny_setgen):
    p = init_params(tiny_setgen, "tabular")
    opt = OptimizerState.for_params(p, lr=0.001)
    grads = {k: np.ones_like(v) for k, v in p.arrays.items() if k != "log_z"}
    p2, opt2 = adam_step(p, grads, opt)
    assert np.allclose(p2.arrays["forward_logits"] - p.arrays["forward_logits"], -0.001, atol=1e-10)
    assert opt2.step == 1 and opt.step == 0
    assert float(p2.arrays["log_z"]) == 0.0


def test_adam_rejects_non_finite(tiny_setgen):
    p = init_params(tiny_setgen, "tabular")
    opt = OptimizerState.for_params(p)
    bad = {"log_flow": np.full_like(p.arrays["log_flow"], np.nan)}
    with pytest.raises(NonFiniteGradient) as info:
        adam_step(p, bad, opt)
    assert info.value.path == "log_flow"
    with pytest.raises(ValueError):
        adam_step(p, {"log_flow": np.zeros(3)}, opt)


def test_clip_grad_norm():
    g = {"a": np.array([3.0, 4.0])}
    assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(g["a"]) == pytest.approx(1.0)


@pytest.mark.parametrize("kind", ["tabular", "mlp"])
def test_checkpoint_roundtrip(kind, small_setgen, tmp_path):
    p = init_params(small_setgen, kind, hidden=8, seed=2, init_scale=0.3, backward="learned")
    opt = OptimizerState.for_params(p, lr=0.01)
    trajs = enumerate_complete_trajectories(small_setgen.graph)[:4]
    _, grads = batch_loss_and_grads(p, small_setgen, trajs, ObjectiveSpec("TB", 0.7))
    p, opt = adam_step(p, grads, opt)
    path = tmp_path / "ck.npz"
    save_checkpoint(str(path), p, opt, step=7, meta={"seed": 2})
    q, opt2, step, meta = load_checkpoint(str(path))
    assert step == 7 and meta == {"seed": 2}
    assert q.kind == kind and q.backward == "learned"
    for k in p.arrays:
        assert np.array_equal(p.arrays[k], q.arrays[k])
        assert np.array_equal(opt.m[k], opt2.m[k]) and np.array_equal(opt.v[k], opt2.v[k])
    assert opt2.step == opt.step == 1


def test_init_rejects_unknown():
    env = build_setgen(SetGenSpec(vocab_size=3, set_capacity=1))
    with pytest.raises(ValueError):
        init_params(env, "transformer")
    with pytest.raises(ValueError):
        init_params(env, "tabular", backward="mirror")
