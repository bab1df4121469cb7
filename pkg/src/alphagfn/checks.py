"""Named property checks run by the ``verify`` subcommand.

Each check computes a worst-case margin and compares it to a tolerance. A
global scale multiplies every tolerance, and a fault can be injected to
confirm that the balance checks catch broken flows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import mc
from .envs import SetGenSpec, build_setgen
from .graph import enumerate_complete_trajectories, random_pointed_dag
from .model import init_params, policy_tables, tables_from_probabilities
from .objectives import ObjectiveSpec, _TrajectoryTerms, batch_loss_and_grads, grad_wrt_pf_slice
from .oracle import env_oracle, exact_terminating_probs, terminating_probs_by_enumeration, verify_all_balances
from .schedule import ScheduleSpec, alpha_at

INJECTIONS = ("flow-perturbation",)


@dataclass
class CheckResult:
    check_id: str
    margin: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.margin <= self.tolerance)


def _small_env():
    return build_setgen(SetGenSpec(vocab_size=5, set_capacity=3), seed=0)


def _random_policy(g, rng):
    pf = rng.random(g.num_edges) + 0.05
    sizes = np.diff(g.child_ptr)
    starts = g.child_ptr[:-1][sizes > 0]
    pf /= np.repeat(np.add.reduceat(pf, starts), sizes[sizes > 0])
    return pf


def check_oracle_proportionality(inject=None):
    env = _small_env()
    flows, pf, _ = env_oracle(env)
    r = env.terminal_rewards()
    margin = float(np.max(np.abs(exact_terminating_probs(
        tables_from_probabilities(env, pf), env) - r / r.sum())))
    return margin, 1e-10, "P_F^T(x) vs R(x)/sum R from oracle flows"


def check_oracle_dp_vs_enumeration(inject=None):
    env = _small_env()
    rng = np.random.default_rng(0)
    pf = _random_policy(env.graph, rng)
    dp = exact_terminating_probs(tables_from_probabilities(env, pf), env)
    en = terminating_probs_by_enumeration(env.graph, pf)
    return float(np.max(np.abs(dp - en))), 1e-12, "push-forward DP vs trajectory enumeration"


def check_balance_oracle_flows(inject=None):
    env = _small_env()
    flows, pf, tables = env_oracle(env)
    if inject == "flow-perturbation":
        inner = [s for s in range(env.graph.num_states) if s not in (env.graph.source, env.graph.sink)]
        tables.log_flow[inner[len(inner) // 2]] += 0.1
    worst = verify_all_balances(env, tables, 0.5)
    return max(worst.values()), 1e-10, "max |residual| over DB, SubTB, TB at alpha = 0.5"


def check_alpha_half_equivalence(inject=None):
    env = _small_env()
    rng = np.random.default_rng(1)
    trajs = enumerate_complete_trajectories(env.graph)
    worst = 0.0
    for k in range(50):
        p = init_params(env, "tabular", seed=k, init_scale=1.0)
        t = policy_tables(p, env)
        tr = trajs[int(rng.integers(len(trajs)))]
        for kind in ("SubTB_lambda", "FL_SubTB_lambda"):
            spec = ObjectiveSpec(kind, 0.5)
            a = _TrajectoryTerms(t, env, tr, spec).residual_matrix()
            b = _TrajectoryTerms(t, env, tr, spec, vanilla=True).residual_matrix()
            worst = max(worst, float(np.max(np.abs(a - b))))
            # independent slow route agrees up to summation order
            naive = _vanilla_matrix(t, env, tr, kind.startswith("FL_"))
            if np.max(np.abs(a - naive)) > 1e-12:
                worst = max(worst, 1.0)
    return worst, 0.0, "alpha = 0.5 residuals equal vanilla bit-for-bit"


def _vanilla_matrix(t, env, tr, fl):
    g = env.graph
    st = list(tr.states)
    n = len(st) - 1
    out = np.zeros((n + 1, n + 1))
    en = env.edge_energies()
    for i in range(n):
        for j in range(i + 1, n + 1):
            v = t.log_z if i == 0 else t.log_flow[st[i]]
            for k in range(i, j):
                e = g.edge_id(st[k], st[k + 1])
                v += t.log_pf[e]
                if st[k + 1] != g.sink:
                    v -= t.log_pb[e]
                if fl:
                    v += en[e]
            v -= (0.0 if fl else env.log_reward[st[-2]]) if j == n else t.log_flow[st[j]]
            out[i, j] = v
    return out


def check_gradient_identity(inject=None):
    env = _small_env()
    trajs = enumerate_complete_trajectories(env.graph)
    rng = np.random.default_rng(2)
    worst = 0.0
    for k in range(40):
        p = init_params(env, "tabular", seed=100 + k, init_scale=1.0)
        t = policy_tables(p, env)
        tr = trajs[int(rng.integers(len(trajs)))]
        i = int(rng.integers(0, tr.num_edges))
        j = int(rng.integers(i + 1, tr.num_edges + 1))
        for a in (0.1, 0.3, 0.7, 0.9):
            ga = grad_wrt_pf_slice(t, env, tr, i, j, ObjectiveSpec("SubTB_lambda", a))
            g0 = grad_wrt_pf_slice(t, env, tr, i, j, ObjectiveSpec("SubTB_lambda", 0.5))
            pf = math.exp(sum(t.log_pf[e] for e in tr.edge_ids(env.graph)[i:j]))
            extra = 2 * (j - i) / pf * math.log(a / (1 - a))
            worst = max(worst, abs(ga - g0 - extra) / max(abs(ga), abs(extra), 1e-300))
    return worst, 1e-10, "relative error of the alpha gradient shift"


def check_finite_differences(inject=None):
    env = build_setgen(SetGenSpec(vocab_size=4, set_capacity=2), seed=0)
    rng = np.random.default_rng(3)
    trajs = enumerate_complete_trajectories(env.graph)
    worst = 0.0
    for kind in ("DB", "TB", "SubTB_lambda", "FL_DB", "FL_SubTB_lambda"):
        spec = ObjectiveSpec(kind, 0.7, 0.9)
        p = init_params(env, "tabular", seed=7, init_scale=0.5, backward="learned")
        batch = [trajs[int(i)] for i in rng.integers(0, len(trajs), 4)]
        _, grads = batch_loss_and_grads(p, env, batch, spec)
        for name, arr in p.arrays.items():
            flat = arr.reshape(-1)
            for idx in range(flat.size):
                q = p.copy()
                qf = q.arrays[name].reshape(-1)
                qf[idx] += 1e-6
                lp, _ = batch_loss_and_grads(q, env, batch, spec)
                qf[idx] -= 2e-6
                lm, _ = batch_loss_and_grads(q, env, batch, spec)
                fd = (lp - lm) / 2e-6
                an = grads[name].reshape(-1)[idx]
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-4))
    return worst, 1e-5, "central differences vs exact gradients, all objectives"


def _random_chain(rng, inner_loop=False):
    g = random_pointed_dag(rng, num_layers=int(rng.integers(2, 5)), width=4,
                           skip_prob=float(rng.choice([0.0, 0.2])))
    P, mg = mc.forward_kernel(g, _random_policy(g, rng))
    if inner_loop:
        # add a back edge between two non-root states, then renormalise
        n = P.shape[0]
        u, v = rng.choice([s for s in range(n) if s != mg.merged_root], 2, replace=False)
        P[u, v] += 0.5
        P[v, u] += 0.5
        P /= P.sum(axis=1, keepdims=True)
    return g, P, mg


def check_chain_identities(inject=None):
    rng = np.random.default_rng(4)
    worst = 0.0
    for k in range(20):
        g, P, mg = _random_chain(rng, inner_loop=bool(k % 2))
        pi = mc.stationary(P)
        worst = max(worst, float(np.max(np.abs(pi @ P - pi))))
        Pt = mc.reversed_kernel(P, pi)
        Pa = mc.mixed_kernel(P, Pt, 0.3)
        worst = max(worst, float(np.max(np.abs(pi @ Pa - pi))))
        Z = mc.fundamental_matrix(P, pi)
        rep = mc.gfnmc_criterion(P, pi, Z, mg.merged_root)
        if rep.is_gfnmc == mc.has_inner_loop(P, mg.merged_root):
            worst = max(worst, 1.0)
    return worst, 1e-10, "stationarity, mixing and criterion vs inner-loop detector"


def check_reversibility_bridge(inject=None):
    env = _small_env()
    g = env.graph
    p = init_params(env, "tabular", seed=5, init_scale=1.0)
    t = policy_tables(p, env)
    pi = np.exp(t.log_flow)
    rev = mc.reversibility_residuals(pi, t.pf, t.pb, g, 0.5)
    from .objectives import all_edge_db_residuals
    db = all_edge_db_residuals(t, env, 0.5)
    worst = float(np.max(np.abs(rev - db)))
    P = mc.policy_mixed_kernel(g, t.pf, t.pb, 0.5, strict=False)
    mg = mc.merge_terminal(g)
    pim = np.ones(P.shape[0])  # cancels on a closed loop
    for tr in enumerate_complete_trajectories(g)[:30]:
        loop = [int(mg.to_merged[s]) for s in tr.states]
        k = mc.kolmogorov_loop_check(pim, P, loop)
        tb = _TrajectoryTerms(t, env, tr, ObjectiveSpec("TB", 0.5)).residual(0, tr.num_edges)
        worst = max(worst, abs(k - abs(tb)))
    return worst, 1e-10, "reversibility vs DB residuals, loop criterion vs TB residuals"


def check_schedule_anchors(inject=None):
    s = ScheduleSpec(total_steps=100, stage1_steps=50, alpha0=0.9)
    got = [alpha_at(s, 10), alpha_at(ScheduleSpec(100, 50, 0.5), 75), alpha_at(s, 75)]
    want = [0.9, 0.5, 0.5 + 0.4 * math.exp(-2.0)]
    return max(abs(a - b) for a, b in zip(got, want)), 1e-12, "two-stage schedule anchor values"


def check_fl_roundtrip(inject=None):
    env = _small_env()
    flows, pf, _ = env_oracle(env)
    from .objectives import fl_reparameterize
    lf = flows.log_flow
    back = mc.fl_prior_transform(np.exp(fl_reparameterize(lf, env)),
                                 fl_reparameterize(np.zeros_like(lf), env))
    return float(np.max(np.abs(back - flows.flow) / flows.flow)), 1e-10, "FL prior round-trip"


CHECKS: dict[str, Callable] = {
    "oracle.proportionality": check_oracle_proportionality,
    "oracle.dp_vs_enumeration": check_oracle_dp_vs_enumeration,
    "balance.oracle_flows": check_balance_oracle_flows,
    "objectives.alpha_half": check_alpha_half_equivalence,
    "objectives.alpha_gradient_shift": check_gradient_identity,
    "objectives.finite_differences": check_finite_differences,
    "chain.identities": check_chain_identities,
    "chain.reversibility_bridge": check_reversibility_bridge,
    "schedule.anchors": check_schedule_anchors,
    "fl.prior_roundtrip": check_fl_roundtrip,
}


def run_checks(tol_scale: float = 1.0, inject: str | None = None, only=None) -> list[CheckResult]:
    if inject is not None and inject not in INJECTIONS:
        raise ValueError(f"unknown injection {inject!r}; known: {INJECTIONS}")
    out = []
    for cid, fn in CHECKS.items():
        if only and cid not in only:
            continue
        margin, tol, detail = fn(inject)
        out.append(CheckResult(cid, float(margin), tol * tol_scale, detail))
    return out
