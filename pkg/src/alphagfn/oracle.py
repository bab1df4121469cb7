"""Exact ground truth on enumerable graphs.

Dynamic programs are the primary route; trajectory enumeration is kept as an
independent second route for cross-checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .envs import Env
from .graph import DEFAULT_TRAJECTORY_CAP, DagGraph, enumerate_complete_trajectories, enumerate_subtrajectories
from .model import ModelParams, PolicyTables, policy_tables, tables_from_probabilities
from .objectives import ObjectiveSpec, _TrajectoryTerms, all_edge_db_residuals


@dataclass
class FlowTable:
    flow: np.ndarray
    z: float

    @property
    def log_flow(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.flow)


def _order(g: DagGraph) -> list[int]:
    order = g.topological_order()
    if order is None:
        raise ValueError("graph has a cycle")
    return order


def terminating_probs_from_pf(g: DagGraph, pf: np.ndarray) -> np.ndarray:
    """Visit probabilities pushed forward along P_F; returns P_F^T over
    ``g.terminal_states`` (probability of the x -> sink step)."""
    visit = np.zeros(g.num_states)
    visit[g.source] = 1.0
    for s in _order(g):
        lo, hi = g.child_ptr[s], g.child_ptr[s + 1]
        if hi > lo and visit[s] != 0.0:
            np.add.at(visit, g.edge_dst[lo:hi], visit[s] * pf[lo:hi])
    term = g.terminal_states
    return np.array([visit[x] * pf[g.edge_id(int(x), g.sink)] for x in term])


def exact_terminating_probs(model, env: Env) -> np.ndarray:
    """P_F^T(x) for every terminal of ``env`` (order of ``env.terminals``)."""
    t = model if isinstance(model, PolicyTables) else policy_tables(model, env)
    return terminating_probs_from_pf(env.graph, t.pf)


def terminating_probs_by_enumeration(g: DagGraph, pf: np.ndarray,
                                     cap: int = DEFAULT_TRAJECTORY_CAP) -> np.ndarray:
    idx = {int(x): k for k, x in enumerate(g.terminal_states)}
    out = np.zeros(len(idx))
    for t in enumerate_complete_trajectories(g, cap):
        out[idx[t.states[-2]]] += math.prod(pf[e] for e in t.edge_ids(g))
    return out


def exact_flows(g: DagGraph, rewards: dict | np.ndarray, pb: np.ndarray) -> FlowTable:
    """Flows fixed by rewards and a backward policy.

    ``rewards`` maps terminal -> R(x) (or is a per-state array); ``pb`` is
    per-edge. Terminal flows are R(x); inner flows accumulate
    F(s) = sum F(s') P_B(s | s') in reverse topological order.
    """
    R = np.zeros(g.num_states)
    for x in g.terminal_states:
        R[x] = rewards[int(x)]
    if np.any(R[g.terminal_states] <= 0):
        raise ValueError("rewards must be positive on terminals")
    flow = np.zeros(g.num_states)
    z = float(R[g.terminal_states].sum())
    flow[g.sink] = z
    for s in reversed(_order(g)):
        if s == g.sink:
            continue
        acc = 0.0
        for e in g.child_edges(s):
            d = int(g.edge_dst[e])
            acc += R[s] if d == g.sink else flow[d] * pb[e]
        flow[s] = acc
    if not math.isclose(flow[g.source], z, rel_tol=1e-10):
        raise ValueError("backward policy is not normalised: source flow differs from total reward")
    flow[g.source] = z
    return FlowTable(flow, z)


def uniform_backward(g: DagGraph) -> np.ndarray:
    return 1.0 / g.in_degree()[g.edge_dst].astype(np.float64)


def induced_forward(g: DagGraph, flows: FlowTable, pb: np.ndarray, rewards) -> np.ndarray:
    """P_F(s'|s) = F(s') P_B(s|s') / F(s); terminal edge R(x) / F(x)."""
    pf = np.empty(g.num_edges)
    for e in range(g.num_edges):
        s, d = int(g.edge_src[e]), int(g.edge_dst[e])
        num = rewards[s] if d == g.sink else flows.flow[d] * pb[e]
        pf[e] = num / flows.flow[s]
    return pf


def env_oracle(env: Env, pb: np.ndarray | None = None):
    """Exact flows, induced forward policy and tables for ``env``."""
    g = env.graph
    pb = uniform_backward(g) if pb is None else pb
    rewards = {int(x): math.exp(env.log_reward[x]) for x in g.terminal_states}
    flows = exact_flows(g, rewards, pb)
    pf = induced_forward(g, flows, pb, rewards)
    tables = tables_from_probabilities(env, pf, flows.log_flow, pb, math.log(flows.z))
    return flows, pf, tables


def verify_all_balances(env: Env, tables: PolicyTables, alpha: float = 0.5,
                        cap: int = DEFAULT_TRAJECTORY_CAP) -> dict[str, float]:
    """Worst |residual| over every edge (DB), every sub-slice of every complete
    trajectory (SubTB) and every complete trajectory (TB)."""
    g = env.graph
    worst = {"DB": float(np.max(np.abs(all_edge_db_residuals(tables, env, alpha)))),
             "SubTB": 0.0, "TB": 0.0}
    spec = ObjectiveSpec("SubTB_lambda", alpha, 1.0)
    for t in enumerate_complete_trajectories(g, cap):
        terms = _TrajectoryTerms(tables, env, t, spec)
        for i, j in enumerate_subtrajectories(t):
            worst["SubTB"] = max(worst["SubTB"], abs(terms.residual(i, j)))
        worst["TB"] = max(worst["TB"], abs(terms.residual(0, terms.n)))
    return worst


def flows_of_params(params: ModelParams, env: Env) -> np.ndarray:
    """Learned log-flow table with log_z at source and sink."""
    return policy_tables(params, env).log_flow
