"""Evaluation metrics: rank correlation, policy entropy, top-K reward and a
Monte Carlo estimate of terminating probabilities."""
from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

from .envs import Env
from .model import ModelParams, PolicyTables, policy_tables, sample_backward


def spearman(xs, ys) -> float:
    """Pearson correlation of tie-averaged ranks; NaN when either input is
    constant."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("inputs must be 1-d with equal length")
    if xs.size < 2:
        raise ValueError("need at least two observations")
    rx = rankdata(xs) - (xs.size + 1) / 2.0
    ry = rankdata(ys) - (ys.size + 1) / 2.0
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0.0:
        return math.nan
    return float(rx @ ry) / den


def policy_entropy(model, env: Env, states) -> float:
    """Mean forward-policy entropy (nats) over the given non-sink states."""
    t = model if isinstance(model, PolicyTables) else policy_tables(model, env)
    g = env.graph
    states = [int(s) for s in states if s != g.sink]
    if not states:
        raise ValueError("entropy needs at least one non-sink state")
    total = 0.0
    for s in states:
        q = t.pf[g.child_ptr[s]:g.child_ptr[s + 1]]
        q = q[q > 0]
        total -= float(q @ np.log(q))
    return total / len(states)


def topk_mean_reward(samples, env: Env, k: int) -> float:
    """Mean reward of the k best distinct terminals among ``samples``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    distinct = set(int(x) for x in samples)
    if not distinct:
        raise ValueError("no samples")
    rewards = np.sort(np.exp(env.log_reward[list(distinct)]))[::-1]
    return float(rewards[:k].mean())


def estimate_terminating_prob(params: ModelParams, env: Env, x: int, n_samples: int,
                              rng: np.random.Generator, tables: PolicyTables | None = None) -> float:
    """(1/N) sum P_F(tau) / P_B(tau | x) over N trajectories tau ~ P_B(. | x)."""
    g = env.graph
    if x not in set(int(t) for t in g.terminal_states):
        raise ValueError(f"state {x} is not terminal")
    t = tables or policy_tables(params, env)
    acc = 0.0
    for _ in range(n_samples):
        traj = sample_backward(params, env, x, rng, t)
        edges = traj.edge_ids(g)
        log_w = float(np.sum(np.log(t.pf[edges]))) - float(np.sum(np.log(t.pb[edges[:-1]])))
        acc += math.exp(log_w)
    return acc / n_samples
