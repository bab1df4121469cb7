"""Balance residuals, losses and exact gradients for the alpha-weighted objectives.

All objectives share one form. For a complete trajectory s_0 -> ... -> s_n
(s_n the sink) and a slice 0 <= i < j <= n with m = j - i edges,

    r(i, j) = m * log(alpha / (1 - alpha)) + log F(s_i) + sum log P_F
              - end(j) - sum log P_B [+ sum edge energies in forward-looking mode]

where F(s_0) = exp(log_z) and end(j) = log F(s_j) for inner states. At the sink
the flow-relative backward rule makes end(n) = log R(x) and the terminal edge
contributes no P_B term. In forward-looking mode the learned flow is the
energy-reweighted flow F~ = F * exp(energy(s)), which puts end(n) at 0.

With prefix sums A[k] over per-edge terms every slice costs O(1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .envs import Env
from .graph import Trajectory
from .model import ModelParams, PolicyTables, backprop_tables, policy_tables

KINDS = ("DB", "TB", "SubTB_lambda", "FL_DB", "FL_SubTB_lambda")


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "DB"
    alpha: float = 0.5
    lam: float = 0.99

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.lam > 0.0:
            raise ValueError(f"lambda must be positive, got {self.lam}")

    @property
    def forward_looking(self) -> bool:
        return self.kind.startswith("FL_")

    @property
    def alpha_shift(self) -> float:
        """log(alpha / (1 - alpha)); exactly 0.0 at alpha = 0.5."""
        return math.log(self.alpha) - math.log1p(-self.alpha)

    def with_alpha(self, alpha: float) -> "ObjectiveSpec":
        return ObjectiveSpec(self.kind, alpha, self.lam)


@dataclass(frozen=True)
class Residual:
    value: float
    edge_count: int
    span: tuple[int, int]

    @property
    def loss(self) -> float:
        return self.value * self.value


def default_lambda(env_kind: str) -> float:
    return {"setgen": 0.99, "bitseq": 1.9}.get(env_kind, 0.99)


def _tables(model, env: Env) -> PolicyTables:
    return model if isinstance(model, PolicyTables) else policy_tables(model, env)


class _TrajectoryTerms:
    """Per-position and per-edge log-terms of one complete trajectory."""

    __slots__ = ("states", "edges", "start", "end", "prefix", "n", "terminal")

    def __init__(self, tables: PolicyTables, env: Env, t: Trajectory, spec: ObjectiveSpec,
                 vanilla: bool = False):
        g = env.graph
        if not t.is_complete or t.states[-1] != g.sink or t.states[0] != g.source:
            raise ValueError("objective needs a complete trajectory from source to sink")
        states = np.asarray(t.states)
        edges = np.fromiter((g.edge_id(a, b) for a, b in zip(t.states[:-1], t.states[1:])),
                            dtype=np.int64, count=len(states) - 1)
        n = len(edges)
        lf = tables.log_flow[states]
        start = lf.copy()
        start[0] = tables.log_z
        end = lf.copy()
        x = int(states[-2])
        end[-1] = 0.0 if spec.forward_looking else float(env.log_reward[x])
        per_edge = tables.log_pf[edges] - tables.log_pb[edges]
        per_edge[-1] = tables.log_pf[edges[-1]]
        if spec.forward_looking:
            per_edge = per_edge + env.edge_energies()[edges]
        if not vanilla:
            c = spec.alpha_shift
            if c != 0.0:
                per_edge = per_edge + c
        prefix = np.zeros(n + 1)
        np.cumsum(per_edge, out=prefix[1:])
        self.states, self.edges, self.start, self.end, self.prefix, self.n = states, edges, start, end, prefix, n

    def residual(self, i: int, j: int) -> float:
        return float(self.start[i] - self.end[j] + self.prefix[j] - self.prefix[i])

    def residual_matrix(self) -> np.ndarray:
        """R[i, j] = r(i, j) for i < j; zero elsewhere."""
        r = (self.start[:, None] - self.end[None, :]) + (self.prefix[None, :] - self.prefix[:, None])
        return np.triu(r, 1)


def _check_slice(t: Trajectory, i: int, j: int) -> None:
    if not (0 <= i < j <= t.num_edges):
        raise IndexError(f"slice ({i}, {j}) out of range for a trajectory with {t.num_edges} edges")


def alpha_subtb_residual(model, env: Env, t: Trajectory, i: int, j: int,
                         spec: ObjectiveSpec) -> Residual:
    _check_slice(t, i, j)
    terms = _TrajectoryTerms(_tables(model, env), env, t, spec)
    return Residual(terms.residual(i, j), j - i, (i, j))


def vanilla_residual(model, env: Env, t: Trajectory, i: int, j: int,
                     forward_looking: bool = False) -> Residual:
    """Balance residual with no alpha term at all (the alpha = 0.5 reference)."""
    _check_slice(t, i, j)
    spec = ObjectiveSpec("FL_SubTB_lambda" if forward_looking else "SubTB_lambda")
    terms = _TrajectoryTerms(_tables(model, env), env, t, spec, vanilla=True)
    return Residual(terms.residual(i, j), j - i, (i, j))


def fl_residual(model, env: Env, t: Trajectory, i: int, j: int, spec: ObjectiveSpec) -> Residual:
    """Forward-looking residual; ``spec`` is coerced to its forward-looking kind."""
    if not spec.forward_looking:
        spec = ObjectiveSpec("FL_" + ("DB" if spec.kind in ("DB", "TB") else "SubTB_lambda"),
                             spec.alpha, spec.lam)
    return alpha_subtb_residual(model, env, t, i, j, spec)


def db_residual(model, env: Env, edge: tuple[int, int], spec: ObjectiveSpec) -> Residual:
    """Residual of a single edge (s, s'); terminal edges use F(x) P_F(s_f | x) = R(x)."""
    g = env.graph
    s, s2 = edge
    e = g.edge_id(s, s2)  # raises KeyError on non-edges
    tables = _tables(model, env)
    start = tables.log_z if s == g.source else tables.log_flow[s]
    if s2 == g.sink:
        end = 0.0 if spec.forward_looking else env.log_reward[s]
        val = start + tables.log_pf[e] - end
    else:
        val = start + tables.log_pf[e] - tables.log_flow[s2] - tables.log_pb[e]
    if spec.forward_looking:
        val = val + env.edge_energies()[e]
    c = spec.alpha_shift
    if c != 0.0:
        val = val + c
    return Residual(float(val), 1, (0, 1))


def tb_residual(model, env: Env, t: Trajectory, spec: ObjectiveSpec) -> Residual:
    if not t.is_complete:
        raise ValueError("trajectory balance needs a complete trajectory")
    return alpha_subtb_residual(model, env, t, 0, t.num_edges, spec)


def slice_weights(n: int, spec: ObjectiveSpec) -> np.ndarray:
    """Weight matrix over slices (i, j) of an n-edge trajectory, summing to 1."""
    w = np.zeros((n + 1, n + 1))
    if spec.kind in ("DB", "FL_DB"):
        idx = np.arange(n)
        w[idx, idx + 1] = 1.0 / n
    elif spec.kind == "TB":
        w[0, n] = 1.0
    else:
        span = np.arange(n + 1)[None, :] - np.arange(n + 1)[:, None]
        mask = span > 0
        # lambda**span normalised in log space so lambda > 1 cannot overflow
        logw = np.where(mask, span * math.log(spec.lam), -np.inf)
        logw -= logw[mask].max()
        w = np.where(mask, np.exp(logw), 0.0)
        w /= w.sum()
    return w


def _accumulate(terms: _TrajectoryTerms, w: np.ndarray, scale: float, grads: dict) -> float:
    r = terms.residual_matrix()
    loss = float(np.sum(w * r * r))
    if grads is None:
        return loss
    gm = 2.0 * scale * w * r
    n = terms.n
    d_start = gm.sum(axis=1)
    d_end = gm.sum(axis=0)
    # coefficient of edge k is the weight of all slices (i, j) with i <= k < j
    tail = np.cumsum(gm[:, ::-1], axis=1)[:, ::-1]
    cover = np.cumsum(tail, axis=0)
    d_edge = cover[np.arange(n), np.arange(1, n + 1)]
    st, ed = terms.states, terms.edges
    np.add.at(grads["log_flow"], st, d_start)
    np.add.at(grads["log_flow"], st[:-1], -d_end[:-1])
    np.add.at(grads["log_pf"], ed, d_edge)
    np.add.at(grads["log_pb"], ed[:-1], -d_edge[:-1])
    return loss


def trajectory_loss(model, env: Env, t: Trajectory, spec: ObjectiveSpec) -> float:
    terms = _TrajectoryTerms(_tables(model, env), env, t, spec)
    return _accumulate(terms, slice_weights(terms.n, spec), 1.0, None)


def table_grads_zero(env: Env) -> dict[str, np.ndarray]:
    g = env.graph
    return {"log_pf": np.zeros(g.num_edges), "log_pb": np.zeros(g.num_edges),
            "log_flow": np.zeros(g.num_states)}


def batch_loss_and_grads(params: ModelParams, env: Env, trajectories: list[Trajectory],
                         spec: ObjectiveSpec, tables: PolicyTables | None = None):
    """Mean per-trajectory loss over the batch and its exact parameter gradients."""
    if not trajectories:
        raise ValueError("empty batch")
    tables = tables or policy_tables(params, env)
    tg = table_grads_zero(env)
    scale = 1.0 / len(trajectories)
    total = 0.0
    for t in trajectories:
        terms = _TrajectoryTerms(tables, env, t, spec)
        total += _accumulate(terms, slice_weights(terms.n, spec), scale, tg)
    grads = backprop_tables(params, env, tables, tg["log_pf"], tg["log_pb"], tg["log_flow"])
    return total * scale, grads


def subtb_lambda_loss(params: ModelParams, env: Env, t: Trajectory, spec: ObjectiveSpec):
    """lambda-weighted sub-trajectory loss of one trajectory with exact gradients."""
    if spec.kind not in ("SubTB_lambda", "FL_SubTB_lambda"):
        spec = ObjectiveSpec("SubTB_lambda", spec.alpha, spec.lam)
    return batch_loss_and_grads(params, env, [t], spec)


def grad_wrt_pf_slice(model, env: Env, t: Trajectory, i: int, j: int, spec: ObjectiveSpec) -> float:
    """d r(i, j)**2 / d P_F(slice), treating the slice's forward probability
    product as one scalar. Equals the vanilla derivative plus
    2 m log(alpha / (1 - alpha)) / P_F(slice)."""
    _check_slice(t, i, j)
    tables = _tables(model, env)
    terms = _TrajectoryTerms(tables, env, t, spec)
    pf_slice = math.exp(float(np.sum(tables.log_pf[terms.edges[i:j]])))
    return 2.0 * terms.residual(i, j) / pf_slice


# ------------------------------------------------------- all-edge DB system

def all_edge_db_residuals(tables: PolicyTables, env: Env, alpha: float) -> np.ndarray:
    """alpha-DB residual of every edge of the graph, in edge-id order."""
    g = env.graph
    c = math.log(alpha) - math.log1p(-alpha)
    src, dst = g.edge_src, g.edge_dst
    start = tables.log_flow[src].copy()
    start[src == g.source] = tables.log_z
    term = dst == g.sink
    end = np.where(term, 0.0, tables.log_flow[dst] + tables.log_pb)
    end[term] = env.log_reward[src[term]]
    r = start + tables.log_pf - end
    return r + c if c != 0.0 else r


def fit_db_exact(env: Env, alpha: float, seed: int = 0, init_scale: float = 1.0,
                 tol: float = 1e-15, max_nfev: int = 200):
    """Drive the full-graph alpha-DB loss (mean squared edge residual) to
    numerical zero for tabular parameters with a fixed uniform backward policy.

    Returns ``(params, loss)``. Uses a trust-region least-squares solver with
    the exact sparse Jacobian.
    """
    from scipy.optimize import least_squares
    from scipy.sparse import csr_matrix

    from .model import init_params

    g = env.graph
    E, S = g.num_edges, g.num_states
    params = init_params(env, "tabular", seed=seed, init_scale=init_scale)
    # unknowns: forward logits (E), log_flow of inner states, log_z
    inner = np.array([s for s in range(S) if s not in (g.source, g.sink)], dtype=np.int64)
    flow_col = np.full(S, -1, dtype=np.int64)
    flow_col[inner] = E + np.arange(len(inner))
    z_col = E + len(inner)

    def unpack(theta):
        p = params.copy()
        p.arrays["forward_logits"] = theta[:E].copy()
        lf = np.zeros(S)
        lf[inner] = theta[E:z_col]
        p.arrays["log_flow"] = lf
        p.arrays["log_z"] = np.array(theta[z_col])
        return p

    def fun(theta):
        return all_edge_db_residuals(policy_tables(unpack(theta), env), env, alpha)

    # static sparsity: sibling logits, source-side flow, target-side flow
    sib_rows, sib_cols = [], []
    for s in range(S):
        lo, hi = g.child_ptr[s], g.child_ptr[s + 1]
        if hi > lo:
            blk = np.arange(lo, hi)
            sib_rows.append(np.repeat(blk, hi - lo))
            sib_cols.append(np.tile(blk, hi - lo))
    sib_rows = np.concatenate(sib_rows)
    sib_cols = np.concatenate(sib_cols)
    e_all = np.arange(E)
    src_col = np.where(g.edge_src == g.source, z_col, flow_col[g.edge_src])
    dst_inner = flow_col[g.edge_dst] >= 0

    def jac(theta):
        pf = policy_tables(unpack(theta), env).pf
        vals = (sib_rows == sib_cols).astype(np.float64) - pf[sib_cols]
        rows = np.concatenate([sib_rows, e_all, e_all[dst_inner]])
        cols = np.concatenate([sib_cols, src_col, flow_col[g.edge_dst[dst_inner]]])
        data = np.concatenate([vals, np.ones(E), -np.ones(int(dst_inner.sum()))])
        return csr_matrix((data, (rows, cols)), shape=(E, z_col + 1))

    theta0 = np.concatenate([params.arrays["forward_logits"], params.arrays["log_flow"][inner],
                             [float(params.arrays["log_z"])]])
    sol = least_squares(fun, theta0, jac=jac, method="trf", tr_solver="lsmr",
                        xtol=tol, ftol=tol, gtol=tol, max_nfev=max_nfev, x_scale=1.0)
    fitted = unpack(sol.x)
    r = fun(sol.x)
    return fitted, float(np.mean(r * r))


def fl_reparameterize(log_flow: np.ndarray, env: Env) -> np.ndarray:
    """Energy-reweighted log-flows log F~(s) = log F(s) + energy(s) as learned in
    forward-looking mode; source and sink carry zero energy by convention."""
    g = env.graph
    energy = np.nan_to_num(env.state_energy, nan=0.0).copy()
    energy[[g.source, g.sink]] = 0.0
    return np.asarray(log_flow, dtype=np.float64) + energy
