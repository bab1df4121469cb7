"""Policy/flow parameterisations, sampling, Adam and checkpoints.

Every training step evaluates the model on *all* states of the (enumerable)
DAG and produces per-edge log-probability tables. Objectives differentiate
with respect to those tables; :func:`backprop_tables` then chains the table
gradients into parameter gradients. This keeps the tabular and MLP models
behind one interface.
"""
from __future__ import annotations

import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .envs import Env
from .graph import DagGraph, Trajectory

LOG_PROB_FLOOR = math.log(1e-30)
LEAKY_SLOPE = 0.01
CHECKPOINT_VERSION = 1


class NonFiniteGradient(FloatingPointError):
    def __init__(self, path: str):
        super().__init__(f"non-finite gradient in parameter {path!r}")
        self.path = path


@dataclass
class ModelParams:
    kind: str
    backward: str
    arrays: dict[str, np.ndarray]
    hidden: int = 0

    def copy(self) -> "ModelParams":
        return ModelParams(self.kind, self.backward, {k: v.copy() for k, v in self.arrays.items()},
                           self.hidden)

    @property
    def log_z(self) -> float:
        return float(self.arrays["log_z"])


@dataclass
class PolicyTables:
    """Model outputs over the whole graph.

    ``log_pf``/``log_pb`` are clamped below at log(1e-30). ``log_flow`` holds
    log F(s) with the source and the sink both mapped to ``log_z``. Terminal
    entries of ``log_pb`` follow the flow-relative convention
    P_B(x | sink) = R(x) / F(sink); objectives use log R(x) directly instead.
    """

    log_pf: np.ndarray
    log_pb: np.ndarray
    log_flow: np.ndarray
    log_z: float
    pf: np.ndarray
    pb: np.ndarray
    pf_clamped: np.ndarray = field(repr=False)
    pb_clamped: np.ndarray = field(repr=False)
    cache: dict = field(default_factory=dict, repr=False)


# ----------------------------------------------------------------- init

def init_params(env: Env, kind: str = "tabular", seed: int = 0, hidden: int = 64,
                backward: str = "uniform", init_scale: float = 0.0) -> ModelParams:
    """Fresh parameters.

    Tabular parameters start at zero (uniform policies, unit flows) unless
    ``init_scale`` > 0, which draws them from N(0, init_scale**2). MLP weights
    are U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with zero biases.
    """
    if backward not in ("uniform", "learned"):
        raise ValueError(f"unknown backward mode {backward!r}")
    g = env.graph
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    if kind == "tabular":
        shape_e, shape_s = (g.num_edges,), (g.num_states,)
        draw = (lambda shape: rng.normal(0.0, init_scale, size=shape)) if init_scale > 0 \
            else (lambda shape: np.zeros(shape))
        arrays["forward_logits"] = draw(shape_e)
        if backward == "learned":
            arrays["backward_logits"] = draw(shape_e)
        arrays["log_flow"] = draw(shape_s)
        arrays["log_z"] = np.array(float(rng.normal(0.0, init_scale)) if init_scale > 0 else 0.0)
        return ModelParams(kind, backward, arrays)
    if kind == "mlp":
        if env.features is None or env.edge_action is None:
            raise ValueError("MLP model needs an environment with features and action ids")
        n_out = env.num_actions + 1 + (env.num_actions if backward == "learned" else 0)
        sizes = [env.features.shape[1], hidden, hidden, n_out]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(a)
            arrays[f"W{i}"] = rng.uniform(-bound, bound, size=(a, b))
            arrays[f"b{i}"] = np.zeros(b)
        arrays["log_z"] = np.array(0.0)
        return ModelParams(kind, backward, arrays, hidden)
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------- tables

def _segment_log_softmax(z: np.ndarray, order: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    """Log-softmax of ``z`` within segments ``order[ptr[i]:ptr[i+1]]``."""
    zs = z[order]
    starts = ptr[:-1][np.diff(ptr) > 0]
    seg = np.repeat(np.arange(len(starts)), np.diff(np.append(starts, len(zs))))
    m = np.maximum.reduceat(zs, starts)
    ex = np.exp(zs - m[seg])
    lse = np.log(np.add.reduceat(ex, starts)) + m
    out = np.empty_like(z)
    out[order] = zs - lse[seg]
    return out


def _segment_sum(x: np.ndarray, order: np.ndarray, ptr: np.ndarray, n_edges: int) -> np.ndarray:
    """Per-edge value of the sum of ``x`` over the edge's segment."""
    xs = x[order]
    starts = ptr[:-1][np.diff(ptr) > 0]
    sizes = np.diff(np.append(starts, len(xs)))
    sums = np.add.reduceat(xs, starts)
    out = np.empty(n_edges)
    out[order] = np.repeat(sums, sizes)
    return out


def _leaky(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def _mlp_forward(params: ModelParams, x: np.ndarray):
    a = params.arrays
    pre0 = x @ a["W0"] + a["b0"]
    h0 = _leaky(pre0)
    pre1 = h0 @ a["W1"] + a["b1"]
    h1 = _leaky(pre1)
    out = h1 @ a["W2"] + a["b2"]
    return out, (x, pre0, h0, pre1, h1)


def _mlp_backward(params: ModelParams, cache, d_out: np.ndarray) -> dict[str, np.ndarray]:
    a = params.arrays
    x, pre0, h0, pre1, h1 = cache
    grads = {"W2": h1.T @ d_out, "b2": d_out.sum(0)}
    d_h1 = d_out @ a["W2"].T
    d_pre1 = d_h1 * np.where(pre1 > 0, 1.0, LEAKY_SLOPE)
    grads["W1"] = h0.T @ d_pre1
    grads["b1"] = d_pre1.sum(0)
    d_h0 = d_pre1 @ a["W1"].T
    d_pre0 = d_h0 * np.where(pre0 > 0, 1.0, LEAKY_SLOPE)
    grads["W0"] = x.T @ d_pre0
    grads["b0"] = d_pre0.sum(0)
    return grads


def policy_tables(params: ModelParams, env: Env) -> PolicyTables:
    g = env.graph
    E = g.num_edges
    fwd_order = np.arange(E)
    cache: dict = {}
    if params.kind == "tabular":
        f_logits = params.arrays["forward_logits"]
        b_logits = params.arrays.get("backward_logits")
        log_flow = params.arrays["log_flow"].astype(np.float64, copy=True)
    else:
        out, mlp_cache = _mlp_forward(params, env.features)
        cache["mlp"] = mlp_cache
        A = env.num_actions
        f_logits = out[g.edge_src, env.edge_action]
        log_flow = out[:, A].copy()
        b_logits = out[g.edge_dst, A + 1 + env.edge_action] if params.backward == "learned" else None
    log_z = params.log_z
    log_flow[g.source] = log_z
    log_flow[g.sink] = log_z

    raw_pf = _segment_log_softmax(f_logits, fwd_order, g.child_ptr)
    term = g.edge_dst == g.sink
    if params.backward == "learned":
        raw_pb = _segment_log_softmax(b_logits, g.parent_edges, g.parent_ptr)
    else:
        raw_pb = -np.log(g.in_degree()[g.edge_dst].astype(np.float64))
    raw_pb[term] = env.log_reward[g.edge_src[term]] - log_z
    pf_clamped = raw_pf < LOG_PROB_FLOOR
    pb_clamped = raw_pb < LOG_PROB_FLOOR
    return PolicyTables(
        log_pf=np.maximum(raw_pf, LOG_PROB_FLOOR),
        log_pb=np.maximum(raw_pb, LOG_PROB_FLOOR),
        log_flow=log_flow,
        log_z=log_z,
        pf=np.exp(raw_pf),
        pb=np.exp(raw_pb),
        pf_clamped=pf_clamped,
        pb_clamped=pb_clamped,
        cache=cache,
    )


def backprop_tables(params: ModelParams, env: Env, tables: PolicyTables, d_log_pf: np.ndarray,
                    d_log_pb: np.ndarray | None, d_log_flow: np.ndarray) -> dict[str, np.ndarray]:
    """Chain gradients w.r.t. the tables into gradients w.r.t. ``params``.

    ``d_log_flow`` at the source is routed to ``log_z``; the sink entry is
    ignored. Gradients on terminal entries of ``d_log_pb`` are ignored.
    """
    g = env.graph
    E = g.num_edges
    d_pf = np.where(tables.pf_clamped, 0.0, d_log_pf)
    d_f_logits = d_pf - tables.pf * _segment_sum(d_pf, np.arange(E), g.child_ptr, E)
    d_b_logits = None
    if params.backward == "learned" and d_log_pb is not None:
        term = g.edge_dst == g.sink
        d_pb = np.where(tables.pb_clamped | term, 0.0, d_log_pb)
        d_b_logits = d_pb - tables.pb * _segment_sum(d_pb, g.parent_edges, g.parent_ptr, E)
        d_b_logits[term] = 0.0
    d_flow = np.array(d_log_flow, dtype=np.float64, copy=True)
    d_log_z = float(d_flow[g.source])
    d_flow[g.source] = 0.0
    d_flow[g.sink] = 0.0
    grads: dict[str, np.ndarray] = {"log_z": np.array(d_log_z)}
    if params.kind == "tabular":
        grads["forward_logits"] = d_f_logits
        grads["log_flow"] = d_flow
        if params.backward == "learned":
            grads["backward_logits"] = d_b_logits if d_b_logits is not None else np.zeros(E)
        return grads
    A = env.num_actions
    d_out = np.zeros((g.num_states, params.arrays["b2"].shape[0]))
    np.add.at(d_out, (g.edge_src, env.edge_action), d_f_logits)
    d_out[:, A] = d_flow
    if d_b_logits is not None:
        np.add.at(d_out, (g.edge_dst, A + 1 + env.edge_action), d_b_logits)
    grads.update(_mlp_backward(params, tables.cache["mlp"], d_out))
    return grads


# ---------------------------------------------------------- distributions

def forward_dist(params: ModelParams, env: Env, s: int, tables: PolicyTables | None = None) -> np.ndarray:
    """P_F(. | s) over ``env.graph.children(s)``."""
    g = env.graph
    if g.out_degree()[s] == 0:
        raise ValueError(f"state {s} has no children")
    t = tables or policy_tables(params, env)
    return t.pf[g.child_edges(s)]


def backward_dist(params: ModelParams, env: Env, s: int, tables: PolicyTables | None = None) -> np.ndarray:
    """P_B(. | s) over ``env.graph.parents(s)``; at the sink this is the fixed
    reward-proportional distribution R(x) / sum R."""
    g = env.graph
    if s == g.source:
        raise ValueError("the source has no parents")
    if s == g.sink:
        lr = env.log_reward[g.parents(s)]
        w = np.exp(lr - lr.max())
        return w / w.sum()
    t = tables or policy_tables(params, env)
    return t.pb[g.parent_in_edges(s)]


# ---------------------------------------------------------------- sampling

def sample_trajectory(params: ModelParams, env: Env, epsilon: float, rng: np.random.Generator,
                      tables: PolicyTables | None = None) -> Trajectory:
    """One complete trajectory from (1 - eps) * P_F + eps * Uniform(children)."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    g = env.graph
    t = tables or policy_tables(params, env)
    s = g.source
    path = [s]
    while s != g.sink:
        lo, hi = g.child_ptr[s], g.child_ptr[s + 1]
        if hi - lo == 1:
            k = 0
        else:
            p = (1.0 - epsilon) * t.pf[lo:hi] + epsilon / (hi - lo)
            c = np.cumsum(p)
            k = min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), hi - lo - 1)
        s = int(g.edge_dst[lo + k])
        path.append(s)
    return Trajectory(tuple(path), True)


def sample_batch(params: ModelParams, env: Env, n: int, epsilon: float, rng: np.random.Generator,
                 tables: PolicyTables | None = None) -> list[Trajectory]:
    t = tables or policy_tables(params, env)
    return [sample_trajectory(params, env, epsilon, rng, t) for _ in range(n)]


def sample_backward(params: ModelParams, env: Env, x: int, rng: np.random.Generator,
                    tables: PolicyTables | None = None) -> Trajectory:
    """Complete trajectory ending x -> sink, built backwards from P_B."""
    g = env.graph
    t = tables or policy_tables(params, env)
    s = x
    rev = [g.sink, x]
    while s != g.source:
        edges = g.parent_in_edges(s)
        p = t.pb[edges]
        c = np.cumsum(p)
        k = min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), len(edges) - 1)
        s = int(g.edge_src[edges[k]])
        rev.append(s)
    return Trajectory(tuple(reversed(rev)), True)


# ----------------------------------------------------------------- Adam

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    lr_log_z: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams, lr: float = 1e-3, lr_log_z: float = 0.1, **kw):
        zeros = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.arrays.items()}
        return cls({k: z.copy() for k, z in zeros.items()}, zeros, 0, lr, lr_log_z, **kw)

    def copy(self) -> "OptimizerState":
        return OptimizerState({k: v.copy() for k, v in self.m.items()},
                              {k: v.copy() for k, v in self.v.items()},
                              self.step, self.lr, self.lr_log_z, self.beta1, self.beta2, self.eps)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], opt: OptimizerState):
    """Bias-corrected Adam update; returns new ``(params, opt)``."""
    for k, gr in grads.items():
        if k not in params.arrays:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if np.shape(gr) != params.arrays[k].shape:
            raise ValueError(f"gradient shape mismatch for {k!r}")
        if not np.all(np.isfinite(gr)):
            raise NonFiniteGradient(k)
    new_p = params.copy()
    new_o = opt.copy()
    new_o.step += 1
    t = new_o.step
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for k, gr in grads.items():
        m = opt.beta1 * opt.m[k] + (1.0 - opt.beta1) * gr
        v = opt.beta2 * opt.v[k] + (1.0 - opt.beta2) * gr * gr
        new_o.m[k], new_o.v[k] = m, v
        lr = opt.lr_log_z if k == "log_z" else opt.lr
        new_p.arrays[k] = params.arrays[k] - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return new_p, new_o


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# ------------------------------------------------------------ checkpoints

def _atomic_write_bytes(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str, params: ModelParams, opt: OptimizerState | None = None,
                    step: int = 0, meta: dict | None = None) -> None:
    header = {"version": CHECKPOINT_VERSION, "kind": params.kind, "backward": params.backward,
              "hidden": params.hidden, "step": step, "meta": meta or {}}
    blobs = {f"param/{k}": v for k, v in params.arrays.items()}
    if opt is not None:
        header["opt"] = {"step": opt.step, "lr": opt.lr, "lr_log_z": opt.lr_log_z,
                         "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
        blobs.update({f"adam_m/{k}": v for k, v in opt.m.items()})
        blobs.update({f"adam_v/{k}": v for k, v in opt.v.items()})
    blobs["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **blobs)
    _atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str):
    """Returns ``(params, opt_or_None, step, meta)``."""
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        arrays = {k[6:]: z[k].copy() for k in z.files if k.startswith("param/")}
        params = ModelParams(header["kind"], header["backward"], arrays, header["hidden"])
        opt = None
        if "opt" in header:
            o = header["opt"]
            opt = OptimizerState({k[7:]: z[k].copy() for k in z.files if k.startswith("adam_m/")},
                                 {k[7:]: z[k].copy() for k in z.files if k.startswith("adam_v/")},
                                 o["step"], o["lr"], o["lr_log_z"], o["beta1"], o["beta2"], o["eps"])
    return params, opt, header["step"], header["meta"]


def tables_from_probabilities(env: Env, pf: np.ndarray, log_flow: np.ndarray | None = None,
                              pb: np.ndarray | None = None, log_z: float | None = None) -> PolicyTables:
    """Tables built directly from per-edge probabilities (oracle and tests)."""
    g = env.graph
    term = g.edge_dst == g.sink
    if pb is None:
        pb = 1.0 / g.in_degree()[g.edge_dst].astype(np.float64)
    pb = np.array(pb, dtype=np.float64, copy=True)
    if log_z is None:
        log_z = float(np.log(np.sum(env.terminal_rewards())))
    pb[term] = np.exp(env.log_reward[g.edge_src[term]] - log_z)
    lf = np.zeros(g.num_states) if log_flow is None else np.array(log_flow, dtype=np.float64)
    lf[g.source] = log_z
    lf[g.sink] = log_z
    with np.errstate(divide="ignore"):
        lpf, lpb = np.log(pf), np.log(pb)
    return PolicyTables(np.maximum(lpf, LOG_PROB_FLOOR), np.maximum(lpb, LOG_PROB_FLOOR), lf, log_z,
                        np.asarray(pf, dtype=np.float64), pb, lpf < LOG_PROB_FLOOR, lpb < LOG_PROB_FLOOR)


def graph_of(env_or_graph) -> DagGraph:
    return env_or_graph.graph if isinstance(env_or_graph, Env) else env_or_graph
