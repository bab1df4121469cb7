"""Two-stage alpha training loop with online evaluation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .envs import Env, build_env
from .model import (ModelParams, OptimizerState, adam_step, clip_grad_norm, init_params,
                    policy_tables, sample_batch, _atomic_write_bytes)
from .objectives import ObjectiveSpec, batch_loss_and_grads, default_lambda
from .oracle import exact_terminating_probs
from .metrics import policy_entropy, spearman, topk_mean_reward
from .schedule import ScheduleSpec, alpha_at

CSV_HEADER = ("step", "alpha", "epsilon", "loss", "modes", "topk_reward", "spearman", "entropy",
              "mean_length")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


@dataclass
class RunConfig:
    env_kind: str = "setgen"
    env: dict = field(default_factory=dict)
    env_seed: int = 0
    objective: str = "DB"
    lam: float | None = None
    alpha0: float = 0.5
    stage1_fraction: float = 0.9
    decay_rate: float = 4.0
    steps: int = 5000
    batch_size: int = 16
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    model: str = "tabular"
    hidden: int = 64
    backward: str = "uniform"
    lr: float | None = None
    lr_log_z: float = 0.1
    grad_clip: float = 0.0
    eval_every: int = 100
    eval_samples: int = 64
    topk: int = 100
    seed: int = 0
    init_seed: int = 0

    def __post_init__(self):
        if self.lr is None:
            # per-edge tables need a larger step than shared MLP weights
            self.lr = 0.01 if self.model == "tabular" else 1e-3
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise ValueError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if self.steps < 0 or self.eval_every < 1 or self.eval_samples < 1 or self.topk < 1:
            raise ValueError("steps >= 0, eval_every >= 1, eval_samples >= 1, topk >= 1 required")
        self.objective_spec()  # validates kind, alpha0, lambda
        if self.steps:
            self.schedule_spec()

    @property
    def lam_value(self) -> float:
        return default_lambda(self.env_kind) if self.lam is None else self.lam

    def objective_spec(self, alpha: float | None = None) -> ObjectiveSpec:
        return ObjectiveSpec(self.objective, self.alpha0 if alpha is None else alpha, self.lam_value)

    def schedule_spec(self) -> ScheduleSpec:
        return ScheduleSpec.from_fraction(self.steps, self.alpha0, self.stage1_fraction, self.decay_rate)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsRecord:
    step: int
    alpha: float
    epsilon: float
    loss: float
    modes: int
    topk_reward: float
    spearman: float
    entropy: float
    mean_length: float

    def csv_row(self) -> str:
        vals = [str(self.step)]
        for name in CSV_HEADER[1:]:
            v = getattr(self, name)
            vals.append(str(v) if isinstance(v, (int, np.integer)) else f"{float(v):.17g}")
        return ",".join(vals)


@dataclass
class TrainResult:
    params: ModelParams
    records: list[MetricsRecord]
    opt: OptimizerState
    env: Env
    training_terminals: set = field(default_factory=set)


def epsilon_at(cfg: RunConfig, n: int) -> float:
    """Linear anneal: epsilon_start at step 1, epsilon_end at the last step."""
    if cfg.steps <= 1:
        return cfg.epsilon_start
    frac = (n - 1) / (cfg.steps - 1)
    # two-sided form hits both endpoints exactly
    return cfg.epsilon_start * (1.0 - frac) + cfg.epsilon_end * frac


def make_env(cfg: RunConfig) -> Env:
    return build_env(cfg.env_kind, cfg.env, cfg.env_seed)


def train_run(cfg: RunConfig, env: Env | None = None,
              on_record: Callable[[MetricsRecord], None] | None = None) -> TrainResult:
    env = env or make_env(cfg)
    g = env.graph
    params = init_params(env, cfg.model, seed=cfg.init_seed, hidden=cfg.hidden, backward=cfg.backward)
    opt = OptimizerState.for_params(params, lr=cfg.lr, lr_log_z=cfg.lr_log_z)
    records: list[MetricsRecord] = []
    seen: set[int] = set()
    if cfg.steps == 0:
        return TrainResult(params, records, opt, env, seen)
    sched = cfg.schedule_spec()
    rng = np.random.default_rng([cfg.seed, 0])
    eval_rng = np.random.default_rng([cfg.seed, 1])
    terminals = env.terminals
    log_r = env.log_reward[terminals]
    eval_seen: set[int] = set()
    loss_acc, loss_count = 0.0, 0
    for n in range(1, cfg.steps + 1):
        alpha = alpha_at(sched, n)
        eps = epsilon_at(cfg, n)
        tables = policy_tables(params, env)
        batch = sample_batch(params, env, cfg.batch_size, eps, rng, tables)
        loss, grads = batch_loss_and_grads(params, env, batch, cfg.objective_spec(alpha), tables)
        if not math.isfinite(loss):
            raise NonFiniteLoss(n, loss)
        if cfg.grad_clip > 0:
            clip_grad_norm(grads, cfg.grad_clip)
        params, opt = adam_step(params, grads, opt)
        seen.update(t.states[-2] for t in batch)
        loss_acc += loss
        loss_count += 1
        if n % cfg.eval_every == 0 or n == cfg.steps:
            tables = policy_tables(params, env)
            ev = sample_batch(params, env, cfg.eval_samples, 0.0, eval_rng, tables)
            eval_terms = [t.states[-2] for t in ev]
            eval_seen.update(eval_terms)
            visited = sorted({s for t in ev for s in t.states[:-1]})
            probs = exact_terminating_probs(tables, env)
            rec = MetricsRecord(
                step=n, alpha=alpha, epsilon=eps, loss=loss_acc / loss_count,
                modes=env.count_modes(seen),
                topk_reward=topk_mean_reward(eval_seen, env, cfg.topk),
                spearman=spearman(probs, log_r),
                entropy=policy_entropy(tables, env, visited),
                mean_length=float(np.mean([t.num_edges for t in ev])),
            )
            records.append(rec)
            if on_record is not None:
                on_record(rec)
            loss_acc, loss_count = 0.0, 0
    return TrainResult(params, records, opt, env, seen)


def train(cfg: RunConfig, env: Env | None = None) -> tuple[ModelParams, list[MetricsRecord]]:
    res = train_run(cfg, env)
    return res.params, res.records


def metrics_csv(records: list[MetricsRecord]) -> str:
    return "\n".join([",".join(CSV_HEADER)] + [r.csv_row() for r in records]) + "\n"


def write_metrics_csv(path: str, records: list[MetricsRecord]) -> None:
    _atomic_write_bytes(path, metrics_csv(records).encode())
