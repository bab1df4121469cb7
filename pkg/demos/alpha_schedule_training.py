"""Train a tabular policy with a two-stage alpha schedule and watch the
metrics: high alpha early, then exponential decay back to 0.5.

Run:  python demos/alpha_schedule_training.py  [steps]
"""
import sys

from alphagfn.schedule import ScheduleSpec, alpha_at
from alphagfn.trainer import RunConfig, train_run

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
sched = ScheduleSpec.from_fraction(steps, alpha0=0.9, stage1_fraction=0.5)
print("alpha at 1, N1, N1 + (N-N1)/2, N:",
      [round(alpha_at(sched, n), 4) for n in (1, sched.stage1_steps, (sched.stage1_steps + steps) // 2, steps)])

cfg = RunConfig(steps=steps, alpha0=0.9, stage1_fraction=0.5, eval_every=steps // 10, seed=0)
print(f"{'step':>6} {'alpha':>7} {'loss':>10} {'modes':>6} {'spearman':>9} {'entropy':>8}")
train_run(cfg, on_record=lambda r: print(
    f"{r.step:>6} {r.alpha:7.4f} {r.loss:10.4g} {r.modes:>6} {r.spearman:9.4f} {r.entropy:8.4f}"))
