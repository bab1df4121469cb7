"""Command-line entry point: ``alphagfn train|sweep|analyze|verify``."""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import mc
from .checks import INJECTIONS, run_checks
from .config import ConfigError, dump_config, load_config, reference_text, run_config
from .model import NonFiniteGradient, _atomic_write_bytes, init_params, load_checkpoint, policy_tables, save_checkpoint
from .trainer import NonFiniteLoss, RunConfig, make_env, metrics_csv, train_run

OUT_ENV_VAR = "ALPHAGFN_OUT"


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def _write_text(path: str, text: str) -> None:
    _atomic_write_bytes(path, text.encode())


def _json_ready(obj):
    if isinstance(obj, dict):
        return {str(k): _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def _write_json(path: str, obj) -> None:
    _write_text(path, json.dumps(_json_ready(obj), indent=2, sort_keys=True) + "\n")


def _out_dir(args, sub: str) -> str:
    if args.out:
        return args.out
    return os.path.join(os.environ.get(OUT_ENV_VAR, "runs"), sub)


def _seeds(args, default: int) -> list[int]:
    if not args.seeds:
        return [default]
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be comma-separated integers: {args.seeds!r}") from exc
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


def _run_one(rc_dict: dict) -> dict:
    """Worker body: one training run, returns its final record and outputs."""
    rc = RunConfig(**rc_dict)
    res = train_run(rc)
    last = res.records[-1] if res.records else None
    return {"csv": metrics_csv(res.records), "final": None if last is None else vars(last),
            "params": res.params, "opt": res.opt}


def _summary(rc: RunConfig, final: dict | None) -> dict:
    return {"steps": rc.steps, "seed": rc.seed, "alpha0": rc.alpha0, "objective": rc.objective,
            "env_kind": rc.env_kind, "final": final}


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.override)
    base = run_config(cfg)
    out = _out_dir(args, "train")
    os.makedirs(out, exist_ok=True)
    _write_text(os.path.join(out, "config.yaml"), dump_config(cfg))
    seeds = _seeds(args, base.seed)
    jobs = []
    for seed in seeds:
        d = base.to_dict()
        d["seed"] = seed
        jobs.append(d)
    results = _map(jobs, args.parallel)
    for seed, res in zip(seeds, results):
        target = out if len(seeds) == 1 else os.path.join(out, f"seed_{seed}")
        os.makedirs(target, exist_ok=True)
        _write_text(os.path.join(target, "metrics.csv"), res["csv"])
        save_checkpoint(os.path.join(target, "checkpoint.npz"), res["params"], res["opt"],
                        step=base.steps, meta={"seed": seed})
        _write_json(os.path.join(target, "summary.json"), _summary(RunConfig(**{**base.to_dict(), "seed": seed}), res["final"]))
        fin = res["final"]
        if fin:
            print(f"seed {seed}: step {fin['step']} loss {fin['loss']:.6g} modes {fin['modes']} "
                  f"spearman {fin['spearman']:.6f} -> {target}")
        else:
            print(f"seed {seed}: no steps run -> {target}")
    return 0


def _map(jobs: list[dict], parallel: int) -> list[dict]:
    if parallel and parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]


SWEEP_METRICS = ("modes", "topk_reward", "spearman")


def sweep_table(alphas, finals: dict) -> str:
    """CSV with one row per (metric, stat) and one column per alpha.

    ``finals`` maps alpha -> list of final-record dicts (one per seed).
    """
    header = ["metric", "stat"] + [f"alpha={a:g}" for a in alphas]
    rows = [",".join(header)]
    for m in SWEEP_METRICS:
        for stat in ("mean", "std"):
            cells = []
            for a in alphas:
                vals = np.array([f[m] for f in finals[a]], dtype=np.float64)
                cells.append(_fmt(vals.mean() if stat == "mean" else vals.std(ddof=0)))
            rows.append(",".join([m, stat] + cells))
    return "\n".join(rows) + "\n"


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.override)
    base = run_config(cfg)
    alphas = [float(a) for a in cfg["sweep"]["alphas"]]
    if not alphas:
        raise ConfigError("sweep.alphas is empty")
    seeds = _seeds(args, base.seed)
    out = _out_dir(args, "sweep")
    os.makedirs(os.path.join(out, "runs"), exist_ok=True)
    _write_text(os.path.join(out, "config.yaml"), dump_config(cfg))
    jobs, keys = [], []
    for a in alphas:
        for seed in seeds:
            d = base.to_dict()
            d.update(alpha0=a, seed=seed)
            RunConfig(**d)  # validate before launching
            jobs.append(d)
            keys.append((a, seed))
    results = _map(jobs, args.parallel)
    finals: dict = {a: [] for a in alphas}
    for (a, seed), res in zip(keys, results):
        _write_text(os.path.join(out, "runs", f"alpha{a:g}_seed{seed}.csv"), res["csv"])
        if res["final"] is None:
            raise ConfigError("sweep needs train.steps >= 1")
        finals[a].append(res["final"])
    table = sweep_table(alphas, finals)
    _write_text(os.path.join(out, "sweep.csv"), table)
    sys.stdout.write(table)
    return 0


def analysis_report(params, env, alphas, spectrum: bool = True) -> dict:
    g = env.graph
    t = policy_tables(params, env)
    P, mg = mc.forward_kernel(g, t.pf)
    bundle = mc.analyze_chain(P, mg.merged_root, alphas, with_spectrum=spectrum)
    pi_dag = np.exp(t.log_flow)
    rev = {a: mc.reversibility_check(pi_dag, t.pf, t.pb, g, a) for a in (0.5, *alphas)}
    report = {
        "num_merged_states": int(P.shape[0]),
        "is_gfnmc": bundle.criterion.is_gfnmc,
        "criterion_max_residual": bundle.criterion.max_residual,
        "criterion_tolerance": bundle.criterion.tolerance,
        "period": bundle.period,
        "period_mixed": {f"{a:g}": d for a, d in bundle.period_mixed.items()},
        "pi": bundle.pi.tolist(),
        "reversibility_max_residual": {f"{a:g}": v for a, v in rev.items()},
    }
    if spectrum:
        report["beta"] = bundle.beta
        report["beta_mixed"] = {f"{a:g}": b for a, b in bundle.beta_mixed.items()}
    return report


def cmd_analyze(args) -> int:
    cfg = load_config(args.config, args.override)
    rc = run_config(cfg)
    env = make_env(rc)
    ckpt = args.checkpoint or cfg["analyze"]["checkpoint"]
    if ckpt:
        params, _, step, _ = load_checkpoint(ckpt)
    else:
        params, step = init_params(env, rc.model, seed=rc.init_seed, hidden=rc.hidden,
                                   backward=rc.backward), 0
    if env.graph.num_states - 1 > mc.STATE_CAP:
        raise ConfigError(f"merged chain exceeds the {mc.STATE_CAP}-state cap")
    alphas = [float(a) for a in cfg["analyze"]["alphas"]]
    report = analysis_report(params, env, alphas, bool(cfg["analyze"]["spectrum"]))
    report["checkpoint_step"] = step
    out = _out_dir(args, "analyze")
    os.makedirs(out, exist_ok=True)
    _write_text(os.path.join(out, "config.yaml"), dump_config(cfg))
    _write_json(os.path.join(out, "analysis.json"), report)
    print(f"is_gfnmc={report['is_gfnmc']} period={report['period']} "
          f"beta={report.get('beta', float('nan')):.6f} -> {out}")
    return 0


def cmd_verify(args) -> int:
    results = run_checks(tol_scale=args.tol_scale, inject=args.inject,
                         only=args.check or None)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status} {r.check_id}: margin {r.margin:.3e} (tol {r.tolerance:.1e}) {r.detail}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_defaults(args) -> int:
    sys.stdout.write(reference_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="alphagfn", description="alpha-weighted GFlowNet toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=False, default=None, help="YAML config file")
        p.add_argument("--override", action="append", default=[], metavar="K=V",
                       help="dotted-key override, repeatable (e.g. schedule.alpha0=0.9)")
        p.add_argument("--seeds", default=None, help="comma-separated seeds, e.g. 0,1,2")
        p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV_VAR}/<cmd>)")
        p.add_argument("--parallel", type=int, default=1, help="worker processes")

    p = sub.add_parser("train", help="run two-stage training")
    common(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("sweep", help="seeds x alpha grid with mean/std table")
    common(p)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("analyze", help="Markov-chain report for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint .npz (default: untrained model)")
    p.set_defaults(func=cmd_analyze)
    p = sub.add_parser("verify", help="run the property-check suite")
    common(p)
    p.add_argument("--tol-scale", type=float, default=1.0, help="multiply every tolerance")
    p.add_argument("--inject", choices=INJECTIONS, default=None, help="inject a known fault")
    p.add_argument("--check", action="append", default=[], help="run only this check id")
    p.set_defaults(func=cmd_verify)
    p = sub.add_parser("defaults", help="print the annotated configuration reference")
    p.set_defaults(func=cmd_defaults)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, NonFiniteLoss, NonFiniteGradient, OSError) as exc:
        print(f"alphagfn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
