"""YAML run configuration with dotted sections and ``key=value`` overrides."""
from __future__ import annotations

import copy
import dataclasses
import re

import yaml

from .envs import BitSeqSpec, SetGenSpec
from .trainer import RunConfig


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (1e-3)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?|\.[0-9_]+)(?:[eE][-+]?[0-9]+)?$
                |^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$""", re.X),
    list("-+0123456789."),
)


def _load_yaml(text):
    return yaml.load(text, Loader=_Loader)


DEFAULTS: dict = {
    "env": {"kind": "setgen", "seed": 0},
    "objective": {"kind": "DB", "lambda": None},
    "schedule": {"alpha0": 0.5, "stage1_fraction": 0.9, "decay_rate": 4.0},
    "train": {
        "steps": 5000, "batch_size": 16, "epsilon_start": 1.0, "epsilon_end": 0.05,
        "model": "tabular", "hidden": 64, "backward": "uniform", "lr": None, "lr_log_z": 0.1,
        "grad_clip": 0.0, "eval_every": 100, "eval_samples": 64, "topk": 100, "seed": 0,
        "init_seed": 0,
    },
    "sweep": {"alphas": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]},
    "analyze": {"alphas": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9], "checkpoint": None,
                "spectrum": True},
}

NOTES = {
    "env.kind": "setgen | bitseq; remaining env.* keys are fields of the chosen spec",
    "env.seed": "seed for element energies (setgen) or target modes (bitseq)",
    "objective.kind": "DB | TB | SubTB_lambda | FL_DB | FL_SubTB_lambda",
    "objective.lambda": "sub-trajectory weight; null picks 0.99 (setgen) or 1.9 (bitseq)",
    "schedule.alpha0": "stage-1 alpha; objective.alpha0 is accepted as an alias",
    "schedule.stage1_fraction": "leading fraction of steps with alpha held at alpha0",
    "schedule.decay_rate": "exponential rate of the stage-2 decay toward 0.5",
    "train.lr": "null picks 0.01 for tabular and 0.001 for mlp",
    "train.lr_log_z": "separate Adam learning rate for log Z",
    "train.grad_clip": "global gradient-norm clip; 0 disables",
    "train.topk": "K for the top-K distinct mean reward",
    "train.seed": "sampling seed; train.init_seed fixes the weight initialisation",
}

_ENV_FIELDS = {
    "setgen": {f.name for f in dataclasses.fields(SetGenSpec)},
    "bitseq": {f.name for f in dataclasses.fields(BitSeqSpec)},
}


def reference_text() -> str:
    """Annotated YAML listing every key with its default."""
    lines = ["# alphagfn configuration reference; every key with its default", ""]
    for section, body in DEFAULTS.items():
        lines.append(f"{section}:")
        for key, val in body.items():
            note = NOTES.get(f"{section}.{key}")
            dumped = yaml.safe_dump(val, default_flow_style=True).strip()
            if dumped.endswith("\n...") or dumped.endswith("..."):
                dumped = dumped.replace("\n...", "").replace("...", "").strip()
            lines.append(f"  {key}: {dumped}" + (f"  # {note}" if note else ""))
        if section == "env":
            for kind, fields in _ENV_FIELDS.items():
                lines.append(f"  # {kind} fields: {', '.join(sorted(fields))}")
        lines.append("")
    return "\n".join(lines)


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) < 2 or not all(parts):
        raise ConfigError(f"override key {key!r} must be dotted, e.g. schedule.alpha0")
    return parts, _load_yaml(raw)


def apply_overrides(cfg: dict, overrides) -> dict:
    out = copy.deepcopy(cfg)
    for text in overrides or ():
        parts, val = parse_override(text)
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-section")
        node[parts[-1]] = val
    return out


def validate_keys(cfg: dict) -> None:
    for section, body in cfg.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        allowed = set(DEFAULTS[section])
        if section == "env":
            kind = body.get("kind", "setgen")
            if kind not in _ENV_FIELDS:
                raise ConfigError(f"unknown env.kind {kind!r}")
            allowed |= _ENV_FIELDS[kind]
        if section == "objective":
            allowed.add("alpha0")
        for key in body:
            if key not in allowed:
                raise ConfigError(f"unknown key {section}.{key}")


def load_config(path: str | None, overrides=()) -> dict:
    user: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                user = _load_yaml(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path!r} is not valid YAML: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a mapping")
    user = apply_overrides(user, overrides)
    validate_keys(user)
    obj = user.get("objective", {})
    if "alpha0" in obj:
        sched = user.setdefault("schedule", {})
        if "alpha0" in sched and sched["alpha0"] != obj["alpha0"]:
            raise ConfigError("objective.alpha0 and schedule.alpha0 disagree")
        sched["alpha0"] = obj.pop("alpha0")
    return _merge(DEFAULTS, user)


def run_config(cfg: dict, **replace) -> RunConfig:
    env = dict(cfg["env"])
    kind = env.pop("kind")
    env_seed = env.pop("seed")
    tr = dict(cfg["train"])
    kw = dict(
        env_kind=kind, env=env, env_seed=int(env_seed),
        objective=cfg["objective"]["kind"], lam=cfg["objective"]["lambda"],
        alpha0=float(cfg["schedule"]["alpha0"]),
        stage1_fraction=float(cfg["schedule"]["stage1_fraction"]),
        decay_rate=float(cfg["schedule"]["decay_rate"]), **tr,
    )
    kw.update(replace)
    try:
        return RunConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)
