"""Alpha-weighted GFlowNet training, exact oracles and Markov-chain analysis
on enumerable DAGs."""
from .envs import BitSeqSpec, Env, SetGenSpec, build_bitseq, build_env, build_setgen
from .graph import DagGraph, Trajectory, enumerate_complete_trajectories, merge_terminal
from .model import ModelParams, OptimizerState, adam_step, init_params, policy_tables
from .objectives import ObjectiveSpec, alpha_subtb_residual, db_residual, tb_residual
from .schedule import ScheduleSpec, alpha_at
from .trainer import MetricsRecord, RunConfig, train

__version__ = "0.1.0"

__all__ = [
    "BitSeqSpec", "DagGraph", "Env", "MetricsRecord", "ModelParams", "ObjectiveSpec",
    "OptimizerState", "RunConfig", "ScheduleSpec", "SetGenSpec", "Trajectory", "adam_step",
    "alpha_at", "alpha_subtb_residual", "build_bitseq", "build_env", "build_setgen", "db_residual",
    "enumerate_complete_trajectories", "init_params", "merge_terminal", "policy_tables",
    "tb_residual", "train",
]
