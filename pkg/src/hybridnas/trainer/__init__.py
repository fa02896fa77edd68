"""Bi-level search loop, optimisers, data splits and checkpoints."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .loop import (RunConfig, SearchResult, SearchRun, desk_run_config, evaluate, kfold_evaluate, load_config,
                   param_hash, predict, run_search)
from .optim import SGD, Adam, adam_step, cosine_lr, sgd_step
from .splits import SplitPlan, make_splits

__all__ = ["Adam", "Checkpoint", "RunConfig", "SGD", "SearchResult", "SearchRun", "SplitPlan",
           "adam_step", "cosine_lr", "desk_run_config", "evaluate", "kfold_evaluate", "load_checkpoint",
           "load_config", "make_splits", "param_hash", "predict", "run_search", "save_checkpoint",
           "sgd_step"]
