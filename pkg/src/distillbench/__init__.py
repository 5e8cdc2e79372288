"""Desk-scale knowledge distillation with projector ensembles."""

from .datasets import Dataset, gen_gaussian_mixture, load_csv, save_csv, split
from .netcore import Network, load_checkpoint, save_checkpoint
from .projectors import LogitProjector, ProjectorEnsemble, build_ensemble
from .trainer import DistillConfig, NetSpec, distill, evaluate, run_sweep, train_teacher

__all__ = [
    "Dataset", "DistillConfig", "LogitProjector", "NetSpec", "Network", "ProjectorEnsemble",
    "build_ensemble", "distill", "evaluate", "gen_gaussian_mixture", "load_checkpoint", "load_csv",
    "run_sweep", "save_checkpoint", "save_csv", "split", "train_teacher",
]
