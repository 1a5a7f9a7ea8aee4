"""Anomaly detectors that infer which training rows are anomalous while they fit."""

from .backbones import DsvddRbf, IclBackbone, NtlBackbone, batch_dual_losses
from .data import ContaminatedDataset, contaminate, gen_toy, load_csv, save_csv, split
from .metrics import auc, f1_top_k
from .trainer import TrainerConfig, assign_labels, joint_loss, train, training_scores

__all__ = [
    "ContaminatedDataset", "DsvddRbf", "IclBackbone", "NtlBackbone", "TrainerConfig",
    "assign_labels", "auc", "batch_dual_losses", "contaminate", "f1_top_k", "gen_toy",
    "joint_loss", "load_csv", "save_csv", "split", "train", "training_scores",
]
__version__ = "0.1.0"
