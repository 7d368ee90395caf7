"""Time-aware gradient attacks on DDNE dynamic link prediction."""

__version__ = "0.1.0"

from .attack import AttackConfig, TargetLink, cna, fga, ra, tga_gre, tga_tra, time_aware_gradient
from .ddne import DdneHyper, DdneModel, predict_row, train
from .dynnet import DynamicNetwork, NodeHistory, SnapshotSpec, history, ingest_edge_list
from .evalharness import (
    AttackReport, SyntheticSpec, TargetSelection, aml, asr, gain, generate_synthetic,
    run_experiment, select_targets,
)

__all__ = [
    "AttackConfig", "AttackReport", "DdneHyper", "DdneModel", "DynamicNetwork", "NodeHistory",
    "SnapshotSpec", "SyntheticSpec", "TargetLink", "TargetSelection", "aml", "asr", "cna", "fga",
    "gain", "generate_synthetic", "history", "ingest_edge_list", "predict_row", "ra",
    "run_experiment", "select_targets", "tga_gre", "tga_tra", "time_aware_gradient", "train",
]
