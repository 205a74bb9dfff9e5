"""Self-healing cluster management: LSTM feature encoder, SVM/AE/VAE fault
detectors, failure predictor and a tabular Q-learning healer, trained and
evaluated against a seeded discrete-event cluster simulator."""

from .cluster_sim import (
    FaultClass,
    RecoveryAction,
    SimConfig,
    Simulation,
    Status,
    generate_dataset,
    load_dataset,
    recovery_time,
    reward,
    save_dataset,
)
from .detectors import DetectorStack, FusionConfig, fuse_and_detect, hinge_loss, kl_standard_normal
from .features import make_windows, normalize_fit
from .harness import ExperimentConfig, MetricsReport, accuracy, load_config, run_experiment, stability_score
from .healer import AgentState, QTable, q_update, run_episode, train_q
from .nn_core import LstmCellParams, SgdConfig, grad_check, lstm_backward, lstm_forward, sgd_step
from .predictor import PredictorModel, predict_failure
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, total_loss, train

__version__ = "0.1.0"
