"""Montage-agnostic sleep staging on a small numpy autodiff core."""

from .data import Channel, Dataset, Record, kfold_split, load_record, open_dataset, save_record, window_batches
from .dsp import PreprocessConfig, preprocess_signal, robust_scale, stft
from .inference import StagePrediction, geometric_aggregate, predict_record
from .metrics import F1Result, TransferReport, accuracy, confusion_matrix, macro_f1, transfer_metrics
from .model import (
    ModelConfig,
    RobustSleepNet,
    channel_count_probabilities,
    count_parameters,
    load_checkpoint,
    model_forward,
    sample_channel_count,
    save_checkpoint,
    select_channels,
)
from .protocols import HygieneLog, run_dt, run_ft, run_lfs, run_sweep, run_transfer_matrix
from .synthetic import SyntheticSpec, generate_synthetic_dataset, synthetic_record
from .tensor import ContractError, DomainError, ShapeError, Tensor, gradient_check, no_grad, precision
from .training import PreparedRecord, TrainConfig, prepare_record, prepare_records, train_model

__version__ = "0.1.0"
