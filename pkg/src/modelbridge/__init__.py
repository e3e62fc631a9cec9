"""Parameter-efficient cross-modal transfer through a low-rank bridge between frozen encoders."""

from .autodiff import Parameter, ShapeError, Tape, Tensor, backward, grad_check
from .bridge import (BridgeParams, BridgeShapeSpec, bridge_forward, bridge_param_count, full_rank_param_count,
                     grid_search, init_bridge)
from .checkpoint import load_checkpoint, save_checkpoint
from .cka import DegenerateRepresentationError, cka_linear, hsic
from .data import (DatasetSplits, LabelAccessError, LatentTaskSpec, ModalitySpec, PairedDataset,
                   generate_paired_dataset, read_dataset, split_dataset, subsample_pair_fraction, write_dataset)
from .experiment import (ConfigError, ExperimentConfig, ExperimentReport, TransferReport, export_report,
                         fixed_position_ablation, prepare_seed, run_experiment)
from .metrics import MetricSet, balanced_accuracy, evaluate, f1_scores
from .models import EncoderModel, LayerSpec, TaskHead, TrainingDivergedError, build_encoder
from .optim import Adam, OptimizerState, optimizer_step
from .probing import select_input_position
from .transfer import (BridgedModel, alignment_loss, bridged_predict, infonce, select_output_position,
                       train_bridge, train_kd, train_kd_contrast)

__version__ = "0.1.0"
