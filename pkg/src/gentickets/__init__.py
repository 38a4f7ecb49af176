"""Lottery tickets for small generative models, on a numpy autodiff core."""

from .checkpoint import load_checkpoint, load_ticket, save_checkpoint, save_ticket
from .config import ExperimentConfig, load_config, parse_config
from .data import DatasetHandle, load_idx, make_dataset
from .earlybird import (ChannelMask, EBConfig, MaskHistory, channel_mask, compress, detect_eb,
                        mask_distance, run_earlybird)
from .errors import (ConfigError, ContractError, CorruptionError, DegenerateSaliencyError, DimensionError,
                     FormatError, GenTicketsError, IncompatibleError, NumericError, StructuralError,
                     UnsupportedArchitectureError, UsageError, VersionError)
from .flops import FlopLedger, count_flops
from .harness import ResultRow, emit_csv, emit_svg_curves, run_experiment
from .images import emit_image_grid
from .metrics import (FeatureExtractor, FeatureStats, MetricReport, compute_stats, downstream_accuracy,
                      early_stop_iteration, fid, inception_like_score, matrix_sqrt_psd, train_feature_extractor)
from .models import GenerativeNetwork, ModelConfig, TrainReport, TrainSettings, build_model, train
from .optim import OptimizerState, adam_step
from .pruning import (Mask, PruneSchedule, TicketState, global_magnitude_prune, grasp_prune, one_shot_prune,
                      random_ticket, run_imp, snip_prune, transfer_mask, transfer_ticket)
from .tensor import Parameter, ParamKind, Tape, Tensor

__version__ = "0.1.0"
