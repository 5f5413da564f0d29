"""Masked-autoencoder pretraining for a hierarchical volumetric transformer
segmenter, built on a self-contained numpy reverse-mode autodiff engine,
with a seeded phantom data generator and a scratch-vs-pretrained experiment
harness."""

from .autodiff import (GradientMap, Tensor, backward, concat, gelu, grad_check,
                       layer_norm, log_softmax, matmul, no_grad, softmax)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import (ConfigError, ContractError, DataError, NumericsError,
                     ParseError, TransferError, VoxmaeError)
from .experiment import (ExperimentArm, ExperimentConfig, ExperimentReport,
                         emit_report, load_report, run_experiment)
from .mae import MaeConfig, MaeModel, mae_forward, masked_mse_loss, pretrain
from .metrics import MetricReport, dice_score, epochs_to_threshold, evaluate
from .patches import (MaskPlan, PatchGrid, PatchSequence, gather_visible,
                      patchify, positional_encoding, sample_mask, scatter_full,
                      unpatchify)
from .phantom import (Dataset, PhantomConfig, generate_dataset, generate_phantom,
                      load_dataset, save_dataset)
from .rng import Rng
from .segmenter import (SegConfig, SegModel, SegPrediction, decoder_forward,
                        dice_ce_loss, finetune, subsample_labeled, transfer_encoder)
from .transformer import EncoderConfig, StageFeatures, VoxelEncoder
from .volume import LabelMap, Volume, normalize_volume, read_volume, write_volume

__version__ = "0.1.0"
