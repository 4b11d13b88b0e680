"""Unsupervised cross-camera tracklet association learning on precomputed features."""

from .anchors import AnchorBank, CyclicMatch, bank_from_frames, cyclic_rank, ema_update, init_anchor_bank, update_cross_anchor
from .data import Checkpoint, Dataset, FrameRecord, FrameTable, SyntheticConfig, generate_synthetic, load_checkpoint, load_features, sample_batch, save_checkpoint, save_dataset
from .evaluation import EvalReport, association_rate, cmc_curve, mean_average_precision, tracklet_representation, true_match_rate
from .linalg import DistanceRanking, distance_row, l2_normalize, pair_distance
from .model import EmbeddingHead, LRSchedule, OptimizerState, backward, finite_diff_check, forward, make_head, sgd_step
from .objective import LossBreakdown, association_losses, cross_loss, intra_loss, loss_gradient, total_loss
from .training import RunConfig, Trainer

__version__ = "0.1.0"
