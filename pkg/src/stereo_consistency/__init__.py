"""Stereo feature-consistency losses, a toy stereo network and a synthetic stereo corpus."""

__version__ = "0.1.0"

from .data import DomainStyle, SceneSpec, Layer, StereoSample, apply_style, generate_corpus, generate_rds
from .geometry import (
    MatchMask,
    PositivePairSet,
    ReprojectionField,
    collect_positive_pairs,
    matching_mask,
    reprojection_error,
)
from .io import read_disparity, write_disparity
from .metrics import MetricsReport, cosine_consistency, d1, per_channel_inconsistency, threshold_error_rate
from .net import NetworkConfig, StereoNet, TotalLossConfig, build_cost_volume, infer, soft_argmin, total_loss
from .scf import FeatureMap, MomentumEncoderPair, NegativeQueue, ScfConfig, momentum_update, queue_push, scf_loss
from .ssw import SswConfig, covariance, instance_normalize, select_mask, ssw_loss, variance_matrix
