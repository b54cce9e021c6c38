"""Groupwise atlas construction toolkit.

Feed-forward atlas construction for groups of images: a set-equivariant
UNet predicts one stationary velocity field per group member, a centrality
projection removes the group-mean bias, and the atlas is the mean of the
warped members.  A classical iterative optimizer, a synthetic data
generator, and an evaluation harness round out the pipeline.
"""

from .fields import (
    integrate_svf,
    compose,
    warp_image,
    warp_seg,
    jacobian_det,
    count_folds,
    centrality,
)
from .groupnet import NetConfig, GroupNet, centrality_project
from .losses import LossWeights, lncc_similarity, grad_penalty, soft_dice_loss, group_loss
from .atlas import build_atlas, build_atlas_seg, subgroup_select, AtlasResult, SubgroupFilter
from .baseline import IterConfig, iterative_atlas, objective_trace
from .trainer import TrainConfig, train, sample_group, gradcheck
from .data import GroupBatch, GroupMember
from .estimators import GroupAtlasEstimator, IterativeAtlasEstimator

__all__ = [
    "integrate_svf",
    "compose",
    "warp_image",
    "warp_seg",
    "jacobian_det",
    "count_folds",
    "centrality",
    "NetConfig",
    "GroupNet",
    "centrality_project",
    "LossWeights",
    "lncc_similarity",
    "grad_penalty",
    "soft_dice_loss",
    "group_loss",
    "build_atlas",
    "build_atlas_seg",
    "subgroup_select",
    "AtlasResult",
    "SubgroupFilter",
    "IterConfig",
    "iterative_atlas",
    "objective_trace",
    "TrainConfig",
    "train",
    "sample_group",
    "gradcheck",
    "GroupBatch",
    "GroupMember",
    "GroupAtlasEstimator",
    "IterativeAtlasEstimator",
]

__version__ = "0.1.0"
