"""Scikit-learn-style facade over the training loop and atlas builders.

``GroupAtlasEstimator.fit`` trains the network (on synthetic data by
default, or a dataset manifest); ``transform`` maps a group of images to
its atlas.  ``IterativeAtlasEstimator`` exposes the classical optimizer
behind the same interface.  Both follow get_params/set_params semantics
so they compose with sklearn tooling.
"""

from __future__ import annotations

import tempfile

from sklearn.base import BaseEstimator, TransformerMixin

from .atlas import build_atlas
from .baseline import IterConfig, iterative_atlas
from .data import GroupBatch, GroupMember, as_tensor, normalize_intensity
from .groupnet import NetConfig
from .losses import LossWeights
from .synthgen import SynthConfig
from .trainer import TrainConfig, load_training_checkpoint, train


def _as_group(X):
    if isinstance(X, GroupBatch):
        return X
    members = [GroupMember(image=normalize_intensity(as_tensor(x))) for x in X]
    return GroupBatch(members)


class GroupAtlasEstimator(BaseEstimator, TransformerMixin):
    """Feed-forward groupwise atlas builder.

    Parameters mirror the network and training configuration; ``fit``
    trains from scratch (synthetic data unless a manifest is passed) and
    ``transform`` runs a single forward pass on a group of images,
    returning the :class:`AtlasResult`.
    """

    def __init__(self, dims=2, statistic="mean", use_group_block=True,
                 use_centrality=True, iterations=5000, learning_rate=5e-4,
                 m_lo=2, m_hi=6, synth_fraction=0.5, lambda_reg=1.0,
                 gamma_seg=0.5, grid=(64, 64), seed=0, out_dir=None):
        self.dims = dims
        self.statistic = statistic
        self.use_group_block = use_group_block
        self.use_centrality = use_centrality
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.m_lo = m_lo
        self.m_hi = m_hi
        self.synth_fraction = synth_fraction
        self.lambda_reg = lambda_reg
        self.gamma_seg = gamma_seg
        self.grid = grid
        self.seed = seed
        self.out_dir = out_dir

    def _net_config(self):
        return NetConfig(
            dims=self.dims,
            statistic=self.statistic,
            use_group_block=self.use_group_block,
            use_centrality=self.use_centrality,
        )

    def _train_config(self):
        return TrainConfig(
            iterations=self.iterations,
            learning_rate=self.learning_rate,
            m_lo=self.m_lo,
            m_hi=self.m_hi,
            synth_fraction=self.synth_fraction,
            weights=LossWeights(lambda_reg=self.lambda_reg, gamma_seg=self.gamma_seg),
            seed=self.seed,
        )

    def fit(self, X=None, y=None, manifest=None):
        """Train the network; X is ignored (data comes from the synthetic
        generator and/or the manifest)."""
        out_dir = self.out_dir or tempfile.mkdtemp(prefix="groupatlas_")
        ckpt = train(
            self._train_config(),
            self._net_config(),
            out_dir,
            manifest=manifest,
            synth_config=SynthConfig(grid=tuple(self.grid)),
        )
        self.checkpoint_dir_ = ckpt
        self.net_, _, _, _ = load_training_checkpoint(ckpt)
        self.net_.eval()
        return self

    @classmethod
    def from_checkpoint(cls, ckpt_dir):
        est = cls()
        est.checkpoint_dir_ = ckpt_dir
        est.net_, _, _, _ = load_training_checkpoint(ckpt_dir)
        est.net_.eval()
        return est

    def transform(self, X):
        """Build the atlas for a GroupBatch (or list of image arrays)."""
        if not hasattr(self, "net_"):
            raise RuntimeError("estimator is not fitted; call fit() or from_checkpoint()")
        return build_atlas(self.net_, _as_group(X))


class IterativeAtlasEstimator(BaseEstimator, TransformerMixin):
    """Classical iterative atlas construction behind the estimator API.

    Stateless: ``fit`` is a no-op; ``transform`` optimizes per-group SVFs
    against an alternating template estimate.
    """

    def __init__(self, outer_iters=20, inner_steps=50, step_size=0.1,
                 lambda_reg=1.0, smooth_sigma=1.0, center_fields=True):
        self.outer_iters = outer_iters
        self.inner_steps = inner_steps
        self.step_size = step_size
        self.lambda_reg = lambda_reg
        self.smooth_sigma = smooth_sigma
        self.center_fields = center_fields

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        config = IterConfig(
            outer_iters=self.outer_iters,
            inner_steps=self.inner_steps,
            step_size=self.step_size,
            lambda_reg=self.lambda_reg,
            smooth_sigma=self.smooth_sigma,
            center_fields=self.center_fields,
        )
        return iterative_atlas(_as_group(X), config)
