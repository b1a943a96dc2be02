"""scikit-learn style wrappers around the attention layer, the copy-task
model and the band-removal rank analysis."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import attention as att
from .analysis import DEFAULT_BANDWIDTHS, EPS, band_removed_rank
from .feature_maps import FeatureMapSet
from .model import Model, TrainConfig, pack_batch, gen_copy_batch, train
from .numerics import make_rng


class FMMAttention(TransformerMixin, BaseEstimator):
    """Self-attention ``X -> w1 D X + w2 L X`` with queries, keys and values
    all equal to ``X`` (shape ``(N, D)`` or batched ``(..., N, D)``).

    Nothing is learned; ``fit`` only validates the hyperparameters and
    records the feature count.
    """

    def __init__(self, bandwidth=5, feature_maps="elu1,neg_elu1", causal=False,
                 w1_logit=-4.0, w2_logit=4.0):
        self.bandwidth = bandwidth
        self.feature_maps = feature_maps
        self.causal = causal
        self.w1_logit = w1_logit
        self.w2_logit = w2_logit

    def _config(self) -> att.AttentionConfig:
        return att.AttentionConfig(self.bandwidth, FeatureMapSet(self.feature_maps), bool(self.causal),
                                   att.BlendParams(float(self.w1_logit), float(self.w2_logit)))

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.ndim < 2:
            raise ValueError(f"expected (N, D) input, got shape {X.shape}")
        self.config_ = self._config()
        self.n_features_in_ = X.shape[-1]
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.n_features_in_:
            raise ValueError(f"fitted with {self.n_features_in_} features, got {X.shape[-1]}")
        cfg = self.config_
        if cfg.has_near and cfg.bandwidth >= X.shape[-2]:
            cfg = replace(cfg, bandwidth=X.shape[-2] - 1)
        return att.fmm_attention(X, X, X, cfg)


class CopyTaskTransformer(BaseEstimator):
    """Trains the desk-scale transformer on freshly sampled copy-task batches.

    ``fit`` ignores ``X``; data come from the seeded generator. ``predict``
    takes token arrays ``(B, N)`` and returns the greedy next token at every
    position.
    """

    def __init__(self, variant="softmax", layers=2, heads=4, d_model=64, d_ff=128, max_len=128,
                 bandwidth=10, feature_maps="elu1", w1_logit=-4.0, w2_logit=4.0, lr=1e-3,
                 lr_decay_step=3000, lr_decay=0.1, warmup=100, beta1=0.9, beta2=0.999,
                 adam_eps=1e-8, clip_norm=1.0, batch_size=32, steps=3000, seed=0, dtype="float64"):
        self.variant = variant
        self.layers = layers
        self.heads = heads
        self.d_model = d_model
        self.d_ff = d_ff
        self.max_len = max_len
        self.bandwidth = bandwidth
        self.feature_maps = feature_maps
        self.w1_logit = w1_logit
        self.w2_logit = w2_logit
        self.lr = lr
        self.lr_decay_step = lr_decay_step
        self.lr_decay = lr_decay
        self.warmup = warmup
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.clip_norm = clip_norm
        self.batch_size = batch_size
        self.steps = steps
        self.seed = seed
        self.dtype = dtype

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    def fit(self, X=None, y=None, callback=None):
        result = train(self.train_config(), callback)
        self.model_ = result.model
        self.loss_curve_ = np.array(result.losses)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        logits = self.model_.forward(np.asarray(X))
        return logits.argmax(axis=-1)

    def score(self, X=None, y=None):
        """Negative masked cross-entropy on a held-out batch (higher is better).

        With ``X`` given as an int, that many fresh samples are drawn from a
        generator seeded away from the training stream.
        """
        check_is_fitted(self, "model_")
        count = X if isinstance(X, int) else 64
        rng = make_rng(self.seed + 7919)
        batch = pack_batch(gen_copy_batch(rng, count, self.max_len), self.max_len)
        return -self.model_.loss(batch)


class BandRemovedRank(TransformerMixin, BaseEstimator):
    """Maps a stack of square matrices ``(M, N, N)`` to their epsilon-ranks
    after removing each band, shape ``(M, len(bandwidths))``."""

    def __init__(self, bandwidths=DEFAULT_BANDWIDTHS, eps=EPS, relative=False):
        self.bandwidths = bandwidths
        self.eps = eps
        self.relative = relative

    def fit(self, X, y=None):
        self.bandwidths_ = tuple(int(b) for b in self.bandwidths)
        if list(self.bandwidths_) != sorted(self.bandwidths_):
            raise ValueError("bandwidths must be ascending")
        return self

    def transform(self, X):
        check_is_fitted(self, "bandwidths_")
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[None]
        rows = []
        for m in X:
            profiles = band_removed_rank(m, self.bandwidths_, self.eps)
            rows.append([p.eps_rank_rel if self.relative else p.eps_rank_abs for p in profiles])
        return np.array(rows, dtype=int)


__all__ = ["FMMAttention", "CopyTaskTransformer", "BandRemovedRank", "Model"]
