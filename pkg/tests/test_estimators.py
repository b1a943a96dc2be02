import numpy as np
import pytest
from sklearn.base import clone

from fmmformer import attention as att
from fmmformer.estimators import BandRemovedRank, CopyTaskTransformer, FMMAttention
from fmmformer.numerics import make_rng


def test_attention_transformer_matches_function():
    x = make_rng(0).uniform(-1, 1, (12, 4))
    est = FMMAttention(bandwidth=3, feature_maps="elu1,tanh", causal=True, w1_logit=0.5, w2_logit=-1.0)
    out = est.fit_transform(x)
    cfg = att.AttentionConfig(3, "elu1,tanh", True, att.BlendParams(0.5, -1.0))
    assert np.array_equal(out, att.fmm_attention(x, x, x, cfg))
    assert est.n_features_in_ == 4


def test_attention_transformer_clips_band_and_checks_width():
    x = make_rng(1).uniform(size=(3, 2))
    est = FMMAttention(bandwidth=10).fit(x)
    assert est.transform(x).shape == (3, 2)
    with pytest.raises(ValueError):
        est.transform(np.ones((3, 5)))
    with pytest.raises(ValueError):
        FMMAttention(feature_maps="bogus").fit(x)


def test_params_and_clone():
    est = CopyTaskTransformer(variant="fmm", bandwidth=4, steps=2)
    assert est.get_params()["bandwidth"] == 4
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    assert est.set_params(steps=5).steps == 5


def test_copy_task_fit_predict_score():
    est = CopyTaskTransformer(layers=1, heads=2, d_model=8, d_ff=16, max_len=8, batch_size=4, steps=3)
    est.fit()
    assert est.loss_curve_.shape == (3,)
    tokens = np.array([[0, 1, 2, 0, 1, 2, 0, 0]])
    pred = est.predict(tokens)
    assert pred.shape == (1, 8) and pred.max() < 11
    assert est.score() < 0


def test_band_removed_rank_transformer():
    a = np.eye(6) + np.outer(np.ones(6), np.arange(6.0))
    out = BandRemovedRank(bandwidths=(0, 5)).fit_transform(np.stack([a, np.eye(6)]))
    assert out.tolist() == [[np.linalg.matrix_rank(a), 0], [6, 0]]
    with pytest.raises(ValueError):
        BandRemovedRank(bandwidths=(5, 0)).fit(a)
