import itertools

import numpy as np
import pytest

from fmmformer import oracle
from fmmformer.feature_maps import FeatureMapKind, FeatureMapSet
from fmmformer.numerics import make_rng, rand_matrix


def test_softmax_oracle_singleton():
    rng = make_rng(0)
    q, k, v = (rand_matrix(rng, 1, 4) for _ in range(3))
    assert np.array_equal(oracle.dense_softmax_attention(q, k, v), v)


def test_peaked_softmax_is_identity():
    x = 50.0 * np.eye(6)
    out, a = oracle.dense_softmax_attention(x, x, np.arange(36.0).reshape(6, 6), return_matrix=True)
    assert np.abs(a - np.eye(6)).max() < 1e-12


def test_softmax_rows_sum_to_one():
    rng = make_rng(1)
    q, k, v = (rand_matrix(rng, 8, 4) for _ in range(3))
    for causal in (False, True):
        _, a = oracle.dense_softmax_attention(q, k, v, causal, return_matrix=True)
        assert np.abs(a.sum(axis=1) - 1).max() <= 1e-12
    assert np.all(np.triu(a, 1) == 0)


def test_banded_oracle_limits():
    rng = make_rng(2)
    q, k = rand_matrix(rng, 7, 3), rand_matrix(rng, 7, 3)
    full = oracle.dense_attention_matrix(q, k)
    assert np.abs(oracle.dense_banded_oracle(q, k, 6) - full).max() <= 1e-15
    assert np.array_equal(oracle.dense_banded_oracle(q, k, 0), np.eye(7))
    for bw, causal in itertools.product(range(7), (False, True)):
        assert np.abs(oracle.dense_banded_oracle(q, k, bw, causal).sum(axis=1) - 1).max() <= 1e-12


def test_lowrank_oracle_positive_map_rows():
    rng = make_rng(3)
    q, k = rand_matrix(rng, 4, 3), rand_matrix(rng, 4, 3)
    assert np.abs(oracle.dense_lowrank_oracle(q, k, "elu1").sum(axis=1) - 1).max() <= 1e-10


def test_single_map_kernel_is_rank_one_per_column():
    # one feature column: phi(q) phi(k)^T is an outer product
    rng = make_rng(4)
    q, k = rand_matrix(rng, 12, 1), rand_matrix(rng, 12, 1)
    kern = oracle.kernel_matrix(q, k, "elu1")
    assert oracle.epsilon_rank(kern, 1e-9) == 1


@pytest.mark.parametrize("maps", [s for r in (1, 2, 3) for s in itertools.combinations(list(FeatureMapKind), r)])
def test_summed_kernel_rank_equals_map_count(maps):
    rng = make_rng(5)
    x = rand_matrix(rng, 32, 1)
    total = sum(oracle.kernel_matrix(x, x, m) for m in maps)
    assert oracle.epsilon_rank(total, 1e-9) == len(maps)


# ------------------------------------------------------------ lemma factors


def test_zero_radius_sources_are_exact_at_rank_one():
    prob = oracle.SeparatedKernelProblem([1.5, -2.0, 3.0], [0.0, 0.0], 0.0, 0.5)
    f = oracle.lemma1_factorize(prob, 1)
    assert np.abs(f.product() - prob.kernel()).max() <= 1e-15
    assert np.allclose(f.product()[:, 0], 1 / np.array([1.5, 2.0, 3.0]) ** 2)


def test_taylor_coefficients():
    assert [oracle.inverse_square_taylor(m) for m in range(5)] == [1, -2, 3, -4, 5]


def test_factor_shapes_and_rank():
    prob = oracle.SeparatedKernelProblem.grid(16, 16, 0.5)
    f = oracle.lemma1_factorize(prob, 5)
    assert f.u.shape == (16, 5) and f.v.shape == (16, 5) and f.p == 5
    assert oracle.epsilon_rank(f.product(), 1e-12) <= 5


def test_error_decays_geometrically():
    prob = oracle.SeparatedKernelProblem.grid(16, 16, 0.5)
    errs = oracle.lemma1_errors(prob, range(1, 10))
    assert errs[7] <= errs[3] * 0.5 ** 4 * 1.5 ** 4  # ~delta^4, with the (p+1) growth factor
    ratios = errs[2:9] / errs[1:8]
    assert np.all(ratios <= 0.5 * 1.5)


def test_sampled_problem_is_separated():
    prob = oracle.SeparatedKernelProblem.sample(make_rng(6), 20, 20, 0.7)
    assert prob.is_well_separated()
    assert np.all(np.diff(oracle.lemma1_errors(prob, range(2, 9))) < 0)


def test_geometry_errors():
    with pytest.raises(oracle.GeometryError):
        oracle.lemma1_factorize(oracle.SeparatedKernelProblem([0.0, 1.0], [0.1], 0.0, 0.5), 2)
    with pytest.raises(ValueError):
        oracle.SeparatedKernelProblem([1.0], [0.1], 0.0, 1.0)
    with pytest.raises(ValueError):
        oracle.lemma1_factorize(oracle.SeparatedKernelProblem.grid(2, 2, 0.5), 0)


# --------------------------------------------------------------------- rank


def test_epsilon_rank_examples():
    assert oracle.epsilon_rank(np.eye(10), 0.5) == 10
    rng = make_rng(7)
    u, v = rand_matrix(rng, 20, 2), rand_matrix(rng, 15, 2)
    assert oracle.epsilon_rank(u @ v.T, 1e-6) == 2
    assert oracle.epsilon_rank(rng.standard_normal((50, 50)), 1e-6) == 50
    assert oracle.epsilon_rank(np.zeros((4, 4))) == 0


def test_epsilon_rank_absolute_vs_relative():
    m = np.diag([1e-3, 1e-7, 1e-11])
    assert oracle.epsilon_rank(m, 1e-6, relative=False) == 1
    assert oracle.epsilon_rank(m, 1e-6, relative=True) == 2
    with pytest.raises(ValueError):
        oracle.epsilon_rank(m, 0.0)


def test_epsilon_rank_monotone_in_eps():
    rng = make_rng(8)
    m = rng.standard_normal((12, 12)) @ np.diag(10.0 ** -np.arange(12)) @ rng.standard_normal((12, 12))
    ranks = [oracle.epsilon_rank(m, e) for e in 10.0 ** -np.arange(1, 14)]
    assert ranks == sorted(ranks)
