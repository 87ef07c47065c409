import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffmod import numerics as nx
from diffmod.sraa import SraaConfig, SraaLayer, gather_relation, quantize_distance, relation_weights

CFG = SraaConfig()


@pytest.mark.parametrize("x,g", [(0, 0), (8, 0), (16, 1), (32, 3), (128, 8), (1e6, 8)])
def test_quantizer_table(x, g):
    assert quantize_distance(x, CFG) == g


def test_quantizer_negative():
    with pytest.raises(nx.DomainError):
        quantize_distance(-1.0)


@given(st.floats(0, 1e7), st.floats(0, 1e7))
@settings(max_examples=500)
def test_quantizer_monotone(a, b):
    lo, hi = sorted((a, b))
    assert quantize_distance(lo) <= quantize_distance(hi) <= CFG.beta


def test_quantizer_monotone_bulk():
    x = np.sort(np.random.default_rng(0).uniform(0, 5000, size=(100_000, 2)), axis=1)
    g = quantize_distance(x)
    assert np.all(g[:, 0] <= g[:, 1])


def test_relation_weights_one_hot():
    eta = np.eye(9, 4)
    w = relation_weights(np.eye(4)[[1, 3]], eta).data
    assert np.array_equal(w, eta[:, [1, 3]].T)


def test_relation_weights_matmul(rng):
    f, eta = rng.normal(size=(2, 5)), rng.normal(size=(9, 5))
    assert np.allclose(relation_weights(f, eta).data, f @ eta.T)


def test_relation_weights_gradcheck(rng):
    f = nx.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    eta = nx.Tensor(rng.normal(size=(9, 4)), requires_grad=True)
    assert nx.grad_check(relation_weights, [f, eta]) < 1e-4


def test_gather_constant_and_hand():
    w = np.arange(18.0).reshape(2, 9)
    W = gather_relation(w, np.zeros((2, 5), dtype=int)).data
    assert np.all(W == w[:, :1])
    W = gather_relation(w[:, :3], np.array([[0, 2, 1], [1, 1, 0]])).data
    assert W.tolist() == [[0, 2, 1], [10, 10, 9]]


def test_gather_out_of_range():
    with pytest.raises((IndexError, nx.DimensionError)):
        gather_relation(np.zeros((2, 3)), np.array([[0, 3], [0, 0]]))


def test_gather_gradient_counts():
    w = nx.Tensor(np.zeros((2, 4)), requires_grad=True)
    b = np.array([[0, 0, 3], [2, 2, 2]])
    nx.sum_(gather_relation(w, b)).backward()
    assert w.grad.tolist() == [[2, 0, 0, 1], [0, 0, 3, 0]]


def small_layer(seed=0):
    with nx.using_dtype(np.float64):
        return SraaLayer(SraaConfig(heads=2, d=8, ffn_hidden=8), np.random.default_rng(seed))


def test_single_key_relational_branch(rng):
    layer = small_layer()
    fa, fb = rng.normal(size=(4, 8)), rng.normal(size=(1, 8))
    _, _, rel, rel_out = layer._branches(fa, rng.uniform(0, 50, (4, 2)), fb, rng.uniform(0, 50, (1, 2)))
    assert np.allclose(rel.data, 1.0)
    assert np.allclose(rel_out.data, layer.v(fb).data)


def test_key_permutation_invariance(rng):
    layer = small_layer()
    fa, ca = rng.normal(size=(5, 8)), rng.uniform(0, 100, (5, 2))
    fb, cb = rng.normal(size=(6, 8)), rng.uniform(0, 100, (6, 2))
    p = rng.permutation(6)
    assert np.allclose(layer(fa, ca, fb, cb).data, layer(fa, ca, fb[p], cb[p]).data)


def test_query_permutation_equivariance(rng):
    layer = small_layer()
    f, c = rng.normal(size=(7, 8)), rng.uniform(0, 100, (7, 2))
    p = rng.permutation(7)
    assert np.allclose(layer(f, c, f, c).data[p], layer(f[p], c[p], f[p], c[p]).data)


def test_relational_rows_sum_to_one(rng):
    layer = small_layer()
    f, c = rng.normal(size=(7, 8)), rng.uniform(0, 300, (7, 2))
    _, rel = layer.attention_maps(f, c, f, c)
    assert np.allclose(rel.data.sum(1), 1.0)


def test_nearby_key_dominates():
    layer = small_layer()
    # w[0, b] decreasing in bucket b
    layer.eta.data = np.zeros_like(layer.eta.data)
    layer.eta.data[:, 0] = -np.arange(9.0)
    fa = np.zeros((1, 8))
    fa[0, 0] = 1.0
    fb = np.zeros((2, 8))
    _, rel = layer.attention_maps(fa, np.zeros((1, 2)), fb, np.array([[5.0, 0.0], [40.0, 0.0]]))
    assert rel.data[0, 0] >= rel.data[0, 1]


def test_layer_gradcheck(rng):
    layer = small_layer(3)
    fa = nx.Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    ca = rng.uniform(0, 60, (4, 2))
    assert nx.grad_check(lambda f: layer(f, ca, f, ca), [fa], params=layer.parameters()) < 1e-4
