import itertools
import logging

import numpy as np
import pytest

from conftest import rel_err
from qwthn.mpo import (
    MpoLayer,
    MpoSpec,
    factorize_dims,
    load_mpo,
    mpo_backward,
    mpo_forward,
    mpo_param_count,
    mpo_param_count_uniform,
    mpo_to_dense,
    save_mpo,
)
from qwthn.tensor import ShapeError, make_rng


@pytest.mark.parametrize("N,n,expected", [
    (64, 3, (4, 4, 4)),
    (7, 1, (7,)),
    (3584, 3, (14, 16, 16)),
    (128, 3, (4, 4, 8)),
    (16, 2, (4, 4)),
])
def test_factorize_dims(N, n, expected):
    assert factorize_dims(N, n) == expected


def test_factorize_prime_pads_with_ones(caplog):
    with caplog.at_level(logging.WARNING):
        assert factorize_dims(13, 3) == (1, 1, 13)
    assert "unit factors" in caplog.text


def test_factorize_is_most_balanced():
    # brute force over all ordered 3-factorizations of 360
    best = min(
        (tuple(sorted((a, b, 360 // (a * b)), reverse=True))
         for a in range(1, 361) for b in range(1, 361) if 360 % (a * b) == 0),
    )
    assert tuple(sorted(factorize_dims(360, 3), reverse=True)) == best


@pytest.mark.parametrize("dims,D,expected", [
    ((4, 4, 4), 2, 128),
    ((8, 8), 4, 512),
    ((2, 2), 1, 8),
])
def test_param_count_examples(dims, D, expected):
    spec = MpoSpec.uniform(dims, dims, D)
    assert mpo_param_count(spec) == expected
    assert mpo_param_count_uniform(dims, dims, D) == expected
    assert MpoLayer.init(spec, make_rng(0)).num_params() == expected


def test_uniform_formula_needs_two_sites():
    with pytest.raises(ValueError):
        mpo_param_count_uniform((4,), (4,), 2)


def test_compression_for_three_sites():
    spec = MpoSpec.balanced(3584, 128, 3, 2)
    assert mpo_param_count(spec) < 3584 * 128


def test_spec_validation():
    with pytest.raises(ShapeError):
        MpoSpec((2, 2), (2, 2), (2, 2, 1))
    with pytest.raises(ShapeError):
        MpoSpec((2, 2), (2,), (1, 2, 1))
    with pytest.raises(ShapeError):
        MpoSpec((2, 2), (2, 2), (1, 1))


def test_site_shapes():
    spec = MpoSpec.uniform((2, 3, 4), (5, 6, 7), 3)
    layer = MpoLayer.init(spec, make_rng(0))
    assert [t.shape for t in layer.tensors] == [(1, 5, 2, 3), (3, 6, 3, 3), (3, 7, 4, 1)]


def test_single_site_dense_is_the_slice(rng):
    layer = MpoLayer.init(MpoSpec.uniform((5,), (3,), 1), rng)
    assert np.array_equal(mpo_to_dense(layer), layer.tensors[0][0, :, :, 0])


def test_two_site_bond_one_is_kron(rng):
    layer = MpoLayer.init(MpoSpec.uniform((2, 2), (2, 2), 1), rng)
    a, b = layer.tensors[0][0, :, :, 0], layer.tensors[1][0, :, :, 0]
    W = mpo_to_dense(layer)
    # explicit 4x4 index sum with row-major digits
    for j1, j2, i1, i2 in itertools.product(range(2), repeat=4):
        assert W[j1 * 2 + j2, i1 * 2 + i2] == pytest.approx(a[j1, i1] * b[j2, i2], abs=1e-15)
    assert np.allclose(W, np.kron(a, b))


def _brute_dense(layer):
    spec = layer.spec
    W = np.zeros((spec.n_y, spec.n_x))
    for j in range(spec.n_y):
        jd = np.unravel_index(j, spec.out_dims)
        for i in range(spec.n_x):
            idig = np.unravel_index(i, spec.in_dims)
            m = np.ones((1, 1))
            for k, w in enumerate(layer.tensors):
                m = m @ w[:, jd[k], idig[k], :]
            W[j, i] = m[0, 0]
    return W


def test_dense_matches_brute_force(rng):
    layer = MpoLayer.init(MpoSpec.uniform((2, 3, 2), (3, 2, 2), 3), rng)
    assert rel_err(mpo_to_dense(layer), _brute_dense(layer)) < 1e-13


def test_forward_matches_dense(rng):
    layer = MpoLayer.init(MpoSpec.uniform((2, 2, 2), (2, 2, 2), 2), rng)
    x = rng.normal(size=8)
    assert rel_err(mpo_forward(layer, x), mpo_to_dense(layer) @ x) < 1e-9
    X = rng.normal(size=(5, 8))
    assert rel_err(mpo_forward(layer, X), X @ mpo_to_dense(layer).T) < 1e-9


def test_identity_layer():
    spec = MpoSpec.uniform((2, 3), (2, 3), 1)
    layer = MpoLayer(spec, [np.eye(2).reshape(1, 2, 2, 1), np.eye(3).reshape(1, 3, 3, 1)])
    x = np.arange(6.0)
    assert np.array_equal(mpo_forward(layer, x), x)


def test_zero_layer_gives_zero(rng):
    layer = MpoLayer.zeros(MpoSpec.uniform((2, 4), (4, 2), 3))
    assert np.array_equal(mpo_forward(layer, rng.normal(size=8)), np.zeros(8))
    assert np.array_equal(mpo_to_dense(layer), np.zeros((8, 8)))


def test_linearity(rng):
    layer = MpoLayer.init(MpoSpec.uniform((4, 4), (2, 8), 3), rng)
    x, y = rng.normal(size=16), rng.normal(size=16)
    lhs = mpo_forward(layer, 2.5 * x - 0.5 * y)
    rhs = 2.5 * mpo_forward(layer, x) - 0.5 * mpo_forward(layer, y)
    assert rel_err(lhs, rhs) < 1e-9


def test_forward_rejects_bad_length(rng):
    layer = MpoLayer.init(MpoSpec.uniform((2, 2), (2, 2), 2), rng)
    with pytest.raises(ShapeError):
        mpo_forward(layer, np.zeros(5))


def test_dense_memory_guard():
    layer = MpoLayer.zeros(MpoSpec.uniform((128, 128), (128, 128), 1))
    with pytest.raises(MemoryError):
        mpo_to_dense(layer)


def test_zero_init_last_site(rng):
    layer = MpoLayer.init(MpoSpec.uniform((2, 2, 2), (2, 2, 2), 2), rng, zero_last=True)
    assert not np.any(layer.tensors[-1])
    assert np.any(layer.tensors[0])


def test_backward_single_site_is_dense_gradient(rng):
    layer = MpoLayer.init(MpoSpec.uniform((4,), (3,), 1), rng)
    x, g = rng.normal(size=4), rng.normal(size=3)
    (gw,), gx = mpo_backward(layer, x, g)
    W = layer.tensors[0][0, :, :, 0]
    assert np.allclose(gw[0, :, :, 0], np.outer(g, x))
    assert np.allclose(gx, W.T @ g)


def test_backward_zero_grad(rng):
    layer = MpoLayer.init(MpoSpec.uniform((2, 2), (2, 2), 2), rng)
    gs, gx = mpo_backward(layer, rng.normal(size=4), np.zeros(4))
    assert all(not np.any(g) for g in gs) and not np.any(gx)


def test_backward_finite_differences(rng):
    layer = MpoLayer.init(MpoSpec.uniform((2, 2, 2), (2, 2, 2), 2), rng)
    x, g = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))

    def loss():
        return float(np.sum(mpo_forward(layer, x) * g))

    grads, gx = mpo_backward(layer, x, g)
    eps = 1e-5
    for t, gt in zip(layer.tensors, grads):
        flat, gflat = t.reshape(-1), gt.reshape(-1)
        for i in range(flat.size):
            o = flat[i]
            flat[i] = o + eps
            lp = loss()
            flat[i] = o - eps
            lm = loss()
            flat[i] = o
            num = (lp - lm) / (2 * eps)
            assert abs(num - gflat[i]) <= 1e-6 * max(abs(num), abs(gflat[i]), 1.0)
    W = mpo_to_dense(layer)
    assert np.allclose(gx, g @ W)


def test_save_load_roundtrip(tmp_path, rng):
    layer = MpoLayer.init(MpoSpec.uniform((2, 3), (3, 2), 2), rng)
    save_mpo(layer, tmp_path / "m.json")
    back = load_mpo(tmp_path / "m.json")
    assert back.spec == layer.spec
    for a, b in zip(back.tensors, layer.tensors):
        assert np.array_equal(a, b)
