import numpy as np
import pytest

from qwthn.tensor import (
    ShapeError,
    check_finite,
    elementwise,
    kaiming_uniform_init,
    make_rng,
    matmul,
    reshape_hierarchical,
)


def test_same_seed_same_stream():
    a = make_rng(42).uniform(size=100)
    b = make_rng(42).uniform(size=100)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, make_rng(43).uniform(size=100))


@pytest.mark.parametrize("seed", [-1, 2**64])
def test_seed_range(seed):
    with pytest.raises(ValueError):
        make_rng(seed)


def test_kaiming_bound_and_spread():
    w = kaiming_uniform_init((256, 64), 64, make_rng(0))
    bound = np.sqrt(6 / 64)
    assert w.shape == (256, 64)
    assert np.all(np.abs(w) <= bound)
    # U[-b, b] has variance b^2 / 3 = 2 / fan_in
    assert abs(w.var() - 2 / 64) < 0.003


@pytest.mark.parametrize("shape,fan", [((), 4), ((3, 0), 4), ((2, 2), 0)])
def test_kaiming_rejects_bad_input(shape, fan):
    with pytest.raises(ShapeError):
        kaiming_uniform_init(shape, fan, make_rng(0))


def test_reshape_row_major_digits():
    x = np.arange(24.0)
    t = reshape_hierarchical(x, (2, 3, 4))
    for i1 in range(2):
        for i2 in range(3):
            for i3 in range(4):
                assert t[i1, i2, i3] == (i1 * 3 + i2) * 4 + i3


def test_reshape_size_mismatch():
    with pytest.raises(ShapeError):
        reshape_hierarchical(np.zeros(10), (3, 3))


def test_matmul_and_elementwise():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(matmul(a, np.eye(3)), a)
    with pytest.raises(ShapeError):
        matmul(a, a)
    assert np.array_equal(elementwise(a, a, "add"), 2 * a)
    assert np.array_equal(elementwise(a, a, "mul"), a * a)
    with pytest.raises(ShapeError):
        elementwise(a, a.T, "add")
    with pytest.raises(ValueError):
        elementwise(a, a, "div")


def test_check_finite():
    check_finite(np.ones(3))
    with pytest.raises(FloatingPointError):
        check_finite(np.array([1.0, np.nan]))
