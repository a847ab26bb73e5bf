import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from structsparse import autodiff as ad
from structsparse.autodiff import Tensor
from structsparse.exceptions import ContractError, DimensionError
from structsparse.layers import ForwardContext
from structsparse.structured import (ButterflyLinear, ButterflyMatrix, KConv2D,
                                     RectangularButterflyMap, bf_factor_dense, bf_hadamard, bf_identity,
                                     bf_matmul, bf_matvec, bf_random_init, bf_rmatvec, bf_to_dense,
                                     dense_reference_macs, kconv_forward, kmat_identity, kmat_matvec,
                                     kmat_random_init, kmat_to_dense, next_pow2, rect_matvec,
                                     structured_flops, structured_param_count)

from conftest import gradcheck, rel_err, weighted_sum

SIZES = [2, 4, 8, 16, 32, 64]


def sylvester(n: int) -> np.ndarray:
    h = np.array([[1.0]])
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h


def dense_from_factors(B: ButterflyMatrix) -> np.ndarray:
    """Multiply the explicit sparse factors: level 1 is applied first."""
    out = np.eye(B.n)
    for level in range(1, B.depth + 1):
        out = bf_factor_dense(B, level) @ out
    return out


def random_blocks(n, seed):
    rng = np.random.default_rng(seed)
    return ButterflyMatrix(rng.normal(size=(int(math.log2(n)), n // 2, 2, 2)))


@pytest.mark.parametrize("n", SIZES)
def test_matvec_matches_product_of_explicit_factors(n):
    for seed in range(10):
        B = random_blocks(n, seed)
        x = np.random.default_rng(100 + seed).normal(size=(5, n))
        want = x @ dense_from_factors(B).T
        assert rel_err(bf_matvec(B, x).data, want) < 1e-12
        np.testing.assert_allclose(bf_to_dense(B).data, dense_from_factors(B), atol=1e-12)


def test_each_factor_has_two_nonzeros_per_row():
    B = random_blocks(16, 3)
    for level in range(1, 5):
        F = bf_factor_dense(B, level)
        assert (np.count_nonzero(F, axis=1) == 2).all()
        stride = 1 << (level - 1)
        i, j = np.nonzero(F)
        assert set(np.abs(i - j)) == {0, stride}


def test_transpose_and_matmul_forms(rng):
    B = random_blocks(32, 1)
    D = bf_to_dense(B).data
    x = rng.normal(size=(3, 32))
    np.testing.assert_allclose(bf_rmatvec(B, x).data, x @ D, atol=1e-12)
    X = rng.normal(size=(32, 4))
    np.testing.assert_allclose(bf_matmul(B, X).data, D @ X, atol=1e-12)
    np.testing.assert_allclose(bf_matvec(B, x[0]).data, D @ x[0], atol=1e-12)


@pytest.mark.parametrize("n", SIZES)
def test_identity_and_hadamard_are_exact(n):
    np.testing.assert_array_equal(bf_to_dense(bf_identity(n)).data, np.eye(n))
    np.testing.assert_array_equal(bf_to_dense(bf_hadamard(n)).data, sylvester(n))


@pytest.mark.parametrize("n", SIZES)
def test_random_init_is_orthogonal(n):
    B = bf_random_init(n, seed=n)
    x = np.random.default_rng(n).normal(size=(20, n))
    y = bf_matvec(B, x).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), np.linalg.norm(x, axis=1), rtol=1e-10)
    D = bf_to_dense(B).data
    np.testing.assert_allclose(D @ D.T, np.eye(n), atol=1e-10)


@pytest.mark.parametrize("n", SIZES)
def test_parameter_count(n):
    B = bf_random_init(n, 0)
    assert B.blocks.value.size == 2 * n * int(math.log2(n)) == structured_param_count(B)
    K = kmat_random_init(n, width=2, seed=0)
    assert sum(p.value.size for p in K.parameters()) == structured_param_count(K) == 8 * n * int(math.log2(n))


def test_non_power_of_two_is_rejected():
    with pytest.raises(ContractError):
        bf_identity(12)
    with pytest.raises(ContractError):
        bf_random_init(1)
    with pytest.raises(DimensionError):
        ButterflyMatrix(np.zeros((2, 4, 2, 2)))
    with pytest.raises(DimensionError):
        bf_matvec(bf_identity(8), np.ones(4))


@pytest.mark.parametrize("n", [2, 8, 32])
def test_kaleidoscope_matches_dense_product(n):
    K = kmat_random_init(n, width=2, seed=5)
    want = np.eye(n)
    for B, C in K.pairs:
        want = want @ bf_to_dense(B).data @ bf_to_dense(C).data.T
    np.testing.assert_allclose(kmat_to_dense(K).data, want, atol=1e-12)
    x = np.random.default_rng(0).normal(size=(4, n))
    np.testing.assert_allclose(kmat_matvec(K, x).data, x @ want.T, atol=1e-12)
    np.testing.assert_array_equal(kmat_to_dense(kmat_identity(n, 3)).data, np.eye(n))


def test_rectangular_map_pads_and_truncates(rng):
    R = RectangularButterflyMap.random(5, 3, seed=2)
    assert R.n == 8
    D = bf_to_dense(R.inner).data
    x = rng.normal(size=(4, 5))
    np.testing.assert_allclose(rect_matvec(R, x).data, x @ D[:3, :5].T, atol=1e-12)
    with pytest.raises(DimensionError):
        rect_matvec(R, np.ones((4, 6)))
    assert next_pow2(784) == 1024 and next_pow2(64) == 64 and next_pow2(1) == 2  # smallest butterfly is 2 x 2


def test_kconv_equals_dense_conv_with_materialized_kernel(rng):
    layer = KConv2D(3, 5, 3, rng, stride=1, padding=1, width=2)
    layer.bias.value.data = rng.normal(size=5)
    x = rng.normal(size=(2, 3, 6, 6))
    in_dim = 3 * 9
    W = rect_matvec(layer.map, np.eye(in_dim)).data.T
    kernel = W.reshape(5, 3, 3, 3)
    want = ad.conv2d(Tensor(x), Tensor(kernel), 1, 1).data + layer.bias.data[None, :, None, None]
    got = kconv_forward(layer, x).data
    assert got.shape == (2, 5, 6, 6) == (2,) + layer.output_shape((3, 6, 6))
    assert rel_err(got, want) < 1e-12


def test_structured_layer_gradients(rng):
    lin = ButterflyLinear(6, 3, rng)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    params = [p.value for p in lin.parameters()]
    assert gradcheck(lambda: weighted_sum(lin(x)), [x] + params) < 1e-4
    conv = KConv2D(2, 3, 3, rng, padding=1)
    xi = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    params = [p.value for p in conv.parameters()]
    assert gradcheck(lambda: weighted_sum(conv(xi, ForwardContext())), [xi] + params) < 1e-4


def test_structured_layers_are_never_prunable(rng):
    for layer in (ButterflyLinear(10, 4, rng), KConv2D(3, 8, 3, rng)):
        assert not any(p.prunable for p in layer.parameters())


def test_flop_examples():
    rng = np.random.default_rng(0)
    lin = ButterflyLinear(512, 512, rng)
    assert structured_flops(lin) == 2 * 512 * 9 == 9216
    assert dense_reference_macs(lin, (512,)) == 262144
    conv = KConv2D(3, 64, 3, rng, padding=1)
    assert conv.map.n == 64
    assert structured_flops(conv, (3, 32, 32)) == 4 * 64 * 6 * 1024 == 1_572_864
    assert dense_reference_macs(conv, (3, 32, 32)) == 27 * 64 * 1024
    with pytest.raises(ContractError):
        structured_flops(conv)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(SIZES), st.integers(0, 2**31 - 1))
def test_transpose_is_adjoint(n, seed):
    B = random_blocks(n, seed)
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=n), rng.normal(size=n)
    lhs = float(bf_matvec(B, x).data @ y)
    rhs = float(x @ bf_rmatvec(B, y).data)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)
