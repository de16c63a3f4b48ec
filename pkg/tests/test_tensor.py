import numpy as np
import pytest

from mpseg.gradcheck import check_gradient
from mpseg.tensor import (Tensor, bce_with_logits, concat_rows, layernorm_lastdim,
                          logsumexp_lastdim, masked_fill, softmax_lastdim)


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal((a @ b).values, b.values)


def test_matmul_hand_case():
    out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    assert out.values.shape == (1, 1)
    assert out.values[0, 0] == 11.0


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError) as exc:
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))
    assert "(2, 3)" in str(exc.value)


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(3)
    a = rng.uniform(-2, 2, size=(3, 4))
    b = rng.uniform(-2, 2, size=(4, 2))
    w = rng.uniform(-1, 1, size=(3, 2))
    err = check_gradient(lambda xs: ((xs[0] @ xs[1]) * w).sum(), [a, b])
    assert err < 1e-6


def test_softmax_symmetry():
    out = softmax_lastdim(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.values, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_dominance_stability():
    out = softmax_lastdim(Tensor([1000.0, 0.0]))
    assert abs(out.values[0] - 1.0) < 1e-12
    assert abs(out.values[1]) < 1e-12


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = softmax_lastdim(Tensor(rng.uniform(-50, 50, size=(6, 9))))
    assert np.abs(out.values.sum(axis=-1) - 1.0).max() < 1e-12


def test_softmax_jacobian_vs_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.uniform(-2, 2, size=(5,))
    w = rng.uniform(-1, 1, size=(5,))
    err = check_gradient(lambda xs: (softmax_lastdim(xs[0]) * w).sum(), [x])
    assert err < 1e-6


def test_sigmoid_relu_values():
    assert Tensor([0.0]).sigmoid().values[0] == 0.5
    assert Tensor([-3.0]).relu().values[0] == 0.0
    assert Tensor([3.0]).relu().values[0] == 3.0


def test_layernorm_hand_case():
    out = layernorm_lastdim(Tensor([2.0, 4.0, 6.0]))
    assert np.allclose(out.values, [-1.2247, 0.0, 1.2247], atol=1e-3)
    assert abs(out.values.mean()) < 1e-12
    assert abs(out.values.var() - 1.0) < 1e-4


def test_broadcast_incompatibility_raises():
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4, 5)))


def test_masked_fill_allfalse_is_identity():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = masked_fill(x, np.zeros((2, 2), dtype=bool), -1e9)
    assert np.array_equal(out.values, x.values)


def test_masked_fill_alltrue_blocks_gradient():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    out = masked_fill(x, np.ones((2, 2), dtype=bool), -1e9)
    assert (out.values == -1e9).all()
    out.sum().backward()
    assert np.array_equal(x.grad, np.zeros((2, 2)))


def test_masked_fill_mixed_gradient():
    block = np.array([[True, False], [False, True]])
    x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    masked_fill(x, block, -7.0).sum().backward()
    assert np.array_equal(x.grad, np.where(block, 0.0, 1.0))
    rng = np.random.default_rng(5)
    err = check_gradient(lambda xs: (masked_fill(xs[0], block, -7.0).sigmoid()).sum(),
                         [rng.uniform(-2, 2, size=(2, 2))])
    assert err < 1e-6


def test_masked_fill_shape_mismatch():
    with pytest.raises(ValueError):
        masked_fill(Tensor(np.zeros((2, 2))), np.zeros((2, 3), dtype=bool), 0.0)


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_detached_constant_gives_zero_grads():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x.detach() * x.detach()).sum() + Tensor(0.0)
    loss.backward()
    assert x.grad is None


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        (x * x).backward()


def test_backward_accumulates_without_reset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    first = x.grad.copy()
    (x * x).sum().backward()
    assert np.array_equal(x.grad, 2 * first)


def test_forward_bit_identical_across_evaluations():
    rng = np.random.default_rng(6)
    x = Tensor(rng.uniform(-2, 2, size=(4, 6)), requires_grad=True)
    w = Tensor(rng.uniform(-2, 2, size=(6, 3)), requires_grad=True)

    def run():
        return (softmax_lastdim(layernorm_lastdim(x @ w)).sigmoid()).sum().values.copy()

    assert np.array_equal(run(), run())


def test_bce_with_logits_matches_definition():
    rng = np.random.default_rng(7)
    x = rng.uniform(-4, 4, size=(5,))
    t = (rng.uniform(size=5) < 0.5).astype(float)
    out = bce_with_logits(Tensor(x), t).values
    p = 1.0 / (1.0 + np.exp(-x))
    expected = -(t * np.log(p) + (1 - t) * np.log(1 - p))
    assert np.allclose(out, expected, atol=1e-12)


def test_concat_rows_and_take_rows_roundtrip():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = Tensor(np.arange(6.0, 15.0).reshape(3, 3), requires_grad=True)
    cat = concat_rows([a, b])
    assert cat.values.shape == (5, 3)
    picked = cat.take_rows([0, 3])
    (picked * picked).sum().backward()
    assert np.array_equal(a.grad[0], 2 * a.values[0])
    assert np.array_equal(a.grad[1], np.zeros(3))
    assert np.array_equal(b.grad[1], 2 * b.values[1])


def test_logsumexp_matches_numpy():
    rng = np.random.default_rng(8)
    x = rng.uniform(-3, 3, size=(4, 5))
    out = logsumexp_lastdim(Tensor(x)).values
    expected = np.log(np.exp(x).sum(axis=-1))
    assert np.allclose(out, expected, atol=1e-12)
