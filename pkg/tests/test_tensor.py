import warnings

import numpy as np
import pytest

from rgenie import tensor as T
from rgenie.tensor import ContractError, ShapeError, Tensor, grad_check


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestForward:
    def test_add_broadcast(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.arange(3.0))
        assert np.allclose(T.add(a, b).data, 1.0 + np.arange(3.0))

    def test_matmul_matches_numpy(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
        assert np.allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_matmul_rejects_vectors(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        out = T.softmax(Tensor(rng.normal(size=(4, 7)) * 50))
        assert np.allclose(out.data.sum(axis=-1), 1.0)
        assert np.isfinite(out.data).all()

    def test_layer_norm_zero_variance(self):
        x = Tensor(np.full((2, 4), 3.0))
        gain = Tensor(np.ones(4))
        bias = Tensor(np.zeros(4))
        assert np.allclose(T.layer_norm(x, gain, bias).data, 0.0)

    def test_cross_entropy_uniform(self):
        logits = Tensor(np.zeros((2, 5)))
        loss = T.cross_entropy(logits, np.array([1, 3]))
        assert abs(loss.item() - np.log(5)) < 1e-12

    def test_cross_entropy_empty_mask_flag(self):
        logits = Tensor(np.zeros((2, 5)), requires_grad=True)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            loss = T.cross_entropy(logits, np.array([0, 1]),
                                   np.zeros(2, dtype=bool))
        assert loss.item() == 0.0
        assert loss.empty_mask_flag
        assert any("empty mask" in str(w.message) for w in caught)


class TestBackward:
    @pytest.mark.parametrize("op", [
        lambda a, b: T.sumt(T.mul(a, b)),
        lambda a, b: T.sumt(T.add(a, b)),
        lambda a, b: T.sumt(T.matmul(a, T.swapaxes(b, -1, -2))),
    ])
    def test_binary_ops(self, op):
        rng = np.random.default_rng(2)
        a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
        assert grad_check(lambda: op(a, b), [a, b]) < 1e-6

    @pytest.mark.parametrize("fn", [T.exp, T.tanh, T.sigmoid, T.gelu, T.relu,
                                    lambda x: T.softmax(x, axis=-1)])
    def test_unary_ops(self, fn):
        rng = np.random.default_rng(3)
        a = leaf(rng, 2, 5)
        assert grad_check(lambda: T.sumt(T.mul(fn(a), fn(a))), [a]) < 1e-5

    def test_broadcast_backward(self):
        rng = np.random.default_rng(4)
        a, b = leaf(rng, 2, 3), leaf(rng, 3)
        assert grad_check(lambda: T.sumt(T.mul(T.add(a, b), T.add(a, b))),
                          [a, b]) < 1e-6

    def test_layer_norm_grad(self):
        rng = np.random.default_rng(5)
        x, g, b = leaf(rng, 2, 6), leaf(rng, 6), leaf(rng, 6)
        assert grad_check(lambda: T.sumt(T.mul(T.layer_norm(x, g, b), x)),
                          [x, g, b]) < 1e-5

    def test_embedding_scatter_add(self):
        table = Tensor(np.random.default_rng(6).normal(size=(5, 3)),
                       requires_grad=True)
        ids = np.array([[1, 1, 4]])
        out = T.sumt(T.embedding_lookup(table, ids))
        out.backward()
        # the repeated row must accumulate both contributions
        assert np.allclose(table.grad[1], 2.0)
        assert np.allclose(table.grad[4], 1.0)
        assert np.allclose(table.grad[0], 0.0)

    def test_cross_entropy_grad(self):
        rng = np.random.default_rng(7)
        logits = leaf(rng, 2, 3, 4)
        targets = rng.integers(0, 4, (2, 3))
        mask = np.array([[True, False, True], [True, True, False]])
        assert grad_check(lambda: T.cross_entropy(logits, targets, mask),
                          [logits]) < 1e-6

    def test_take_positions(self):
        rng = np.random.default_rng(8)
        x = leaf(rng, 3, 5, 4)
        idx = np.array([0, 4, 2])
        got = T.take_positions(x, idx)
        assert np.allclose(got.data, x.data[np.arange(3), idx])
        assert grad_check(lambda: T.sumt(T.mul(T.take_positions(x, idx),
                                               T.take_positions(x, idx))),
                          [x]) < 1e-6

    def test_backward_requires_grad(self):
        with pytest.raises(ContractError):
            Tensor(np.float64(1.0)).backward()


class TestGradCheckContract:
    def test_rejects_float32(self):
        a = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        with pytest.raises(ContractError):
            grad_check(lambda: T.sumt(a), [a])

    def test_detects_injected_error(self):
        """A deliberately wrong backward must fail the check (mutation sanity)."""
        rng = np.random.default_rng(9)
        a = leaf(rng, 2, 3)

        def broken_sum():
            data = a.data.sum()
            # sign error in the backward closure
            return Tensor._from_op(np.asarray(data), (a,),
                                   lambda g: (-np.ones_like(a.data) * g,),
                                   "broken", lambda x: np.asarray(x.sum()))

        assert grad_check(broken_sum, [a]) > 1e-2


class TestReplay:
    def test_forward_replay_bit_identical(self):
        rng = np.random.default_rng(10)
        a, b = leaf(rng, 3, 3), leaf(rng, 3, 3)
        out = T.softmax(T.matmul(a, b))
        assert T.ComputationRecord(out).replay()
