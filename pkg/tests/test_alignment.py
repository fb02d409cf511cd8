import numpy as np
import pytest

from rgenie import tensor as T
from rgenie.alignment import (TextEncoder, VisionEncoder, cosine_matrix,
                              encode_pair, hybrid_loss, info_nce, loss_weights)
from rgenie.tensor import ContractError, ShapeError, Tensor
from rgenie.tokenization import Vocabulary


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary(n_codes=4)


@pytest.fixture(scope="module")
def text_encoder(vocab):
    return TextEncoder(vocab, 16, 8, np.random.default_rng(0))


class TestTextEncoder:
    def test_param_hash_stable_and_sensitive(self, text_encoder):
        h1 = text_encoder.param_hash()
        h2 = text_encoder.param_hash()
        assert h1 == h2
        some = next(iter(text_encoder.parameters().values()))
        orig = some.data.copy()
        some.data = some.data + 1e-3
        assert text_encoder.param_hash() != h1
        some.data = orig
        assert text_encoder.param_hash() == h1

    def test_padding_ignored_in_pooling(self, text_encoder, vocab):
        ids = np.array([vocab.encode_text("remove the red bar")])
        padded = np.concatenate([ids, np.zeros((1, 3), dtype=np.int64)], axis=1)
        a = text_encoder(ids).data
        b = text_encoder(padded).data
        assert np.allclose(a, b, atol=1e-5)


class TestVisionEncoder:
    def test_spatial_extent_preserved(self):
        enc = VisionEncoder(feat_dim=5, n_cells=9, d_model=16, d_sem=8,
                            n_heads=2, rng=np.random.default_rng(1))
        feats = np.random.default_rng(2).normal(size=(2, 9, 5))
        v, v_sem, v_pix = enc(feats)
        assert v.shape == (2, 9, 16)
        assert v_sem.shape == (2, 9, 8)
        assert v_pix.shape == (2, 9, 16)

    def test_heads_are_distinct(self):
        enc = VisionEncoder(feat_dim=5, n_cells=4, d_model=8, d_sem=8,
                            n_heads=2, rng=np.random.default_rng(3))
        feats = np.random.default_rng(4).normal(size=(1, 4, 5))
        _, v_sem, v_pix = enc(feats)
        assert not np.allclose(v_sem.data, v_pix.data)


class TestInfoNce:
    def test_zero_vector_rejected(self):
        with pytest.raises(ContractError):
            cosine_matrix(Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3))))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            info_nce(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))

    def test_perfectly_aligned_pairs_have_low_loss(self):
        rng = np.random.default_rng(5)
        v = rng.normal(size=(4, 6))
        loss_aligned = info_nce(Tensor(v), Tensor(v * 3.0)).item()
        loss_random = info_nce(Tensor(v), Tensor(rng.normal(size=(4, 6)))).item()
        assert loss_aligned < loss_random

    def test_symmetry(self):
        rng = np.random.default_rng(6)
        v, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        assert abs(info_nce(Tensor(v), Tensor(t)).item()
                   - info_nce(Tensor(t), Tensor(v)).item()) < 1e-12

    def test_temperature_must_be_positive(self):
        with pytest.raises(ContractError):
            info_nce(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))), 0.0)


class TestHybridLoss:
    def test_endpoints_exact(self):
        assert loss_weights(0.0) == (1.0, 0.0)
        assert loss_weights(1.0) == (0.0, 1.0)
        assert loss_weights(0.5) == (0.5, 0.5)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            l1, l2 = loss_weights(float(rng.random()))
            assert abs(l1 + l2 - 1.0) < 1e-15

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            loss_weights(1.5)

    def test_combination_arithmetic(self):
        got = hybrid_loss(2.0, 4.0, 0.25).item()
        assert abs(got - (0.75 * 2.0 + 0.25 * 4.0)) < 1e-15

    def test_tensor_inputs_carry_gradients(self):
        a = Tensor(np.float64(2.0), requires_grad=True)
        b = Tensor(np.float64(4.0), requires_grad=True)
        out = hybrid_loss(a, b, 0.25)
        out.backward()
        assert abs(float(a.grad) - 0.75) < 1e-15
        assert abs(float(b.grad) - 0.25) < 1e-15


def test_encode_pair_detaches_text(text_encoder, vocab):
    vision = VisionEncoder(feat_dim=3, n_cells=4, d_model=8, d_sem=8,
                           n_heads=2, rng=np.random.default_rng(8))
    feats = np.random.default_rng(9).normal(size=(1, 4, 3))
    ids = np.array([vocab.encode_text("remove the red bar")])
    _, _, _, t_txt = encode_pair(vision, text_encoder, feats, ids)
    assert not t_txt.requires_grad
