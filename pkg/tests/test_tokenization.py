import numpy as np
import pytest

from rgenie.tensor import ContractError, InputError
from rgenie.tokenization import (Codebook, TokenGrid, Vocabulary,
                                 append_reason, dequantize,
                                 find_edit_position, kmeans_codebook,
                                 quantize)


@pytest.fixture
def vocab():
    return Vocabulary(n_codes=8)


def test_id_ranges_are_disjoint_and_contiguous(vocab):
    assert vocab.pad_id == 0
    assert vocab.text_base == 6
    assert vocab.visual_base == vocab.text_base + len(vocab.words)
    assert vocab.size == vocab.visual_base + 8


def test_encode_decode_roundtrip(vocab):
    ids = vocab.encode_text("change the red square to blue")
    assert vocab.decode(ids) == "change the red square to blue"


def test_unknown_word_raises(vocab):
    with pytest.raises(ValueError):
        vocab.encode_text("teleport the square")


def test_append_reason_and_edit_position(vocab):
    seq = append_reason(vocab.encode_text("remove the red bar"), vocab)
    assert seq[-1] == vocab.reason_id
    out = [vocab.word_id("red"), vocab.edit_id, vocab.eos_id]
    assert find_edit_position(out, vocab) == 1
    assert find_edit_position([vocab.eos_id], vocab) is None


def test_sidecar_lists_special_ids(vocab, tmp_path):
    path = tmp_path / "vocab.txt"
    vocab.write_sidecar(path)
    text = path.read_text()
    assert "MASK\t5" in text and f"VISUAL_BASE\t{vocab.visual_base}" in text


class TestCodebook:
    def test_requires_two_codes(self):
        with pytest.raises(ContractError):
            Codebook(np.ones((1, 3)))

    def test_rejects_nonfinite(self):
        with pytest.raises(ContractError):
            Codebook(np.array([[0.0, np.nan], [1.0, 1.0]]))

    def test_kmeans_deterministic(self):
        feats = np.random.default_rng(0).normal(size=(50, 4))
        a = kmeans_codebook(feats, 5, np.random.default_rng(1))
        b = kmeans_codebook(feats, 5, np.random.default_rng(1))
        assert np.array_equal(a.vectors, b.vectors)


class TestQuantize:
    def test_exact_match(self, vocab):
        cb = Codebook(np.random.default_rng(2).normal(size=(8, 4)))
        feats = cb.vectors[[0, 3, 7, 5]].reshape(2, 2, 4)
        grid = quantize(feats, cb, vocab)
        assert list(grid.ids.reshape(-1) - vocab.visual_base) == [0, 3, 7, 5]

    def test_tie_breaks_to_lowest_index(self, vocab):
        cb = Codebook(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0],
                                [0.0, 1.0], [2.0, 2.0], [3.0, 3.0],
                                [4.0, 4.0], [5.0, 5.0]]))
        grid = quantize(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]), cb, vocab)
        assert list(grid.ids.reshape(-1) - vocab.visual_base) == [0, 2]

    def test_nan_rejected(self, vocab):
        cb = Codebook(np.random.default_rng(3).normal(size=(8, 2)))
        with pytest.raises(InputError):
            quantize(np.array([[[np.nan, 0.0]]]), cb, vocab)

    def test_dequantize_roundtrip(self, vocab):
        cb = Codebook(np.random.default_rng(4).normal(size=(8, 3)))
        ids = vocab.visual_base + np.array([[0, 2], [7, 1]])
        feats = dequantize(TokenGrid(ids), cb, vocab)
        assert np.array_equal(quantize(feats, cb, vocab).ids, ids)

    def test_dequantize_refuses_mask(self, vocab):
        cb = Codebook(np.random.default_rng(5).normal(size=(8, 3)))
        ids = np.full((2, 2), vocab.visual_base)
        ids[0, 0] = vocab.mask_id
        with pytest.raises(ContractError):
            dequantize(TokenGrid(ids), cb, vocab)


class TestTokenGrid:
    def test_validate_rejects_text_ids(self, vocab):
        grid = TokenGrid(np.full((2, 2), vocab.word_id("red")))
        with pytest.raises(ContractError):
            grid.validate(vocab)

    def test_codes_maps_mask_to_minus_one(self, vocab):
        ids = np.array([[vocab.visual_base + 3, vocab.mask_id]])
        assert list(TokenGrid(ids).codes(vocab)[0]) == [3, -1]
