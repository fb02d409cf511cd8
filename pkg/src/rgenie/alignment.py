"""Hybrid vision-language alignment: frozen text anchors, trainable vision
encoder with semantic and pixel-aware heads, symmetric InfoNCE, and the
time-weighted combination of contrastive and reconstruction terms."""
from __future__ import annotations

import hashlib

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ContractError, Tensor
from .tokenization import Vocabulary


class TextEncoder(nn.Module):
    """Small transformer over instruction ids, mean-pooled to one vector.

    Frozen after construction: its parameters are excluded from every
    optimizer; `param_hash()` lets callers assert bit-identity.
    """

    def __init__(self, vocab: Vocabulary, d_model: int, d_out: int,
                 rng: np.random.Generator, max_len: int = 16, dtype=np.float32):
        self.emb = nn.Embedding(vocab.size, d_model, rng, dtype=dtype)
        self.pos = nn.Embedding(max_len, d_model, rng, dtype=dtype)
        self.block = nn.TransformerBlock(d_model, 2, rng, 2, dtype=dtype)
        self.out = nn.Linear(d_model, d_out, rng, dtype=dtype)
        self.pad_id = vocab.pad_id

    def __call__(self, ids: np.ndarray) -> Tensor:
        """ids: (B, L) padded instruction ids; returns (B, d_out)."""
        pad = ids == self.pad_id
        x = T.add(self.emb(ids), self.pos(np.arange(ids.shape[1])))
        x = self.block(x, attn_bias=nn.padding_bias(pad, x.dtype))
        keep = (~pad).astype(x.dtype)
        denom = np.maximum(keep.sum(axis=1, keepdims=True), 1.0)
        pooled = T.mul(T.sumt(T.mul(x, Tensor(keep[..., None])), axis=1),
                       1.0 / denom)
        return self.out(pooled)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


class VisionEncoder(nn.Module):
    """Trainable encoder over dequantized grids.

    Produces spatial features V plus two heads: a semantic projection (fed to
    the contrastive loss) and a pixel-aware projection (the denoiser's visual
    feature input). The heads are distinct parameter sets.
    """

    def __init__(self, feat_dim: int, n_cells: int, d_model: int, d_sem: int,
                 n_heads: int, rng: np.random.Generator, mlp_mult: int = 2,
                 dtype=np.float32):
        self.in_proj = nn.Linear(feat_dim, d_model, rng, dtype=dtype)
        self.pos = nn.Embedding(n_cells, d_model, rng, dtype=dtype)
        self.block = nn.TransformerBlock(d_model, n_heads, rng, mlp_mult,
                                         dtype=dtype)
        self.head_sem = nn.Linear(d_model, d_sem, rng, dtype=dtype)
        self.head_pix = nn.Linear(d_model, d_model, rng, dtype=dtype)

    def __call__(self, feats: np.ndarray | Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """feats: (B, N, c) dequantized cell features.

        Returns (V, V_sem, V_pix), each (B, N, ...); spatial extent preserved.
        """
        x = feats if isinstance(feats, Tensor) else Tensor(
            np.asarray(feats, dtype=self.in_proj.weight.data.dtype))
        v = self.block(T.add(self.in_proj(x), self.pos(np.arange(x.shape[1]))))
        return v, self.head_sem(v), self.head_pix(v)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities between rows of a (B,d) and b (B,d)."""
    for t in (a, b):
        norms = np.sqrt((t.data ** 2).sum(axis=-1))
        if (norms == 0).any():
            raise ContractError("cosine similarity undefined for zero vectors")
    an = T.mul(a, T.powr(T.sumt(T.mul(a, a), axis=-1, keepdims=True), -0.5))
    bn = T.mul(b, T.powr(T.sumt(T.mul(b, b), axis=-1, keepdims=True), -0.5))
    return T.matmul(an, T.swapaxes(bn, -1, -2))


def info_nce(v_sem: Tensor, t_txt: Tensor, temperature: float = 0.07) -> Tensor:
    """Symmetric InfoNCE over in-batch negatives with cosine similarities."""
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    if v_sem.shape != t_txt.shape or v_sem.ndim != 2:
        raise T.ShapeError(
            f"info_nce expects matching (B, d) inputs, got {v_sem.shape} "
            f"and {t_txt.shape}")
    b = v_sem.shape[0]
    sims = T.mul(cosine_matrix(v_sem, t_txt), 1.0 / temperature)
    targets = np.arange(b)
    loss_v2t = T.cross_entropy(sims, targets)
    loss_t2v = T.cross_entropy(T.swapaxes(sims, -1, -2), targets)
    return T.mul(T.add(loss_v2t, loss_t2v), 0.5)


def loss_weights(alpha_t: float) -> tuple[float, float]:
    """(contrastive, reconstruction) weights; they always sum to 1."""
    if not 0.0 <= alpha_t <= 1.0:
        raise ContractError(f"alpha_t {alpha_t} outside [0, 1]")
    return 1.0 - alpha_t, alpha_t


def hybrid_loss(l_con: Tensor | float, l_recon: Tensor | float,
                alpha_t: float) -> Tensor:
    """(1 - alpha_t) * contrastive + alpha_t * reconstruction."""
    lam1, lam2 = loss_weights(alpha_t)
    if isinstance(l_con, Tensor) or isinstance(l_recon, Tensor):
        l_con = l_con if isinstance(l_con, Tensor) else Tensor(np.float64(l_con))
        l_recon = l_recon if isinstance(l_recon, Tensor) else Tensor(np.float64(l_recon))
        return T.add(T.mul(l_con, lam1), T.mul(l_recon, lam2))
    return Tensor(np.float64(lam1 * l_con + lam2 * l_recon))


def encode_pair(vision: VisionEncoder, text: TextEncoder,
                image_feats: np.ndarray, text_ids: np.ndarray
                ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Run both encoders; the text path is detached (frozen anchors)."""
    v, v_sem, v_pix = vision(image_feats)
    t_txt = text(text_ids).detach()
    return v, v_sem, v_pix, t_txt
