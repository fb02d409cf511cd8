"""Causal multimodal transformer, edit-signal extraction, hierarchical
reasoning, and the reasoning-attention bridge.

The decoder consumes `[visual tokens ++ instruction ++ <REASON> ++ output]`.
The hidden state at the generated <EDIT> position, projected by `psi`, is the
edit signal; the states between <REASON> and <EDIT>, projected by `gamma`, are
the reasoning trace consumed by the hierarchical reasoner.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ContractError, InputError, Tensor
from .tokenization import TokenGrid, Vocabulary, find_edit_position


@dataclass
class MllmConfig:
    d_model: int = 96
    n_heads: int = 4
    n_layers: int = 3
    d_bridge: int = 48          # RAB feature dimension (paper-scale preset: 1024)
    t_max: int = 8              # max reasoning steps
    max_text_len: int = 10
    max_out_len: int = 8
    mlp_mult: int = 2
    grid_h: int = 12
    grid_w: int = 12

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(
                f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.t_max < 1:
            raise ContractError("t_max must be >= 1")

    @property
    def context_len(self) -> int:
        return self.grid_h * self.grid_w + self.max_text_len + 1 + self.max_out_len


@dataclass
class ReasoningTrace:
    """Projected reasoning states plus the extracted edit signal."""

    states: list[Tensor] = field(default_factory=list)  # each (d_model,)
    h_edit: Tensor | None = None                        # (d_bridge,)
    edit_pos: int | None = None

    def __post_init__(self):
        if (self.h_edit is None) != (self.edit_pos is None):
            raise ContractError("h_edit present iff edit position present")

    @property
    def length(self) -> int:
        return len(self.states)


@dataclass
class AttentionMap:
    """Nonnegative spatial editing weights summing to 1."""

    weights: np.ndarray  # (H, W)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if (self.weights < 0).any():
            raise ContractError("attention weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-6:
            raise ContractError(f"attention weights sum {self.weights.sum()} != 1")


class Mllm(nn.Module):
    """Decoder-only transformer over the shared token id space."""

    def __init__(self, config: MllmConfig, vocab: Vocabulary,
                 rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.vocab = vocab
        self.dtype = dtype
        self.emb = nn.Embedding(vocab.size, config.d_model, rng, dtype=dtype)
        self.pos = nn.Embedding(config.context_len, config.d_model, rng, dtype=dtype)
        self.blocks = [nn.TransformerBlock(config.d_model, config.n_heads, rng,
                                           config.mlp_mult, dtype=dtype)
                       for _ in range(config.n_layers)]
        self.ln_f = nn.LayerNorm(config.d_model, dtype=dtype)
        self.lm_head = nn.Linear(config.d_model, vocab.size, rng, bias=False,
                                 dtype=dtype)

    def forward(self, ids: np.ndarray, pad_mask: np.ndarray | None = None
                ) -> tuple[Tensor, Tensor]:
        """Teacher-forced pass. ids: (B, L). Returns (hidden, logits)."""
        B, L = ids.shape
        if L > self.config.context_len:
            raise InputError(
                f"sequence length {L} exceeds context window {self.config.context_len}")
        x = T.add(self.emb(ids), self.pos(np.arange(L)))
        bias = nn.causal_bias(L, self.dtype)
        if pad_mask is not None:
            bias = bias + nn.padding_bias(pad_mask, self.dtype)
        for blk in self.blocks:
            x = blk(x, attn_bias=bias)
        hidden = self.ln_f(x)
        return hidden, self.lm_head(hidden)


def mllm_forward(model: Mllm, image_grid: TokenGrid, text_ids,
                 ) -> tuple[list[int], Tensor]:
    """Greedy chain-of-thought decoding for one sample.

    Returns the generated ids (up to and including EOS if produced) and the
    final-layer hidden states aligned to all positions of the last forward.
    """
    vocab = model.vocab
    image_grid.validate(vocab)
    prefix = list(image_grid.ids.reshape(-1)) + list(text_ids) + [vocab.reason_id]
    if len(prefix) + model.config.max_out_len > model.config.context_len:
        raise InputError(
            f"prefix length {len(prefix)} leaves no room in context "
            f"{model.config.context_len}")
    generated: list[int] = []
    hidden = None
    for _ in range(model.config.max_out_len):
        ids = np.asarray([prefix + generated], dtype=np.int64)
        hidden, logits = model.forward(ids)
        nxt = int(np.argmax(logits.data[0, -1]))
        generated.append(nxt)
        if nxt == vocab.eos_id:
            break
    return generated, hidden


def extract_edit_signal(hidden_states: Tensor, k: int, psi: nn.Linear) -> Tensor:
    """Project the hidden state at the edit-token position."""
    L = hidden_states.shape[-2]
    if not 0 <= k < L:
        raise ContractError(f"edit position {k} out of range for length {L}")
    h = hidden_states[..., k, :]
    if h.ndim == 1:
        h = T.reshape(h, (1, -1))
        return T.reshape(psi(h), (-1,))
    return psi(h)


def project_reason_states(hidden_states: Tensor, reason_pos: int, edit_pos: int,
                          gamma: nn.Linear) -> list[Tensor]:
    """Project the states strictly between <REASON> and <EDIT>.

    The dynamic reasoning length is the number of those positions; an edit
    token immediately after <REASON> yields an empty, flagged trace.
    """
    if edit_pos <= reason_pos:
        raise ContractError(f"edit position {edit_pos} precedes reason {reason_pos}")
    count = edit_pos - reason_pos - 1
    if count == 0:
        warnings.warn("empty reasoning trace: <EDIT> immediately follows <REASON>")
        return []
    states = []
    for p in range(reason_pos + 1, edit_pos):
        h = hidden_states[..., p, :]
        if h.ndim == 1:
            h = T.reshape(h, (1, -1))
            states.append(T.reshape(gamma(h), (-1,)))
        else:
            states.append(gamma(h))
    return states


class HierarchicalReasoner(nn.Module):
    """Iterated transformer block refining a state against pooled visual context."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator,
                 mlp_mult: int = 2, dtype=np.float32):
        self.w_in = nn.Linear(2 * d_model, d_model, rng, dtype=dtype)
        self.block = nn.TransformerBlock(d_model, n_heads, rng, mlp_mult,
                                         dtype=dtype)

    def __call__(self, h0: Tensor, v: Tensor, steps: int) -> Tensor:
        """h0: (B, D); v: (B, N, D) spatial features; returns (B, D)."""
        if steps < 0:
            raise ContractError("steps must be >= 0")
        h = h0
        v_global = T.meant(v, axis=1)
        B, D = h0.shape
        for _ in range(steps):
            x = T.concat([h, v_global], axis=-1)
            x = T.reshape(self.w_in(x), (B, 1, D))
            h = T.reshape(self.block(x), (B, D))
        return h


def hierarchical_reason(hrm: HierarchicalReasoner, h0: Tensor, v: Tensor,
                        steps: int) -> Tensor:
    return hrm(h0, v, steps)


class ReasoningAttentionBridge(nn.Module):
    """Cross-attention from the edit signal over spatial visual features."""

    def __init__(self, d_bridge: int, d_model: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.d_bridge = d_bridge
        self.wq = nn.Linear(d_bridge, d_bridge, rng, bias=False, dtype=dtype)
        self.wk = nn.Linear(d_model, d_bridge, rng, bias=False, dtype=dtype)
        self.wv = nn.Linear(d_model, d_bridge, rng, bias=False, dtype=dtype)

    def __call__(self, h_edit: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
        """h_edit: (B, d); v: (B, N, D). Returns (alpha (B, N), Z (B, d))."""
        B = h_edit.shape[0]
        q = T.reshape(self.wq(h_edit), (B, 1, self.d_bridge))
        k = self.wk(v)
        logits = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)),
                       1.0 / np.sqrt(self.d_bridge))
        alpha = T.softmax(logits, axis=-1)
        z = T.matmul(alpha, self.wv(v))
        return T.reshape(alpha, (B, -1)), T.reshape(z, (B, self.d_bridge))


def reasoning_attention(rab: ReasoningAttentionBridge, h_edit: Tensor,
                        v: Tensor, grid_shape: tuple[int, int] | None = None
                        ) -> tuple[AttentionMap, Tensor]:
    """Single-sample convenience wrapper returning a validated AttentionMap."""
    if h_edit.ndim == 1:
        h_edit = T.reshape(h_edit, (1, -1))
    if v.ndim == 3 and grid_shape is None:
        grid_shape = (v.shape[0], v.shape[1])
        v = T.reshape(v, (1, v.shape[0] * v.shape[1], v.shape[2]))
    alpha, z = rab(h_edit, v)
    amap = AttentionMap(alpha.data[0].reshape(grid_shape))
    return amap, T.reshape(z, (-1,))
