"""Layers, transformer blocks, and the AdamW optimizer.

Modules hold their parameters as named Tensors and expose them through
`parameters()` as a flat dict (`module.layer.tensor` naming, which is also the
checkpoint naming scheme).
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter container; children discovered by attribute scan."""

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.parameters(key))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.parameters(f"{key}.{i}"))
        return out

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, param in self.parameters(prefix).items():
            if name not in state:
                raise KeyError(f"missing parameter in checkpoint: {name}")
            arr = state[name]
            if arr.shape != param.data.shape:
                raise T.ShapeError(
                    f"checkpoint shape {arr.shape} != param {name} {param.data.shape}")
            param.data = arr.astype(param.data.dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32, scale: float | None = None):
        if scale is None:
            scale = 1.0 / np.sqrt(d_in)
        self.weight = Tensor(rng.normal(0.0, scale, (d_in, d_out)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}.weight" if prefix else "weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias" if prefix else "bias"] = self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.table = Tensor(rng.normal(0.0, 0.02, (n, dim)).astype(dtype),
                            requires_grad=True)

    def __call__(self, ids) -> Tensor:
        return T.embedding_lookup(self.table, ids)


class MultiHeadAttention(Module):
    """Self- or cross-attention; `attn_bias` is an additive mask in logit space."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator,
                 d_kv: int | None = None, dtype=np.float32):
        if d_model % n_heads:
            raise T.ShapeError(f"d_model {d_model} not divisible by heads {n_heads}")
        d_kv = d_kv if d_kv is not None else d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(d_model, d_model, rng, bias=False, dtype=dtype)
        self.wk = Linear(d_kv, d_model, rng, bias=False, dtype=dtype)
        self.wv = Linear(d_kv, d_model, rng, bias=False, dtype=dtype)
        self.wo = Linear(d_model, d_model, rng, bias=False, dtype=dtype)

    def __call__(self, x: Tensor, mem: Tensor | None = None,
                 attn_bias: np.ndarray | None = None) -> Tensor:
        mem = mem if mem is not None else x
        B, L, D = x.shape
        Lm = mem.shape[1]
        H, dh = self.n_heads, self.d_head

        def split(t: Tensor, length: int) -> Tensor:
            return T.swapaxes(T.reshape(t, (B, length, H, dh)), 1, 2)

        q = split(self.wq(x), L)
        k = split(self.wk(mem), Lm)
        v = split(self.wv(mem), Lm)
        logits = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
        if attn_bias is not None:
            logits = T.add(logits, Tensor(attn_bias.astype(x.dtype)))
        attn = T.softmax(logits, axis=-1)
        out = T.matmul(attn, v)
        out = T.reshape(T.swapaxes(out, 1, 2), (B, L, D))
        return self.wo(out)


class Mlp(Module):
    def __init__(self, d_model: int, rng: np.random.Generator, mult: int = 4,
                 dtype=np.float32):
        self.fc1 = Linear(d_model, mult * d_model, rng, dtype=dtype)
        self.fc2 = Linear(mult * d_model, d_model, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)) then x + mlp(ln(x))."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator,
                 mlp_mult: int = 4, dtype=np.float32):
        self.ln1 = LayerNorm(d_model, dtype=dtype)
        self.attn = MultiHeadAttention(d_model, n_heads, rng, dtype=dtype)
        self.ln2 = LayerNorm(d_model, dtype=dtype)
        self.mlp = Mlp(d_model, rng, mlp_mult, dtype=dtype)

    def __call__(self, x: Tensor, attn_bias: np.ndarray | None = None) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x), attn_bias=attn_bias))
        return T.add(x, self.mlp(self.ln2(x)))


class CrossAttentionBlock(Module):
    """Pre-norm cross-attention from a sequence to an external memory."""

    def __init__(self, d_model: int, n_heads: int, d_mem: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.ln1 = LayerNorm(d_model, dtype=dtype)
        self.attn = MultiHeadAttention(d_model, n_heads, rng, d_kv=d_mem, dtype=dtype)
        self.ln2 = LayerNorm(d_model, dtype=dtype)
        self.mlp = Mlp(d_model, rng, dtype=dtype)

    def __call__(self, x: Tensor, mem: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x), mem=mem))
        return T.add(x, self.mlp(self.ln2(x)))


def causal_bias(length: int, dtype=np.float32) -> np.ndarray:
    """(1, 1, L, L) additive mask: -1e9 above the diagonal."""
    mask = np.triu(np.ones((length, length), dtype=bool), k=1)
    bias = np.where(mask, -1e9, 0.0).astype(dtype)
    return bias[None, None]


def padding_bias(pad_mask: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(B, 1, 1, L) additive mask; True in `pad_mask` marks padding keys."""
    return np.where(pad_mask[:, None, None, :], -1e9, 0.0).astype(dtype)


class AdamW:
    """Decoupled weight-decay adaptive moment estimation."""

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(sorted(params.items()))
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            p.data = p.data - self.lr * (mhat / (np.sqrt(vhat) + self.eps)
                                         + self.weight_decay * p.data)
