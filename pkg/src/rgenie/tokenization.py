"""Shared token id space, special tokens, and the quantizing visual tokenizer.

Id layout is contiguous: [specials][text words][visual codes]. Visual token
grids always store ids from the visual range (or MASK during diffusion).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ContractError, InputError

SPECIALS = ("PAD", "BOS", "EOS", "REASON", "EDIT", "MASK")

# Closed instruction vocabulary of the micro-world language.
WORDS = (
    "change", "the", "to", "remove", "recolor", "every", "object", "left",
    "of", "largest", "smallest", "leftmost", "color", "warm", "cool",
    "red", "orange", "yellow", "green", "blue", "purple",
    "square", "circle", "bar", "background", "describe", "scene",
)


@dataclass(frozen=True)
class Vocabulary:
    """Contiguous id space with disjoint special / text / visual ranges."""

    words: tuple[str, ...] = WORDS
    n_codes: int = 64

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def reason_id(self) -> int:
        return 3

    @property
    def edit_id(self) -> int:
        return 4

    @property
    def mask_id(self) -> int:
        return 5

    @property
    def text_base(self) -> int:
        return len(SPECIALS)

    @property
    def visual_base(self) -> int:
        return self.text_base + len(self.words)

    @property
    def size(self) -> int:
        return self.visual_base + self.n_codes

    def word_id(self, word: str) -> int:
        return self.text_base + self.words.index(word)

    def encode_text(self, text: str) -> list[int]:
        return [self.word_id(w) for w in text.split()]

    def decode(self, ids) -> str:
        parts = []
        for i in ids:
            i = int(i)
            if i < self.text_base:
                parts.append(f"<{SPECIALS[i]}>")
            elif i < self.visual_base:
                parts.append(self.words[i - self.text_base])
            else:
                parts.append(f"[v{i - self.visual_base}]")
        return " ".join(parts)

    def is_visual(self, i: int) -> bool:
        return self.visual_base <= i < self.size

    def write_sidecar(self, path: str | Path) -> None:
        """Plain-text listing of special-token id assignments."""
        lines = [f"{name}\t{i}" for i, name in enumerate(SPECIALS)]
        lines.append(f"TEXT_BASE\t{self.text_base}")
        lines.append(f"VISUAL_BASE\t{self.visual_base}")
        lines.append(f"VOCAB_SIZE\t{self.size}")
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class Codebook:
    """K code vectors of dimension c; frozen after k-means initialization."""

    vectors: np.ndarray  # (K, c) float64

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise ContractError("codebook needs K >= 2 code vectors")
        if not np.isfinite(self.vectors).all():
            raise ContractError("codebook contains non-finite vectors")

    @property
    def k(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class TokenGrid:
    """H x W grid of visual token ids (global id space; MASK allowed)."""

    ids: np.ndarray  # (H, W) int64

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 2:
            raise ContractError(f"token grid must be 2-D, got shape {self.ids.shape}")

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    def validate(self, vocab: Vocabulary) -> None:
        ok = ((self.ids == vocab.mask_id)
              | ((self.ids >= vocab.visual_base) & (self.ids < vocab.size)))
        if not ok.all():
            bad = self.ids[~ok]
            raise ContractError(f"token grid contains non-visual ids: {bad[:8]}")

    def codes(self, vocab: Vocabulary) -> np.ndarray:
        """Local code indices; MASK cells map to -1."""
        out = self.ids - vocab.visual_base
        out[self.ids == vocab.mask_id] = -1
        return out

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.ids.copy())


def kmeans_codebook(features: np.ndarray, k: int, rng: np.random.Generator,
                    iters: int = 25) -> Codebook:
    """Lloyd's k-means (k-means++ seeding) over sampled cell features.

    Duplicate sample points are fine: surplus centroids collapse onto existing
    ones and quantization tie-breaking keeps the mapping deterministic.
    """
    pts = np.asarray(features, dtype=np.float64).reshape(-1, features.shape[-1])
    n = pts.shape[0]
    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[rng.integers(n)]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = pts[rng.integers(n)]
            continue
        centroids[i] = pts[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((pts - centroids[i]) ** 2).sum(axis=1))
    for _ in range(iters):
        dist = ((pts[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        for i in range(k):
            sel = assign == i
            if sel.any():
                centroids[i] = pts[sel].mean(axis=0)
    return Codebook(centroids)


def quantize(features: np.ndarray, codebook: Codebook,
             vocab: Vocabulary) -> TokenGrid:
    """Nearest-code assignment per cell; ties broken by lowest code index."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[-1] != codebook.dim:
        raise InputError(
            f"feature grid shape {features.shape} incompatible with "
            f"codebook dim {codebook.dim}")
    if not np.isfinite(features).all():
        raise InputError("feature grid contains NaN or infinite values")
    flat = features.reshape(-1, codebook.dim)
    # ||x - c||^2 expanded; recompute exact distance for near-ties stability
    dist = ((flat[:, None, :] - codebook.vectors[None]) ** 2).sum(axis=2)
    codes = dist.argmin(axis=1)
    ids = (vocab.visual_base + codes).reshape(features.shape[:2])
    return TokenGrid(ids)


def dequantize(grid: TokenGrid, codebook: Codebook,
               vocab: Vocabulary) -> np.ndarray:
    """Inverse lookup; refuses grids with MASK cells."""
    if (grid.ids == vocab.mask_id).any():
        raise ContractError("dequantize on a grid containing MASK ids")
    grid.validate(vocab)
    return codebook.vectors[grid.ids - vocab.visual_base]


def append_reason(text_ids, vocab: Vocabulary) -> list[int]:
    """Concatenate the reasoning-start marker onto an instruction."""
    return list(text_ids) + [vocab.reason_id]


def find_edit_position(output_ids, vocab: Vocabulary) -> int | None:
    """Index of the first edit-signal token, or None if the model chose no edit."""
    for i, t in enumerate(output_ids):
        if int(t) == vocab.edit_id:
            return i
    return None
