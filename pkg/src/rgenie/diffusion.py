"""Editing-conditioned masked discrete diffusion over token grids.

Training corrupts the whole grid (each cell independently replaced by <MASK>
at the schedule rate) and maximizes masked-token log-likelihood. Inference
masks only the edit region and unmasks iteratively, committing the most
confident cells per round; cells outside the edit region are never altered.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ContractError, Tensor
from .tokenization import Codebook, TokenGrid, Vocabulary


@dataclass(frozen=True)
class NoiseSchedule:
    """Monotone mask-rate schedule with r(0)=0 and r(S)=1."""

    steps: int = 16
    family: str = "cosine"

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError("schedule needs at least one step")
        if self.family != "cosine":
            raise ContractError(f"unknown schedule family {self.family!r}")

    def rate(self, tau: int | float) -> float:
        if not 0 <= tau <= self.steps:
            raise ContractError(f"step {tau} outside [0, {self.steps}]")
        return float(1.0 - np.cos(np.pi / 2.0 * tau / self.steps))

    def step_for_rate(self, rate: float) -> int:
        """Nearest schedule step whose mask rate matches `rate`."""
        rate = min(max(rate, 0.0), 1.0)
        tau = 2.0 * self.steps / np.pi * np.arccos(1.0 - rate)
        return int(np.clip(round(tau), 0, self.steps))


def schedule_rate(schedule: NoiseSchedule, tau: int | float) -> float:
    return schedule.rate(tau)


@dataclass
class DiffusionState:
    """Partially masked grid plus its mask indicator and step index."""

    grid: TokenGrid
    mask: np.ndarray  # (H, W) bool, True where grid is <MASK>
    step: int

    def validate(self, vocab: Vocabulary) -> None:
        masked = self.grid.ids == vocab.mask_id
        if not np.array_equal(masked, self.mask):
            raise ContractError("mask indicator disagrees with MASK cells")


@dataclass
class EditCondition:
    """Conditioning bundle routed into the denoiser."""

    h_edit: Tensor
    z: Tensor | None = None
    h_reason: Tensor | None = None
    h_token: Tensor | None = None  # hidden state at the last reasoning token
    region_prior: np.ndarray | None = None  # (H, W) attention weights

    def __post_init__(self):
        for t in (self.h_edit, self.z, self.h_reason, self.h_token):
            if t is not None and not np.isfinite(t.data).all():
                raise ContractError("non-finite conditioning values")


def forward_mask(grid: TokenGrid, tau: int, schedule: NoiseSchedule,
                 rng: np.random.Generator, vocab: Vocabulary) -> DiffusionState:
    """Independently replace each cell by <MASK> with probability r(tau)."""
    if (grid.ids == vocab.mask_id).any():
        raise ContractError("forward_mask input already contains MASK")
    r = schedule.rate(tau)
    mask = rng.random(grid.ids.shape) < r
    ids = grid.ids.copy()
    ids[mask] = vocab.mask_id
    return DiffusionState(TokenGrid(ids), mask, tau)


class Denoiser(nn.Module):
    """Bidirectional transformer over the grid with conditioning cross-attention
    and per-position context-preservation gates."""

    def __init__(self, n_codes: int, n_cells: int, schedule_steps: int,
                 d_model: int, n_heads: int, n_layers: int,
                 d_bridge: int, d_reason: int, d_vis: int,
                 rng: np.random.Generator, mlp_mult: int = 2, dtype=np.float32):
        self.n_codes = n_codes
        self.tok_emb = nn.Embedding(n_codes + 1, d_model, rng, dtype=dtype)  # row n_codes = MASK
        self.pos_emb = nn.Embedding(n_cells, d_model, rng, dtype=dtype)
        self.step_emb = nn.Embedding(schedule_steps + 1, d_model, rng, dtype=dtype)
        # inside/outside indicator for the spatial edit-region prior
        self.region_emb = nn.Embedding(2, d_model, rng, dtype=dtype)
        self.pix_proj = nn.Linear(d_vis, d_model, rng, dtype=dtype)
        self.proj_edit = nn.Linear(d_bridge, d_model, rng, dtype=dtype)
        self.proj_z = nn.Linear(d_bridge, d_model, rng, dtype=dtype)
        self.proj_reason = nn.Linear(d_reason, d_model, rng, dtype=dtype)
        self.proj_token = nn.Linear(d_reason, d_model, rng, dtype=dtype)
        # per-cell scalar pointer (reasoning attention weights) -> feature
        self.point_proj = nn.Linear(1, d_model, rng, dtype=dtype)
        # pointer-weighted pooling of the visual features: broadcasts the
        # attributes at the pointed cells (e.g. a referent's color) to every
        # position, so masked cells need no attention hop to read them; the
        # gate lets the conditioning shut the readout off when the edit
        # content is named in the instruction rather than read off the grid
        self.read_proj = nn.Linear(d_model, d_model, rng, dtype=dtype)
        self.read_gate = nn.Linear(d_model, 1, rng, dtype=dtype)
        self.self_blocks = [nn.TransformerBlock(d_model, n_heads, rng, mlp_mult,
                                                dtype=dtype)
                            for _ in range(n_layers)]
        self.cross_blocks = [nn.CrossAttentionBlock(d_model, n_heads, d_model,
                                                    rng, dtype=dtype)
                             for _ in range(n_layers)]
        # context-preservation gates, one per (self, cross) layer; bias +4 so an
        # untrained gate passes the layer output nearly unchanged
        self.gates = [nn.Linear(d_model, 1, rng, dtype=dtype)
                      for _ in range(2 * n_layers)]
        for g in self.gates:
            g.bias.data = g.bias.data + 4.0
        self.ln_f = nn.LayerNorm(d_model, dtype=dtype)
        self.head = nn.Linear(d_model, n_codes, rng, bias=False, dtype=dtype)

    def _gated(self, gate: nn.Linear, out: Tensor, inp: Tensor,
               use_gates: bool) -> Tensor:
        if not use_gates:
            return out
        g = T.sigmoid(gate(inp))
        return T.add(T.mul(g, out), T.mul(T.add(T.mul(g, -1.0), 1.0), inp))

    def __call__(self, codes: np.ndarray, tau: np.ndarray,
                 v_pix: Tensor | None, memory: Tensor | None,
                 use_gates: bool = True, region: np.ndarray | None = None,
                 point: Tensor | np.ndarray | None = None) -> Tensor:
        """codes: (B, N) local code ids with -1 for MASK; tau: (B,) step ids;
        v_pix: (B, N, d_vis) visual feature input; memory: (B, M, d) condition
        slots; region: (B, N) bool edit-region prior (cells the edit may
        rewrite, as opposed to cells merely masked for reconstruction);
        point: (B, N) attention weights marking the cells the reasoning
        pathway refers to. Returns logits (B, N, K)."""
        idx = codes.copy()
        idx[idx < 0] = self.n_codes
        x = T.add(self.tok_emb(idx), self.pos_emb(np.arange(codes.shape[1])))
        step = self.step_emb(tau)
        x = T.add(x, T.reshape(step, (codes.shape[0], 1, -1)))
        if region is not None:
            x = T.add(x, self.region_emb(np.asarray(region, dtype=np.int64)))
        pix = self.pix_proj(v_pix) if v_pix is not None else None
        if point is not None:
            if not isinstance(point, Tensor):
                point = Tensor(np.asarray(point))
            weights = T.reshape(point, (*point.shape, 1))
            x = T.add(x, self.point_proj(weights))
            if pix is not None:
                pooled = T.sumt(T.mul(pix, weights), axis=1)
                if memory is not None:
                    gate = T.sigmoid(self.read_gate(T.meant(memory, axis=1)))
                    pooled = T.mul(pooled, gate)
                x = T.add(x, T.reshape(self.read_proj(pooled),
                                       (codes.shape[0], 1, -1)))
        if pix is not None:
            x = T.add(x, pix)
        if memory is not None:
            x = T.add(x, T.meant(memory, axis=1, keepdims=True))
        for i, (sb, cb) in enumerate(zip(self.self_blocks, self.cross_blocks)):
            x = self._gated(self.gates[2 * i], sb(x), x, use_gates)
            if memory is not None:
                x = self._gated(self.gates[2 * i + 1], cb(x, memory), x, use_gates)
        return self.head(self.ln_f(x))

    def build_memory(self, cond: EditCondition) -> Tensor:
        """Stack the projected condition vectors into cross-attention slots."""
        slots = [self.proj_edit(_row(cond.h_edit))]
        if cond.z is not None:
            slots.append(self.proj_z(_row(cond.z)))
        if cond.h_reason is not None:
            slots.append(self.proj_reason(_row(cond.h_reason)))
        if cond.h_token is not None:
            slots.append(self.proj_token(_row(cond.h_token)))
        mem = T.concat(slots, axis=0)
        return T.reshape(mem, (1, len(slots), -1))


def _row(t: Tensor) -> Tensor:
    return T.reshape(t, (1, -1)) if t.ndim == 1 else t


def _pointer(cond: EditCondition) -> np.ndarray | None:
    if cond.region_prior is None:
        return None
    return np.asarray(cond.region_prior).reshape(1, -1)


def denoise_logits(denoiser: Denoiser, state: DiffusionState,
                   cond: EditCondition, tau: int, v_pix: Tensor | None,
                   vocab: Vocabulary, use_gates: bool = True,
                   region: np.ndarray | None = None) -> Tensor:
    """Single-sample wrapper: returns (H, W, K) logits."""
    state.validate(vocab)
    h, w = state.grid.height, state.grid.width
    codes = state.grid.codes(vocab).reshape(1, -1)
    mem = denoiser.build_memory(cond)
    if region is not None:
        region = np.asarray(region, dtype=bool).reshape(1, -1)
    logits = denoiser(codes, np.asarray([tau]), v_pix, mem, use_gates, region,
                      _pointer(cond))
    return T.reshape(logits, (h, w, denoiser.n_codes))


def reconstruct_loss(logits: Tensor, target: TokenGrid | np.ndarray,
                     mask: np.ndarray, vocab: Vocabulary | None = None) -> Tensor:
    """Mean negative log-likelihood of target ids over masked positions."""
    if isinstance(target, TokenGrid):
        if vocab is None:
            raise ContractError("vocab required to decode a TokenGrid target")
        codes = target.codes(vocab)
    else:
        codes = np.asarray(target, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != codes.shape or codes.shape != mask.shape:
        raise T.ShapeError(
            f"reconstruct_loss shapes disagree: logits {logits.shape}, "
            f"targets {codes.shape}, mask {mask.shape}")
    return T.cross_entropy(logits, codes, mask)


def region_from_attention(alpha: np.ndarray) -> np.ndarray:
    """Threshold attention weights at mean + 1 std; never empty."""
    alpha = np.asarray(alpha, dtype=np.float64)
    mask = alpha > alpha.mean() + alpha.std()
    if not mask.any():
        mask = alpha >= alpha.max()
    return mask


def sample_edit(source: TokenGrid, cond: EditCondition, edit_mask: np.ndarray,
                steps: int, rng: np.random.Generator, *,
                denoiser: Denoiser, schedule: NoiseSchedule,
                v_pix: Tensor | None, vocab: Vocabulary,
                use_gates: bool = True, trace: list | None = None) -> TokenGrid:
    """Iterative confidence-based unmasking restricted to the edit region.

    Cells outside `edit_mask` are copied from the source verbatim; the sampler
    only ever writes inside the region (hard preservation guarantee).
    """
    if steps < 1:
        raise ContractError("sample_edit needs steps >= 1")
    edit_mask = np.asarray(edit_mask, dtype=bool)
    if edit_mask.shape != source.ids.shape:
        raise T.ShapeError(
            f"edit mask shape {edit_mask.shape} != grid {source.ids.shape}")
    out_codes = source.codes(vocab).reshape(-1).copy()
    region = edit_mask.reshape(-1)
    n_edit = int(region.sum())
    if n_edit == 0:
        return source.copy()

    n_cells = out_codes.size
    still_masked = region.copy()
    work = out_codes.copy()
    work[still_masked] = -1
    mem = denoiser.build_memory(cond)
    point = _pointer(cond)
    for s in range(1, steps + 1):
        n_masked = int(still_masked.sum())
        if n_masked == 0:
            break
        tau = denoiser_tau = schedule.step_for_rate(n_masked / n_cells)
        logits = denoiser(work.reshape(1, -1), np.asarray([denoiser_tau]),
                          v_pix, mem, use_gates, region.reshape(1, -1), point)
        probs = T.softmax(logits, axis=-1).data[0]
        masked_idx = np.flatnonzero(still_masked)
        draws = np.empty(masked_idx.size, dtype=np.int64)
        conf = np.empty(masked_idx.size)
        u = rng.random(masked_idx.size)
        for j, cell in enumerate(masked_idx):
            cdf = np.cumsum(probs[cell])
            draws[j] = int(np.searchsorted(cdf, u[j] * cdf[-1]))
            conf[j] = probs[cell, draws[j]]
        keep_masked = int(np.floor(n_edit * np.cos(np.pi / 2.0 * s / steps)))
        keep_masked = min(keep_masked, n_masked - 1) if s < steps else 0
        n_commit = n_masked - keep_masked
        order = np.argsort(-conf, kind="stable")[:n_commit]
        commit_cells = masked_idx[order]
        work[commit_cells] = draws[order]
        still_masked[commit_cells] = False
        if trace is not None:
            trace.append({
                "round": s, "tau": int(tau),
                "committed": [int(c) for c in commit_cells],
                "confidence": [float(conf[o]) for o in order],
            })
    out_codes[region] = work[region]
    ids = source.ids.copy()
    ids.reshape(-1)[region] = vocab.visual_base + out_codes[region]
    return TokenGrid(ids)
