"""Self-contained verification suite: finite-difference gradient checks,
brute-force oracle comparisons, sampler statistics, and the loss-weight
contract. Everything runs in double precision on tiny shapes so the whole
suite finishes in well under five minutes on one CPU core."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .alignment import hybrid_loss, info_nce, loss_weights
from .diffusion import (Denoiser, EditCondition, NoiseSchedule, forward_mask,
                        reconstruct_loss, sample_edit)
from .evalmetrics import l2_background_loss
from .reasoning import HierarchicalReasoner, ReasoningAttentionBridge
from .tensor import Tensor, grad_check
from .tokenization import Codebook, TokenGrid, Vocabulary, quantize

F64 = np.float64


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _result(name, ok, detail, t0) -> CheckResult:
    return CheckResult(name, bool(ok), detail, time.time() - t0)


# -- gradient integrity -------------------------------------------------------

def check_grad_rab() -> CheckResult:
    t0 = time.time()
    rng = np.random.default_rng(11)
    rab = ReasoningAttentionBridge(4, 6, rng, dtype=F64)
    h = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    v = Tensor(rng.normal(size=(2, 9, 6)), requires_grad=True)
    leaves = [h, v] + list(rab.parameters().values())

    def f():
        alpha, z = rab(h, v)
        return T.sumt(T.mul(z, z))

    err = grad_check(f, leaves)
    return _result("grad.rab", err < 1e-4, f"max rel err {err:.2e}", t0)


def check_grad_hrm() -> CheckResult:
    t0 = time.time()
    rng = np.random.default_rng(12)
    hrm = HierarchicalReasoner(6, 2, rng, mlp_mult=2, dtype=F64)
    h0 = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
    v = Tensor(rng.normal(size=(2, 4, 6)), requires_grad=True)
    leaves = [h0, v] + list(hrm.parameters().values())

    def f():
        h = hrm(h0, v, 2)
        return T.sumt(T.mul(h, h))

    err = grad_check(f, leaves)
    return _result("grad.hrm", err < 1e-4, f"max rel err {err:.2e}", t0)


def check_grad_denoiser() -> CheckResult:
    """Denoiser plus the masked reconstruction loss as one composite check."""
    t0 = time.time()
    rng = np.random.default_rng(13)
    den = Denoiser(n_codes=5, n_cells=4, schedule_steps=4, d_model=6,
                   n_heads=2, n_layers=1, d_bridge=4, d_reason=6, d_vis=6,
                   rng=rng, mlp_mult=2, dtype=F64)
    codes = np.array([[0, -1, 2, -1]])
    tau = np.array([2])
    v_pix = Tensor(rng.normal(size=(1, 4, 6)), requires_grad=True)
    h_edit = Tensor(rng.normal(size=4), requires_grad=True)
    h_token = Tensor(rng.normal(size=6), requires_grad=True)
    point = Tensor(rng.random(size=(1, 4)), requires_grad=True)
    target = np.array([[0, 3, 2, 1]])
    mask = codes < 0
    leaves = [v_pix, h_edit, h_token, point] + list(den.parameters().values())

    region = np.array([[False, True, False, True]])

    def f():
        mem = den.build_memory(EditCondition(h_edit=h_edit, h_token=h_token))
        logits = den(codes, tau, v_pix, mem, use_gates=True, region=region,
                     point=point)
        return reconstruct_loss(logits, target, mask)

    err = grad_check(f, leaves)
    return _result("grad.denoiser_loss", err < 1e-4, f"max rel err {err:.2e}", t0)


def check_grad_alignment() -> CheckResult:
    """InfoNCE combined with the reconstruction term via the hybrid weights."""
    t0 = time.time()
    rng = np.random.default_rng(14)
    v = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    t_txt = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    logits = Tensor(rng.normal(size=(2, 2, 4)), requires_grad=True)
    target = np.array([[0, 2], [3, 1]])
    mask = np.array([[True, False], [True, True]])

    def f():
        return hybrid_loss(info_nce(v, t_txt, 0.07),
                           T.cross_entropy(logits, target, mask), 0.5)

    err = grad_check(f, [v, t_txt, logits])
    return _result("grad.alignment", err < 1e-4, f"max rel err {err:.2e}", t0)


# -- oracle equivalence -------------------------------------------------------

def check_oracle_rab() -> CheckResult:
    """Bridge output vs an explicit per-cell loop, 100 seeds, 3x3 grids."""
    t0 = time.time()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d_b, d_m = 4, 5
        rab = ReasoningAttentionBridge(d_b, d_m, rng, dtype=F64)
        h = rng.normal(size=(1, d_b))
        v = rng.normal(size=(1, 9, d_m))
        alpha, z = rab(Tensor(h), Tensor(v))
        wq, wk, wv = (rab.wq.weight.data, rab.wk.weight.data,
                      rab.wv.weight.data)
        q = h[0] @ wq
        scores = np.array([q @ (v[0, j] @ wk) for j in range(9)]) / np.sqrt(d_b)
        e = np.exp(scores - scores.max())
        a_ref = e / e.sum()
        z_ref = sum(a_ref[j] * (v[0, j] @ wv) for j in range(9))
        worst = max(worst, np.abs(alpha.data[0] - a_ref).max(),
                    np.abs(z.data[0] - z_ref).max())
    return _result("oracle.rab", worst < 1e-12, f"max abs diff {worst:.2e}", t0)


def check_oracle_quantizer() -> CheckResult:
    """Quantizer vs brute-force nearest neighbor on 1000 random grids."""
    t0 = time.time()
    rng = np.random.default_rng(21)
    vocab = Vocabulary(n_codes=7)
    cb = Codebook(rng.normal(size=(7, 3)))
    bad = 0
    for _ in range(1000):
        feats = rng.normal(size=(4, 4, 3))
        grid = quantize(feats, cb, vocab)
        for i in range(4):
            for j in range(4):
                d = ((cb.vectors - feats[i, j]) ** 2).sum(axis=1)
                best = int(np.flatnonzero(d == d.min())[0])
                if grid.ids[i, j] != vocab.visual_base + best:
                    bad += 1
    return _result("oracle.quantizer", bad == 0, f"{bad} mismatched cells", t0)


def check_oracle_infonce() -> CheckResult:
    """Vectorized InfoNCE vs an explicit double loop over all pairs."""
    t0 = time.time()
    rng = np.random.default_rng(22)
    worst = 0.0
    temp = 0.07
    for _ in range(20):
        b, d = 4, 5
        v = rng.normal(size=(b, d))
        t_txt = rng.normal(size=(b, d))
        got = info_nce(Tensor(v), Tensor(t_txt), temp).item()
        sims = np.empty((b, b))
        for i in range(b):
            for j in range(b):
                sims[i, j] = (v[i] @ t_txt[j]
                              / (np.linalg.norm(v[i]) * np.linalg.norm(t_txt[j]))
                              / temp)

        def nll(mat):
            total = 0.0
            for i in range(b):
                row = mat[i]
                total += -(row[i] - row.max()
                           - np.log(np.exp(row - row.max()).sum()))
            return total / b

        ref = 0.5 * (nll(sims) + nll(sims.T))
        worst = max(worst, abs(got - ref))
    return _result("oracle.infonce", worst < 1e-10,
                   f"max abs diff {worst:.2e}", t0)


def check_oracle_recon_loss() -> CheckResult:
    """Masked reconstruction loss vs hand computation on 2x2 grids."""
    t0 = time.time()
    rng = np.random.default_rng(23)
    worst = 0.0
    for _ in range(50):
        logits = rng.normal(size=(2, 2, 5))
        target = rng.integers(0, 5, (2, 2))
        mask = rng.random((2, 2)) < 0.6
        if not mask.any():
            mask[0, 0] = True
        got = reconstruct_loss(Tensor(logits), target, mask).item()
        ref, n = 0.0, 0
        for i in range(2):
            for j in range(2):
                if mask[i, j]:
                    row = logits[i, j]
                    ref += -(row[target[i, j]]
                             - np.log(np.exp(row - row.max()).sum())
                             - row.max())
                    n += 1
        worst = max(worst, abs(got - ref / n))
    return _result("oracle.recon_loss", worst < 1e-12,
                   f"max abs diff {worst:.2e}", t0)


# -- diffusion statistics -----------------------------------------------------

def check_forward_mask_stats() -> CheckResult:
    """Empirical mask fraction within 3 binomial sigma of the schedule rate."""
    t0 = time.time()
    vocab = Vocabulary(n_codes=4)
    sched = NoiseSchedule(steps=1000)
    grid = TokenGrid(np.full((16, 16), vocab.visual_base, dtype=np.int64))
    rng = np.random.default_rng(31)
    fails = []
    for r in (0.1, 0.3, 0.7):
        tau = sched.step_for_rate(r)
        r_eff = sched.rate(tau)  # nearest representable rate
        n = 16 * 16 * 1000
        count = sum(int(forward_mask(grid, tau, sched, rng, vocab).mask.sum())
                    for _ in range(1000))
        sigma = np.sqrt(n * r_eff * (1 - r_eff))
        if abs(count - n * r_eff) > 3 * sigma:
            fails.append(f"r={r}: z={(count - n * r_eff) / sigma:.2f}")
    return _result("stats.forward_mask", not fails, "; ".join(fails) or "ok", t0)


def check_single_cell_posterior() -> CheckResult:
    """One masked cell, one sampling step: draw frequencies must match the
    denoiser's softmax posterior within 3 sigma over 10000 draws."""
    t0 = time.time()
    rng = np.random.default_rng(32)
    vocab = Vocabulary(n_codes=5)
    den = Denoiser(n_codes=5, n_cells=4, schedule_steps=4, d_model=8,
                   n_heads=2, n_layers=1, d_bridge=4, d_reason=8, d_vis=8,
                   rng=rng, mlp_mult=2, dtype=F64)
    sched = NoiseSchedule(steps=4)
    source = TokenGrid(vocab.visual_base + np.array([[0, 1], [2, 3]]))
    cond = EditCondition(h_edit=Tensor(rng.normal(size=4)))
    edit_mask = np.array([[True, False], [False, False]])
    # predicted posterior for the masked cell
    codes = source.codes(vocab).reshape(-1).copy()
    codes[0] = -1
    tau = sched.step_for_rate(1 / 4)
    mem = den.build_memory(cond)
    logits = den(codes.reshape(1, -1), np.asarray([max(1, tau)]), None, mem,
                 region=edit_mask.reshape(1, -1)).data
    row = logits[0, 0]
    probs = np.exp(row - row.max())
    probs /= probs.sum()
    counts = np.zeros(5)
    draw_rng = np.random.default_rng(33)
    for _ in range(10000):
        out = sample_edit(source, cond, edit_mask, 1, draw_rng, denoiser=den,
                          schedule=sched, v_pix=None, vocab=vocab)
        counts[out.ids[0, 0] - vocab.visual_base] += 1
    fails = []
    for k in range(5):
        sigma = np.sqrt(10000 * probs[k] * (1 - probs[k]))
        if sigma > 0 and abs(counts[k] - 10000 * probs[k]) > 3 * sigma:
            fails.append(f"code {k}: z="
                         f"{(counts[k] - 10000 * probs[k]) / sigma:.2f}")
    return _result("stats.posterior", not fails, "; ".join(fails) or "ok", t0)


def check_hard_preservation() -> CheckResult:
    """1000 sampled edits with random masks: zero background-cell changes and
    zero background feature loss."""
    t0 = time.time()
    rng = np.random.default_rng(41)
    vocab = Vocabulary(n_codes=6)
    cb = Codebook(rng.normal(size=(6, 3)))
    den = Denoiser(n_codes=6, n_cells=16, schedule_steps=8, d_model=8,
                   n_heads=2, n_layers=1, d_bridge=4, d_reason=8, d_vis=8,
                   rng=rng, mlp_mult=2, dtype=F64)
    sched = NoiseSchedule(steps=8)
    violations = 0
    worst_l2 = 0.0
    for i in range(1000):
        ids = vocab.visual_base + rng.integers(0, 6, (4, 4))
        source = TokenGrid(ids)
        mask = rng.random((4, 4)) < 0.3
        if not mask.any():
            mask[rng.integers(4), rng.integers(4)] = True
        cond = EditCondition(h_edit=Tensor(rng.normal(size=4)))
        out = sample_edit(source, cond, mask, rng.integers(1, 4), rng,
                          denoiser=den, schedule=sched, v_pix=None,
                          vocab=vocab)
        if (out.ids[~mask] != source.ids[~mask]).any():
            violations += 1
        if not mask.all():
            worst_l2 = max(worst_l2,
                           l2_background_loss(out, source, mask, cb, vocab))
    ok = violations == 0 and worst_l2 == 0.0
    return _result("sampler.hard_preservation", ok,
                   f"{violations} violations, max bg loss {worst_l2}", t0)


def check_loss_weights() -> CheckResult:
    t0 = time.time()
    rng = np.random.default_rng(51)
    ok = loss_weights(0.0) == (1.0, 0.0) and loss_weights(1.0) == (0.0, 1.0)
    ok = ok and loss_weights(0.5) == (0.5, 0.5)
    for _ in range(100):
        l1, l2 = loss_weights(float(rng.random()))
        ok = ok and abs(l1 + l2 - 1.0) < 1e-15
    return _result("contract.loss_weights", ok, "endpoints + sum-to-one", t0)


ALL_CHECKS = [
    check_grad_rab,
    check_grad_hrm,
    check_grad_denoiser,
    check_grad_alignment,
    check_oracle_rab,
    check_oracle_quantizer,
    check_oracle_infonce,
    check_oracle_recon_loss,
    check_forward_mask_stats,
    check_single_cell_posterior,
    check_hard_preservation,
    check_loss_weights,
]


def run_all(verbose: bool = True) -> list[CheckResult]:
    results = []
    for check in ALL_CHECKS:
        res = check()
        results.append(res)
        if verbose:
            mark = "PASS" if res.ok else "FAIL"
            print(f"{mark}  {res.name:28s} {res.detail} ({res.seconds:.1f}s)",
                  flush=True)
    return results
