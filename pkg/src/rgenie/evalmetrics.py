"""Evaluation harness: per-sample editing metrics, aggregate reports with a
stable column order, rendered figures, and a pluggable external scorer."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .alignment import TextEncoder, VisionEncoder
from .tensor import ContractError, ShapeError
from .tokenization import Codebook, TokenGrid, Vocabulary, dequantize


def edit_accuracy(edited: TokenGrid, target: TokenGrid,
                  mask: np.ndarray) -> float | None:
    """Percent of in-mask cells matching the ground-truth target; empty mask
    -> metric absent (None)."""
    if edited.ids.shape != target.ids.shape:
        raise ShapeError(
            f"grid shapes disagree: {edited.ids.shape} vs {target.ids.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != edited.ids.shape:
        raise ShapeError(f"mask shape {mask.shape} != grid {edited.ids.shape}")
    n = int(mask.sum())
    if n == 0:
        return None
    return 100.0 * float((edited.ids[mask] == target.ids[mask]).sum()) / n


def l2_background_loss(edited: TokenGrid, source: TokenGrid, mask: np.ndarray,
                       codebook: Codebook, vocab: Vocabulary) -> float | None:
    """Mean squared feature error OUTSIDE the mask, normalized by the squared
    codebook feature range and scaled to percent. Full-grid mask -> absent."""
    mask = np.asarray(mask, dtype=bool)
    if mask.all():
        return None
    fa = dequantize(edited, codebook, vocab)
    fb = dequantize(source, codebook, vocab)
    rng = float(codebook.vectors.max() - codebook.vectors.min())
    if rng == 0.0:
        raise ContractError("degenerate codebook: zero feature range")
    mse = float(((fa[~mask] - fb[~mask]) ** 2).mean())
    return 100.0 * mse / (rng * rng)


def region_text_similarity(edited: TokenGrid, mask: np.ndarray,
                           target_text_ids: np.ndarray,
                           vision: VisionEncoder, text: TextEncoder,
                           codebook: Codebook, vocab: Vocabulary
                           ) -> float | None:
    """Cosine between pooled semantic features over masked cells and the
    frozen text embedding of the target description, mapped to [0, 100]."""
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if not mask.any():
        return None
    feats = dequantize(edited, codebook, vocab).reshape(1, -1, codebook.dim)
    _, v_sem, _ = vision(feats.astype(np.float32))
    pooled = v_sem.data[0][mask].mean(axis=0)
    ids = np.asarray(target_text_ids, dtype=np.int64).reshape(1, -1)
    t_vec = text(ids).data[0]
    na, nb = np.linalg.norm(pooled), np.linalg.norm(t_vec)
    if na == 0 or nb == 0:
        raise ContractError("cosine undefined for a zero embedding")
    cos = float(pooled @ t_vec / (na * nb))
    return 50.0 * (1.0 + cos)


def plausibility_from_nll(nll_per_cell: float | None) -> float | None:
    return None if nll_per_cell is None else 100.0 * math.exp(-nll_per_cell)


def composite_score(row: dict) -> float | None:
    """Equal-weight mean of instruction adherence (edit accuracy), appearance
    consistency (100 - background loss, clamped), and plausibility. Any absent
    component makes the score absent."""
    acc = row.get("edit_accuracy_pct")
    l2 = row.get("l2_bg_pct")
    plaus = row.get("plausibility_pct")
    if acc is None or l2 is None or plaus is None:
        return None
    consistency = min(max(100.0 - l2, 0.0), 100.0)
    return (acc + consistency + plaus) / 3.0


@dataclass
class ScorerClient:
    """Optional external quality scorer. `transport` maps a serialized grid to
    a real score; when it is missing or fails, the metric is simply absent —
    evaluation never errors out because the scorer is unreachable."""

    transport: Callable[[bytes], float] | None = None
    timeout: float = 5.0
    retries: int = 1

    def score(self, record_bytes: bytes) -> float | None:
        if self.transport is None:
            return None
        for _ in range(max(1, self.retries)):
            try:
                return float(self.transport(record_bytes))
            except Exception:
                continue
        return None


# stable report schema; extend only by appending
COLUMNS = ("idx", "kind", "template", "hops", "no_edit", "mask_iou",
           "clip_sim_pct", "l2_bg_pct", "edit_accuracy_pct", "nll_per_cell",
           "plausibility_pct", "composite_score", "external_score")


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, row: dict) -> None:
        unknown = set(row) - set(COLUMNS)
        if unknown:
            raise ContractError(f"unknown report fields {sorted(unknown)}")
        self.rows.append({c: row.get(c) for c in COLUMNS})

    def aggregate(self, kind: str | None = None) -> dict:
        """Mean of each numeric column over rows (optionally one edit kind),
        skipping absent values."""
        rows = [r for r in self.rows if kind is None or r["kind"] == kind]
        out: dict = {"kind": kind or "all", "n": len(rows)}
        for col in ("mask_iou", "clip_sim_pct", "l2_bg_pct",
                    "edit_accuracy_pct", "nll_per_cell", "plausibility_pct",
                    "composite_score", "external_score"):
            vals = [r[col] for r in rows if r[col] is not None]
            out[col] = sum(vals) / len(vals) if vals else None
        out["no_edit_rate"] = (sum(1 for r in rows if r["no_edit"]) / len(rows)
                               if rows else None)
        return out


def _cell(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_report(report: MetricReport, path: str | Path) -> None:
    """Tab-separated rows in schema order followed by a summary block."""
    lines = ["\t".join(COLUMNS)]
    for row in report.rows:
        lines.append("\t".join(_cell(row[c]) for c in COLUMNS))
    lines.append("")
    lines.append("# summary")
    for kind in (None, "atomic", "composite"):
        agg = report.aggregate(kind)
        for key, val in agg.items():
            if key == "kind":
                continue
            lines.append(f"# {agg['kind']}.{key}\t{_cell(val)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path: str | Path) -> MetricReport:
    """Parse a report file back into rows (summary lines are recomputable)."""
    report = MetricReport()
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    if tuple(header) != COLUMNS:
        raise ContractError("report header does not match the schema")
    for line in lines[1:]:
        if not line or line.startswith("#"):
            continue
        vals = line.split("\t")
        row = {}
        for col, raw in zip(COLUMNS, vals):
            if raw == "NA":
                row[col] = None
            elif col in ("idx", "hops"):
                row[col] = int(raw)
            elif col in ("kind", "template"):
                row[col] = raw
            elif col == "no_edit":
                row[col] = raw == "1"
            else:
                row[col] = float(raw)
        report.add(row)
    return report


def render_figures(report: MetricReport, out_dir: str | Path,
                   history: list[dict] | None = None) -> list[Path]:
    """Write summary figures next to the report; returns the file paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []

    metrics = ("edit_accuracy_pct", "clip_sim_pct", "plausibility_pct",
               "composite_score")
    kinds = ("atomic", "composite")
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.35
    xs = np.arange(len(metrics))
    for i, kind in enumerate(kinds):
        agg = report.aggregate(kind)
        vals = [agg[m] if agg[m] is not None else 0.0 for m in metrics]
        ax.bar(xs + (i - 0.5) * width, vals, width, label=kind)
    ax.set_xticks(xs)
    ax.set_xticklabels([m.replace("_pct", "") for m in metrics], rotation=15)
    ax.set_ylabel("percent")
    ax.set_title("metrics by edit kind")
    ax.legend()
    fig.tight_layout()
    p = out_dir / "metrics_by_kind.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    paths.append(p)

    accs = [r["edit_accuracy_pct"] for r in report.rows
            if r["edit_accuracy_pct"] is not None]
    if accs:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.hist(accs, bins=20, range=(0, 100), color="tab:blue", alpha=0.8)
        ax.set_xlabel("edit accuracy (%)")
        ax.set_ylabel("samples")
        ax.set_title("per-sample edit accuracy")
        fig.tight_layout()
        p = out_dir / "accuracy_hist.png"
        fig.savefig(p, dpi=110)
        plt.close(fig)
        paths.append(p)

    if history:
        fig, ax = plt.subplots(figsize=(6, 4))
        epochs = [h["epoch"] for h in history]
        for key in ("loss", "lm", "recon", "con"):
            vals = [h.get(key) for h in history]
            if all(v is not None and not math.isnan(v) for v in vals):
                ax.plot(epochs, vals, label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_title("training curves")
        ax.legend()
        fig.tight_layout()
        p = out_dir / "training_curves.png"
        fig.savefig(p, dpi=110)
        plt.close(fig)
        paths.append(p)
    return paths


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 1.0
