"""Command-line surface: data generation, training, editing, evaluation,
and the verification suite."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import PRESETS, load_config_file, make_config
from .microworld import (GenerationError, MicroworldConfig, build_dataset,
                         load_codebook, load_records)
from .tensor import ContractError, InputError, ShapeError


def _data_root(args) -> Path:
    if getattr(args, "data", None):
        return Path(args.data)
    return Path(os.environ.get("RGENIE_DATA_DIR", "data"))


def _parse_ablations(pairs: list[str]) -> dict:
    switches = {"hrm", "rab", "gates", "hybrid"}
    out = {}
    for pair in pairs:
        try:
            name, state = pair.split("=", 1)
        except ValueError:
            raise ContractError(f"--ablate expects SWITCH=on|off, got {pair!r}")
        name = name.lower()
        if name not in switches:
            raise ContractError(f"unknown ablation switch {name!r}; "
                                f"choose from {sorted(switches)}")
        if state not in ("on", "off"):
            raise ContractError(f"ablation state must be on|off, got {state!r}")
        out[name] = state == "on"
    return out


def _build_config(args):
    overrides = load_config_file(args.config) if args.config else {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if getattr(args, "epochs", None) is not None:
        overrides["max_epochs"] = args.epochs
    return make_config(args.preset, overrides, _parse_ablations(args.ablate))


def _microworld_config(cfg) -> MicroworldConfig:
    return MicroworldConfig(grid_h=cfg.grid_h, grid_w=cfg.grid_w,
                            n_codes=cfg.n_codes, min_objects=cfg.min_objects,
                            max_objects=cfg.max_objects)


def cmd_gen_data(args) -> int:
    cfg = _build_config(args)
    out = _data_root(args)
    manifest = build_dataset(cfg.seed, out, n_train=cfg.n_train,
                             n_val=cfg.n_val, config=_microworld_config(cfg))
    cfg.echo(out / "config.json")
    print(json.dumps(manifest, indent=2))
    return 0


def cmd_train(args) -> int:
    from .model import RGenie

    cfg = _build_config(args)
    root = _data_root(args)
    _, train = load_records(root / "train.jsonl")
    codebook = load_codebook(root / "codebook.ckpt")
    model = RGenie(cfg, codebook)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg.echo(out.with_suffix(".config.json"))
    log_path = args.log or out.with_suffix(".log.jsonl")
    model.fit(train, log_path=log_path, progress=not args.quiet)
    digest = model.save(out)
    print(f"checkpoint {out} sha256 {digest}")
    return 0


def cmd_edit(args) -> int:
    from .model import RGenie
    from .evalmetrics import mask_iou

    model = RGenie.load(args.checkpoint)
    cfg = model.config
    root = _data_root(args)
    _, records = load_records(root / f"{args.split}.jsonl")
    if args.limit:
        records = records[:args.limit]
    rng = np.random.default_rng([cfg.seed if args.seed is None else args.seed,
                                 0xED17])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg.echo(out.with_suffix(".config.json"))
    with open(out, "w") as fh:
        for rec in records:
            res = model.edit_record(rec, args.mode, rng, keep_trace=args.trace)
            oracle = rec.mask(cfg.grid_h, cfg.grid_w)
            row = {"idx": rec.idx, "instruction": rec.instruction,
                   "no_edit": res.no_edit,
                   "edited_ids": [int(i) for i in res.edited.ids.reshape(-1)],
                   "mask_iou": mask_iou(res.mask_used, oracle)}
            if args.trace:
                row["trace"] = res.trace
            fh.write(json.dumps(row) + "\n")
    print(f"wrote {len(records)} edits to {out}")
    return 0


def cmd_eval(args) -> int:
    from .model import RGenie, evaluate
    from .evalmetrics import render_figures, write_report

    model = RGenie.load(args.checkpoint)
    cfg = model.config
    root = _data_root(args)
    _, records = load_records(root / f"{args.split}.jsonl")
    if args.limit:
        records = records[:args.limit]
    report = evaluate(model, records, args.mode,
                      cfg.seed if args.seed is None else args.seed)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg.echo(out.with_suffix(".config.json"))
    write_report(report, out)
    if args.figures:
        history = None
        log = Path(args.checkpoint).with_suffix(".log.jsonl")
        if log.exists():
            history = [json.loads(line) for line in log.read_text().splitlines()]
        render_figures(report, out.parent, history)
    for kind in (None, "atomic", "composite"):
        agg = report.aggregate(kind)
        acc = agg["edit_accuracy_pct"]
        print(f"{agg['kind']}: n={agg['n']} "
              f"edit_accuracy={'NA' if acc is None else f'{acc:.2f}'}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all(verbose=True)
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rgenie",
        description="reasoning-guided generative editing on a token micro-world")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON config file with overrides")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        p.add_argument("--ablate", action="append", default=[],
                       metavar="SWITCH=on|off",
                       help="toggle hrm/rab/gates/hybrid (repeatable)")
        if data:
            p.add_argument("--data", help="dataset directory "
                           "(default $RGENIE_DATA_DIR or ./data)")

    p = sub.add_parser("gen-data", help="generate the micro-world dataset")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the full editing stack")
    common(p)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="training log path (JSONL)")
    p.add_argument("--epochs", type=int, help="early-stop epoch cap")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("edit", help="run the edit pipeline over a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["predicted-mask", "oracle-mask"],
                   default="predicted-mask")
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--out", required=True, help="edited-grids output (JSONL)")
    p.add_argument("--limit", type=int, help="only the first N records")
    p.add_argument("--trace", action="store_true",
                   help="include per-round sampler traces")
    p.set_defaults(fn=cmd_edit)

    p = sub.add_parser("eval", help="score a split and write a metric report")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["predicted-mask", "oracle-mask"],
                   default="oracle-mask")
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--report", required=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--figures", action="store_true",
                   help="render PNG figures beside the report")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run gradient checks and oracle suites")
    p.set_defaults(fn=cmd_verify)
    return parser


def _apply_thread_cap(n: int | None) -> None:
    if not n or n <= 0:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(n)
    except ImportError:
        pass


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _apply_thread_cap(getattr(args, "threads", None))
    try:
        return args.fn(args)
    except (ContractError, InputError, ShapeError, GenerationError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
