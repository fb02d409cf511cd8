"""Shared fixtures. The full end-to-end experiment (dataset build, full and
ablated training, evaluation) is expensive, so it runs once per session and
every acceptance test reads from it."""
from __future__ import annotations

import dataclasses
import time

import numpy as np
import pytest

from rgenie.config import make_config
from rgenie.microworld import MicroworldConfig, build_codebook, generate_split
from rgenie.model import RGenie, evaluate
from rgenie.tokenization import Vocabulary

# early-stop cap for the desk experiment; chosen so the run fits the half-hour
# single-core budget with margin
DESK_EPOCHS = 16


@pytest.fixture(scope="session")
def desk_experiment(tmp_path_factory):
    """Train the full desk model and the reasoning-ablated variant once."""
    out = tmp_path_factory.mktemp("desk")
    cfg = make_config(overrides={"max_epochs": DESK_EPOCHS})
    mcfg = MicroworldConfig(grid_h=cfg.grid_h, grid_w=cfg.grid_w,
                            n_codes=cfg.n_codes, min_objects=cfg.min_objects,
                            max_objects=cfg.max_objects)
    vocab = Vocabulary(n_codes=cfg.n_codes)
    codebook = build_codebook(cfg.seed, mcfg)
    train = generate_split(cfg.seed, cfg.n_train, False, mcfg, codebook, vocab)
    val = generate_split(cfg.seed + 1, cfg.n_val, True, mcfg, codebook, vocab,
                         start_idx=cfg.n_train)

    model = RGenie(cfg, codebook)
    text_hash_before = model.text.param_hash()
    t0 = time.time()
    history = model.fit(train)
    train_seconds = time.time() - t0
    model.save(out / "full.ckpt")

    ablated_cfg = dataclasses.replace(cfg, hrm=False, rab=False)
    ablated = RGenie(ablated_cfg, codebook)
    ablated.fit(train)
    ablated.save(out / "ablated.ckpt")

    report = evaluate(model, val, "oracle-mask", cfg.seed)
    ablated_report = evaluate(ablated, val, "oracle-mask", cfg.seed)
    return {
        "config": cfg, "microworld": mcfg, "codebook": codebook,
        "train": train, "val": val, "model": model, "ablated": ablated,
        "history": history, "train_seconds": train_seconds,
        "report": report, "ablated_report": ablated_report,
        "text_hash_before": text_hash_before, "out": out,
    }
