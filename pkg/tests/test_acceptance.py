"""End-to-end acceptance gates: gradient integrity, oracle equivalence,
sampler statistics, hard preservation, the desk-scale training experiment,
the loss-weight contract, determinism, and the frozen-text contract."""
import json
import time

import numpy as np
import pytest

from rgenie import verify
from rgenie.alignment import loss_weights
from rgenie.cli import main
from rgenie.config import make_config
from rgenie.evalmetrics import write_report
from rgenie.microworld import MicroworldConfig, build_codebook, generate_split
from rgenie.model import RGenie, evaluate
from rgenie.tokenization import Vocabulary


@pytest.fixture(scope="module")
def verification():
    t0 = time.time()
    results = verify.run_all(verbose=False)
    return {r.name: r for r in results}, time.time() - t0


class TestGradientIntegrity:
    """Every differentiable block matches central differences, rel err < 1e-4,
    and the whole verification suite stays under five minutes."""

    @pytest.mark.parametrize("name", ["grad.rab", "grad.hrm",
                                      "grad.denoiser_loss", "grad.alignment"])
    def test_block(self, verification, name):
        results, _ = verification
        assert results[name].ok, results[name].detail

    def test_runtime_under_five_minutes(self, verification):
        _, seconds = verification
        assert seconds < 300.0


class TestOracleEquivalence:
    @pytest.mark.parametrize("name", ["oracle.rab", "oracle.quantizer",
                                      "oracle.infonce", "oracle.recon_loss"])
    def test_suite(self, verification, name):
        results, _ = verification
        assert results[name].ok, results[name].detail


class TestDiffusionStatistics:
    def test_forward_mask_fraction_within_3_sigma(self, verification):
        results, _ = verification
        assert results["stats.forward_mask"].ok, results["stats.forward_mask"].detail

    def test_single_cell_posterior_within_3_sigma(self, verification):
        results, _ = verification
        assert results["stats.posterior"].ok, results["stats.posterior"].detail


class TestHardPreservation:
    def test_thousand_edits_zero_background_changes(self, verification):
        results, _ = verification
        assert results["sampler.hard_preservation"].ok, \
            results["sampler.hard_preservation"].detail

    def test_trained_model_background_loss_zero(self, desk_experiment):
        rows = [r for r in desk_experiment["report"].rows if not r["no_edit"]]
        assert rows, "evaluation produced no edits"
        assert all(r["l2_bg_pct"] == 0.0 for r in rows)


class TestEndToEndDeskExperiment:
    def test_training_within_time_budget(self, desk_experiment):
        assert desk_experiment["train_seconds"] <= 30 * 60

    def test_losses_finite(self, desk_experiment):
        for row in desk_experiment["history"]:
            assert np.isfinite(row["loss"])

    def test_atomic_accuracy_at_least_90(self, desk_experiment):
        agg = desk_experiment["report"].aggregate("atomic")
        assert agg["edit_accuracy_pct"] >= 90.0, agg

    def test_composite_accuracy_at_least_70(self, desk_experiment):
        agg = desk_experiment["report"].aggregate("composite")
        assert agg["edit_accuracy_pct"] >= 70.0, agg

    def test_reasoning_ablation_gap_at_least_10_points(self, desk_experiment):
        full = desk_experiment["report"].aggregate("composite")
        ablated = desk_experiment["ablated_report"].aggregate("composite")
        gap = full["edit_accuracy_pct"] - ablated["edit_accuracy_pct"]
        assert gap >= 10.0, (full["edit_accuracy_pct"],
                             ablated["edit_accuracy_pct"])


class TestLossWeightContract:
    def test_endpoints_exact(self):
        assert loss_weights(0.0) == (1.0, 0.0)
        assert loss_weights(1.0) == (0.0, 1.0)

    def test_half_gives_equal_weights(self):
        assert loss_weights(0.5) == (0.5, 0.5)

    def test_sum_to_one_for_100_random_values(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            l1, l2 = loss_weights(float(rng.random()))
            assert abs(l1 + l2 - 1.0) < 1e-15


class TestDeterminism:
    def test_dataset_files_identical(self, tmp_path):
        dirs = [tmp_path / "a", tmp_path / "b"]
        for d in dirs:
            assert main(["gen-data", "--data", str(d), "--seed", "7"]) == 0
        for name in ("train.jsonl", "val.jsonl", "codebook.ckpt", "vocab.txt"):
            assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()

    def test_checkpoint_hashes_and_reports_identical(self, tmp_path):
        """Two independent short trainings from the same seed must agree
        bit-for-bit, including the evaluation reports they produce."""
        cfg = make_config(overrides={
            "d_model": 32, "n_heads": 2, "n_layers": 1, "d_bridge": 16,
            "den_d_model": 32, "den_layers": 1, "txt_d_model": 16,
            "n_train": 16, "n_val": 6, "max_epochs": 2, "batch_size": 8,
            "sample_steps": 2, "seed": 7})
        mcfg = MicroworldConfig(grid_h=cfg.grid_h, grid_w=cfg.grid_w,
                                n_codes=cfg.n_codes,
                                min_objects=cfg.min_objects,
                                max_objects=cfg.max_objects)
        vocab = Vocabulary(n_codes=cfg.n_codes)
        codebook = build_codebook(cfg.seed, mcfg)
        train = generate_split(cfg.seed, cfg.n_train, False, mcfg, codebook,
                               vocab)
        val = generate_split(cfg.seed + 1, cfg.n_val, True, mcfg, codebook,
                             vocab, start_idx=cfg.n_train)
        digests, reports = [], []
        for run in range(2):
            model = RGenie(cfg, codebook)
            model.fit(train)
            digests.append(model.save(tmp_path / f"m{run}.ckpt"))
            report = evaluate(model, val, "oracle-mask", cfg.seed)
            path = tmp_path / f"r{run}.tsv"
            write_report(report, path)
            reports.append(path.read_bytes())
        assert digests[0] == digests[1]
        assert reports[0] == reports[1]


class TestFrozenTextContract:
    def test_hash_unchanged_after_full_training(self, desk_experiment):
        model = desk_experiment["model"]
        assert model.text.param_hash() == desk_experiment["text_hash_before"]
