import numpy as np
import pytest

from rgenie.evalmetrics import (COLUMNS, MetricReport, ScorerClient,
                                composite_score, edit_accuracy,
                                l2_background_loss, mask_iou, read_report,
                                region_text_similarity, render_figures,
                                write_report)
from rgenie.tensor import ShapeError, Tensor
from rgenie.tokenization import Codebook, TokenGrid, Vocabulary


VOCAB = Vocabulary(n_codes=4)
CB = Codebook(np.arange(8.0).reshape(4, 2))


def grid(codes):
    return TokenGrid(VOCAB.visual_base + np.asarray(codes))


class TestEditAccuracy:
    def test_perfect_and_zero(self):
        a, b = grid([[0, 1], [2, 3]]), grid([[0, 1], [2, 3]])
        mask = np.array([[True, True], [False, False]])
        assert edit_accuracy(a, b, mask) == 100.0
        wrong = grid([[1, 0], [2, 3]])
        assert edit_accuracy(wrong, b, mask) == 0.0

    def test_half_right_on_four_cells(self):
        a = grid([[0, 1], [0, 0]])
        b = grid([[0, 1], [2, 3]])
        assert edit_accuracy(a, b, np.ones((2, 2), dtype=bool)) == 50.0

    def test_empty_mask_absent(self):
        a = grid([[0]])
        assert edit_accuracy(a, a, np.zeros((1, 1), dtype=bool)) is None

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            edit_accuracy(grid([[0]]), grid([[0, 1]]), np.ones((1, 1), bool))


class TestBackgroundLoss:
    def test_identical_grids_zero(self):
        g = grid([[0, 1], [2, 3]])
        mask = np.array([[True, False], [False, False]])
        assert l2_background_loss(g, g, mask, CB, VOCAB) == 0.0

    def test_hand_computed_two_by_two(self):
        src = grid([[0, 1], [2, 3]])
        edited = grid([[0, 1], [2, 0]])  # one background cell altered
        mask = np.array([[True, False], [False, False]])
        rng2 = (CB.vectors.max() - CB.vectors.min()) ** 2
        diffs = (CB.vectors[0] - CB.vectors[3]) ** 2  # the altered cell
        expected = 100.0 * (diffs.sum() / (3 * CB.dim)) / rng2
        got = l2_background_loss(edited, src, mask, CB, VOCAB)
        assert abs(got - expected) < 1e-12

    def test_full_mask_absent(self):
        g = grid([[0, 1]])
        assert l2_background_loss(g, g, np.ones((1, 2), bool), CB, VOCAB) is None


class _StubVision:
    """Returns fixed per-cell semantic vectors regardless of input."""

    def __init__(self, v_sem):
        self.v_sem = np.asarray(v_sem, dtype=np.float64)

    def __call__(self, feats):
        v = Tensor(self.v_sem[None])
        return v, v, v


class _StubText:
    def __init__(self, vec):
        self.vec = np.asarray(vec, dtype=np.float64)

    def __call__(self, ids):
        return Tensor(self.vec[None])


class TestRegionTextSimilarity:
    def test_aligned_is_100_orthogonal_is_50(self):
        sem = np.tile([1.0, 0.0], (4, 1))
        g = grid([[0, 1], [2, 3]])
        mask = np.array([[True, True], [False, False]])
        ids = np.array([7])
        assert abs(region_text_similarity(
            g, mask, ids, _StubVision(sem), _StubText([2.0, 0.0]),
            CB, VOCAB) - 100.0) < 1e-9
        assert abs(region_text_similarity(
            g, mask, ids, _StubVision(sem), _StubText([0.0, 3.0]),
            CB, VOCAB) - 50.0) < 1e-9

    def test_matches_hand_computed_cosines(self):
        rng = np.random.default_rng(0)
        for _ in range(3):
            sem = rng.normal(size=(4, 3))
            txt = rng.normal(size=3)
            mask = np.array([[True, False], [True, True]])
            pooled = sem.reshape(-1, 3)[mask.reshape(-1)].mean(axis=0)
            cos = pooled @ txt / (np.linalg.norm(pooled) * np.linalg.norm(txt))
            got = region_text_similarity(
                grid([[0, 1], [2, 3]]), mask, np.array([7]),
                _StubVision(sem), _StubText(txt), CB, VOCAB)
            assert abs(got - 50.0 * (1.0 + cos)) < 1e-10

    def test_invariant_to_positive_rescaling(self):
        rng = np.random.default_rng(1)
        sem = rng.normal(size=(4, 3))
        txt = rng.normal(size=3)
        mask = np.ones((2, 2), dtype=bool) ^ np.eye(2, dtype=bool)
        base = region_text_similarity(grid([[0, 1], [2, 3]]), mask,
                                      np.array([7]), _StubVision(sem),
                                      _StubText(txt), CB, VOCAB)
        scaled = region_text_similarity(grid([[0, 1], [2, 3]]), mask,
                                        np.array([7]), _StubVision(sem * 17.0),
                                        _StubText(txt * 0.01), CB, VOCAB)
        assert abs(base - scaled) < 1e-9

    def test_empty_mask_absent(self):
        assert region_text_similarity(
            grid([[0]]), np.zeros((1, 1), bool), np.array([7]),
            _StubVision(np.ones((1, 2))), _StubText([1.0, 0.0]),
            CB, VOCAB) is None


class TestCompositeScore:
    def test_equal_weight_mean(self):
        row = {"edit_accuracy_pct": 90.0, "l2_bg_pct": 0.0,
               "plausibility_pct": 50.0}
        assert abs(composite_score(row) - 80.0) < 1e-12

    def test_l2_clamped(self):
        row = {"edit_accuracy_pct": 0.0, "l2_bg_pct": 250.0,
               "plausibility_pct": 0.0}
        assert composite_score(row) == 0.0

    def test_absent_component_propagates(self):
        assert composite_score({"edit_accuracy_pct": 50.0,
                                "l2_bg_pct": None,
                                "plausibility_pct": 10.0}) is None


class TestScorerClient:
    def test_absent_transport_is_absent_metric(self):
        assert ScorerClient().score(b"grid") is None

    def test_failing_transport_never_raises(self):
        def boom(_):
            raise ConnectionError("no scorer here")
        assert ScorerClient(transport=boom, retries=2).score(b"grid") is None

    def test_working_transport(self):
        client = ScorerClient(transport=lambda b: len(b) / 2)
        assert client.score(b"abcd") == 2.0


def _example_report():
    report = MetricReport()
    for i, acc in enumerate((100.0, 50.0, None)):
        report.add({"idx": i, "kind": "atomic" if i < 2 else "composite",
                    "template": "atomic_recolor", "hops": 0, "no_edit": acc is None,
                    "mask_iou": 1.0, "clip_sim_pct": 75.0, "l2_bg_pct": 0.0,
                    "edit_accuracy_pct": acc, "nll_per_cell": 0.1,
                    "plausibility_pct": 90.0,
                    "composite_score": None if acc is None else acc})
    return report


class TestReport:
    def test_aggregate_skips_absent(self):
        agg = _example_report().aggregate("atomic")
        assert agg["n"] == 2
        assert agg["edit_accuracy_pct"] == 75.0

    def test_aggregate_recomputable_from_rows(self):
        report = _example_report()
        vals = [r["edit_accuracy_pct"] for r in report.rows
                if r["edit_accuracy_pct"] is not None]
        assert report.aggregate()["edit_accuracy_pct"] == sum(vals) / len(vals)

    def test_write_read_roundtrip(self, tmp_path):
        report = _example_report()
        path = tmp_path / "report.tsv"
        write_report(report, path)
        lines = path.read_text().splitlines()
        assert lines[0].split("\t") == list(COLUMNS)
        back = read_report(path)
        assert len(back.rows) == 3
        assert back.aggregate()["edit_accuracy_pct"] == \
            report.aggregate()["edit_accuracy_pct"]
        assert back.rows[2]["edit_accuracy_pct"] is None

    def test_unknown_field_rejected(self):
        report = MetricReport()
        with pytest.raises(Exception):
            report.add({"idx": 0, "surprise": 1})

    def test_figures_written(self, tmp_path):
        history = [{"epoch": 0, "loss": 2.0, "lm": 1.0, "recon": 0.5, "con": 0.5},
                   {"epoch": 1, "loss": 1.0, "lm": 0.5, "recon": 0.25, "con": 0.25}]
        paths = render_figures(_example_report(), tmp_path, history)
        assert len(paths) == 3
        for p in paths:
            assert p.exists() and p.stat().st_size > 0


def test_mask_iou():
    a = np.array([[True, False], [True, True]])
    b = np.array([[True, True], [False, True]])
    assert abs(mask_iou(a, b) - 2 / 4) < 1e-12
    assert mask_iou(np.zeros((2, 2), bool), np.zeros((2, 2), bool)) == 1.0
