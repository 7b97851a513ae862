import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsprompt.corpus import BASE_CLASSES, UNSEEN_CLASSES
from wsprompt.evalharness import (
    CSV_HEADER,
    GRID,
    MissingClassWarning,
    ProtocolError,
    ablation_csv,
    ablation_table,
    compute_metrics,
    evaluate,
    metrics_csv,
    monotone_steps,
    one_vs_rest_auc,
    parse_protocol,
    run_grid,
    run_protocol,
    seeds_where_at_least,
    summarize,
    write_metrics,
)
from wsprompt.promptgen import TrainableMask, prompt_train, zero_shot_setup

from test_promptgen import fake_records, small_prompt_cfg, tiny_model

UNSEEN = list(UNSEEN_CLASSES)


def pairwise_auc(scores, positive):
    """Brute-force probability that a positive outranks a negative, ties counted half."""
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    total = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return total / (len(pos) * len(neg))


def one_hot_probs(pred, k):
    p = np.full((len(pred), k), 0.01)
    p[np.arange(len(pred)), pred] = 0.9
    return p


class TestProtocolParsing:
    @pytest.mark.parametrize("text,want", [("zero", ("zero", 0)), ("full", ("full", None)),
                                           ("few:1", ("few", 1)), ("few:16", ("few", 16))])
    def test_valid(self, text, want):
        assert parse_protocol(text) == want

    @pytest.mark.parametrize("text", ["few:3", "few:0", "few:32", "few:x"])
    def test_invalid_shot_names_valid_set(self, text):
        with pytest.raises(ProtocolError, match=r"\{1, 2, 4, 8, 16\}"):
            parse_protocol(text)

    def test_unknown(self):
        with pytest.raises(ProtocolError, match="unknown protocol"):
            parse_protocol("half")


class TestMetrics:
    def test_all_correct(self):
        y = np.repeat(np.arange(5), 4)
        r = compute_metrics(y, one_hot_probs(y, 5), UNSEEN)
        assert r.accuracy == 1.0
        np.testing.assert_array_equal(r.confusion, np.diag([4] * 5))
        np.testing.assert_array_equal(r.precision, 1.0)
        np.testing.assert_array_equal(r.specificity, 1.0)
        assert r.macro_auc == 1.0

    def test_random_classifier_near_chance(self):
        rng = np.random.default_rng(0)
        y = np.repeat(np.arange(5), 200)
        r = compute_metrics(y, rng.random((1000, 5)), UNSEEN)
        assert abs(r.accuracy - 0.2) <= 0.04
        assert abs(r.macro_auc - 0.5) < 0.05

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_rates_consistent_with_confusion(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 4, size=60)
        y[:4] = np.arange(4)
        r = compute_metrics(y, rng.random((60, 4)), UNSEEN[:4])
        c = r.confusion
        assert c.sum() == 60
        np.testing.assert_array_equal(c.sum(axis=1), np.bincount(y, minlength=4))
        assert r.accuracy == pytest.approx(np.trace(c) / 60, abs=1e-12)
        np.testing.assert_allclose(r.recall, np.diag(c) / c.sum(axis=1), atol=1e-9)
        for j in range(4):
            tn = c.sum() - c[j].sum() - c[:, j].sum() + c[j, j]
            assert r.specificity[j] == pytest.approx(tn / (c.sum() - c[j].sum()), abs=1e-9)
        for arr in (r.precision, r.recall, r.specificity, r.f1, r.auc):
            assert ((arr >= 0) & (arr <= 1)).all()

    def test_missing_class_is_nan_with_warning(self):
        y = np.array([0, 0, 1, 1, 3, 3])
        with pytest.warns(MissingClassWarning):
            r = compute_metrics(y, one_hot_probs(y, 4), UNSEEN[:4])
        assert r.missing == [UNSEEN[2]] and r.warning
        for arr in (r.precision, r.recall, r.specificity, r.f1, r.auc):
            assert np.isnan(arr[2]) and np.isfinite(np.delete(arr, 2)).all()
        assert r.accuracy == 1.0 and r.macro_auc == 1.0

    def test_never_predicted_class_has_zero_precision(self):
        y = np.array([0, 1, 1])
        r = compute_metrics(y, one_hot_probs(np.array([0, 0, 0]), 2), UNSEEN[:2])
        assert r.precision[1] == 0.0 and r.f1[1] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            compute_metrics(np.zeros(3, dtype=int), np.zeros((3, 2)), UNSEEN)


class TestAuc:
    def test_perfect_separator(self):
        assert one_vs_rest_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert one_vs_rest_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_all_tied_is_half(self):
        assert one_vs_rest_auc([0.5] * 6, [1, 0, 1, 0, 0, 0]) == 0.5

    def test_single_sided_is_nan(self):
        assert np.isnan(one_vs_rest_auc([0.1, 0.2], [1, 1]))

    def test_label_independent_scores_near_half(self):
        rng = np.random.default_rng(1)
        assert abs(one_vs_rest_auc(rng.random(4000), rng.random(4000) < 0.3) - 0.5) < 0.03

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=30))
    def test_matches_pairwise_oracle_with_ties(self, pairs):
        scores = [float(s) for s, _ in pairs]
        pos = [p for _, p in pairs]
        if all(pos) or not any(pos):
            return
        assert one_vs_rest_auc(scores, pos) == pytest.approx(pairwise_auc(scores, pos), abs=1e-12)


def fake_report(protocol, seed, acc_idx, k=5):
    rng = np.random.default_rng(seed * 31 + acc_idx)
    y = np.repeat(np.arange(k), 4)
    pred = np.where(rng.random(len(y)) < acc_idx / 7, y, (y + 1) % k)
    return compute_metrics(y, one_hot_probs(pred, k), UNSEEN[:k], protocol, seed)


class TestOutput:
    def grid_reports(self):
        return [fake_report(p, s, i) for i, p in enumerate(GRID) for s in (0, 1, 2)]

    def test_grid_cardinality(self):
        reports = self.grid_reports()
        rows = list(csv.reader(io.StringIO(metrics_csv(reports))))
        assert tuple(rows[0]) == CSV_HEADER
        body = rows[1:]
        assert len({(r[0], r[1]) for r in body if r[1] != "median"}) == 21
        medians = [r for r in body if r[1] == "median"]
        assert [r[0] for r in medians] == list(GRID)
        assert len(body) == 21 * 6 + 7

    def test_seconds_blank_unless_requested(self):
        reports = self.grid_reports()
        assert all(r[-1] == "" for r in csv.reader(io.StringIO(metrics_csv(reports))) if r[0] != "protocol")
        timed = list(csv.reader(io.StringIO(metrics_csv(reports, with_seconds=True))))
        assert timed[1][-1] != ""

    def test_summary_is_median_over_seeds(self):
        reports = self.grid_reports()
        s = summarize(reports)
        for row in s:
            accs = [r.accuracy for r in reports if r.protocol == row.protocol]
            assert row.accuracy == np.median(accs)
            assert row.seeds == [0, 1, 2]

    def test_monotone_steps(self):
        s = summarize(self.grid_reports())
        assert 0 <= monotone_steps(s) <= 6

    def test_write_metrics(self, tmp_path):
        reports = self.grid_reports()
        c, j = write_metrics(reports, tmp_path, "run-x", "abc123")
        assert c.name == "run-x.csv" and c.parent.name == "metrics"
        data = json.loads(j.read_text())
        assert data["config_hash"] == "abc123" and data["reports"] == 21
        assert len(data["summary"]) == 7
        c2, _ = write_metrics(reports, tmp_path, "run-y", "abc123")
        assert c.read_bytes() == c2.read_bytes()

    def test_nan_serialised_literally(self):
        y = np.array([0, 0, 1])
        with pytest.warns(MissingClassWarning):
            r = compute_metrics(y, one_hot_probs(y, 3), UNSEEN[:3])
        assert ",nan," in metrics_csv([r])


class TestAblation:
    def test_table_shape_and_comparison(self):
        by_mask = {m: [fake_report(p, s, i + (m == "all")) for i, p in enumerate(GRID) for s in (0, 1, 2)]
                   for m in ("class", "context", "metanet", "all")}
        rows = ablation_table(by_mask)
        assert [r["mask"] for r in rows] == ["class", "context", "metanet", "all"]
        assert all(set(GRID) <= set(r) for r in rows)
        lines = ablation_csv(rows).strip().split("\n")
        assert len(lines) == 5 and lines[0].startswith("mask,zero")
        wins, total = seeds_where_at_least(rows, "all", "class")
        assert total == 3 and 0 <= wins <= 3

    def test_missing_cells_still_emitted(self):
        rows = ablation_table({"class": [fake_report("zero", 0, 3)]})
        assert np.isnan(rows[0]["full"])
        assert "nan" in ablation_csv(rows)


@pytest.fixture(scope="module")
def setup():
    model = tiny_model()
    cfg = small_prompt_cfg(epochs=4)
    gens = {s: prompt_train(model, fake_records(list(BASE_CLASSES), 3, seed=s), cfg, seed=s).generator
            for s in (0, 1)}
    return model, cfg, gens, fake_records(UNSEEN, 16, seed=7), fake_records(UNSEEN, 4, seed=8)


class TestEndToEnd:
    def test_evaluate(self, setup):
        model, cfg, gens, train, test = setup
        r = evaluate(model, zero_shot_setup(model, gens[0]), test)
        assert r.confusion.sum() == len(test)

    def test_grid_deterministic(self, setup):
        model, cfg, gens, train, test = setup
        a = run_grid(model, gens, [0, 1], train, test, cfg, protocols=("zero", "few:2", "full"))
        b = run_grid(model, gens, [0, 1], train, test, cfg, protocols=("zero", "few:2", "full"))
        assert len(a) == 6
        assert metrics_csv(a) == metrics_csv(b)
        few = [r for r in a if r.protocol == "few:2"]
        assert all(len(r.shot_ids) == 2 * len(UNSEEN) for r in few)
        assert few[0].shot_ids != few[1].shot_ids
        assert all(r.shot_ids == [] for r in a if r.protocol != "few:2")

    def test_missing_generator(self, setup):
        model, cfg, gens, train, test = setup
        with pytest.raises(ProtocolError, match="seed 5"):
            run_protocol(model, gens, "zero", [5], train, test, cfg)

    def test_empty_split(self, setup):
        model, cfg, gens, train, test = setup
        with pytest.raises(ProtocolError):
            evaluate(model, gens[0], [])

    def test_full_respects_mask(self, setup):
        model, cfg, gens, train, test = setup
        (r,) = run_protocol(model, gens, "full", [0], train, test, cfg, mask=TrainableMask.from_name("class"))
        assert r.mask == "class"
