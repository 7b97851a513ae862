import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsprompt import grad as G
from wsprompt.corpus import CorpusConfig, extract_labels, gt_similarity, make_sample, sentence_filter
from wsprompt.encoders import EncoderConfig, Tokenizer, VisionLanguageModel
from wsprompt.grad import DomainError, Tensor
from wsprompt.pretrain import (
    EPS,
    PretrainConfig,
    PretrainError,
    predicted_similarity,
    pretrain_run,
    retrieval_top1,
    semantic_loss,
    sentence_pool,
    write_loss_csv,
)

from fd import numeric_grad, rel_error


# ---------------------------------------------------------------- scalar-loop oracles

def loop_cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb)


def loop_predicted(I, T, tau):
    n, m = len(I), len(T)
    s = [[loop_cosine(I[i], T[j]) for j in range(m)] for i in range(n)]
    rows = []
    for i in range(n):
        z = sum(math.exp(s[i][k] / tau) for k in range(m))
        rows.append([math.exp(s[i][j] / tau) / z for j in range(m)])
    cols = [[0.0] * m for _ in range(n)]
    for j in range(m):
        z = sum(math.exp(s[k][j] / tau) for k in range(n))
        for i in range(n):
            cols[i][j] = math.exp(s[i][j] / tau) / z
    return s, rows, cols


def loop_loss(p_it, p_ti, y_it, y_ti):
    n, m = len(y_it), len(y_it[0])
    a = sum(y_it[i][j] * math.log(max(p_it[i][j], EPS)) for i in range(n) for j in range(m)) / n
    b = sum(y_ti[i][j] * math.log(max(p_ti[i][j], EPS)) for i in range(n) for j in range(m)) / m
    return -0.5 * (a + b)


def random_labels(rng, n, k=14):
    lv = (rng.random((n, k)) < 0.25).astype(np.int8)
    lv[:, 0] = (lv[:, 1:].sum(axis=1) == 0)
    return lv


def loss_value(I, T, tau, y_it, y_ti):
    _, p_it, p_ti = predicted_similarity(Tensor(I), Tensor(T), Tensor(np.array([tau])))
    return float(semantic_loss((p_it, p_ti), (y_it, y_ti)).data)


def composed_case(rng):
    n, m, d = rng.integers(2, 6), rng.integers(2, 6), rng.integers(2, 5)
    I = rng.normal(size=(n, d))
    T = rng.normal(size=(m, d))
    tau = np.array([rng.uniform(0.3, 1.5)])
    _, y_it, y_ti = gt_similarity(random_labels(rng, n), random_labels(rng, m))
    return I, T, tau, y_it, y_ti


def composed_error(rng):
    I, T, tau, y_it, y_ti = composed_case(rng)
    ti, tt, tl = Tensor(I, requires_grad=True), Tensor(T, requires_grad=True), Tensor(tau, requires_grad=True)
    _, p_it, p_ti = predicted_similarity(ti, tt, tl)
    G.backward(semantic_loss((p_it, p_ti), (y_it, y_ti)))
    num = numeric_grad(lambda a, b, c: loss_value(a, b, c[0], y_it, y_ti), [I, T, tau])
    return max(rel_error(g, n) for g, n in zip((ti.grad, tt.grad, tl.grad), num))


class TestPredictedSimilarity:
    def test_identical_embeddings_give_uniform_rows(self):
        e = np.tile(np.array([[0.3, -1.0, 2.0]]), (4, 1))
        for tau in (0.01, 0.5, 3.0):
            _, rows, cols = predicted_similarity(Tensor(e), Tensor(e[:3]), tau)
            np.testing.assert_allclose(rows.data, 1 / 3, atol=1e-12)
            np.testing.assert_allclose(cols.data, 1 / 4, atol=1e-12)

    def test_small_tau_selects_dominant_cosine(self):
        I = np.array([[1.0, 0.0]])
        T = np.array([[1.0, 0.0], [np.cos(0.5), np.sin(0.5)]])  # cosine margin > 0.1
        _, rows, _ = predicted_similarity(Tensor(I), Tensor(T), 1e-3)
        assert rows.data[0, 0] > 0.99

    @pytest.mark.parametrize("tau", [0.0, -0.5])
    def test_nonpositive_tau(self, tau):
        with pytest.raises(DomainError):
            predicted_similarity(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))), tau)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        I, T = rng.normal(size=(rng.integers(1, 9), 4)), rng.normal(size=(rng.integers(1, 9), 4))
        tau = rng.uniform(0.05, 2.0)
        s, rows, cols = predicted_similarity(Tensor(I), Tensor(T), tau)
        ws, wr, wc = loop_predicted(I.tolist(), T.tolist(), tau)
        np.testing.assert_allclose(s.data, ws, atol=1e-9)
        np.testing.assert_allclose(rows.data, wr, atol=1e-9)
        np.testing.assert_allclose(cols.data, wc, atol=1e-9)


class TestSemanticLoss:
    def test_equals_target_entropy_when_prediction_matches(self):
        rng = np.random.default_rng(0)
        _, y_it, y_ti = gt_similarity(random_labels(rng, 6), random_labels(rng, 5))
        loss = float(semantic_loss((Tensor(y_it), Tensor(y_ti)), (y_it, y_ti)).data)
        h_it = -(y_it * np.log(y_it)).sum(axis=1).mean()
        h_ti = -(y_ti * np.log(y_ti)).sum(axis=0).mean()
        assert loss == pytest.approx(0.5 * (h_it + h_ti), abs=1e-6)

    @pytest.mark.parametrize("n", [2, 7, 32])
    def test_uniform_against_uniform_is_log_n(self, n):
        u = np.full((n, n), 1.0 / n)
        assert float(semantic_loss((Tensor(u), Tensor(u)), (u, u)).data) == pytest.approx(math.log(n), abs=1e-6)

    def test_gibbs_never_below_target_entropy(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n, m = rng.integers(2, 7, size=2)
            _, y_it, y_ti = gt_similarity(random_labels(rng, n), random_labels(rng, m))
            _, p_it, p_ti = predicted_similarity(Tensor(rng.normal(size=(n, 3))), Tensor(rng.normal(size=(m, 3))),
                                                 rng.uniform(0.05, 2.0))
            h = 0.5 * (-(y_it * np.log(y_it)).sum(axis=1).mean() - (y_ti * np.log(y_ti)).sum(axis=0).mean())
            assert float(semantic_loss((p_it, p_ti), (y_it, y_ti)).data) >= h - 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        I, T, tau, y_it, y_ti = composed_case(rng)
        _, wr, wc = loop_predicted(I.tolist(), T.tolist(), float(tau[0]))
        want = loop_loss(wr, wc, y_it.tolist(), y_ti.tolist())
        assert loss_value(I, T, float(tau[0]), y_it, y_ti) == pytest.approx(want, abs=1e-9)

    def test_targets_carry_no_temperature(self):
        rng = np.random.default_rng(2)
        s, y_it, y_ti = gt_similarity(random_labels(rng, 4), random_labels(rng, 3))
        e = np.exp(s)
        np.testing.assert_allclose(y_it, e / e.sum(axis=1, keepdims=True), atol=1e-15)
        np.testing.assert_allclose(y_ti, e / e.sum(axis=0, keepdims=True), atol=1e-15)

    def test_shape_mismatch(self):
        u = np.full((2, 3), 1 / 3)
        with pytest.raises(G.ShapeError):
            semantic_loss((Tensor(u), Tensor(u)), (u[:, :2], u))

    def test_composed_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        worst = max(composed_error(rng) for _ in range(100))
        assert worst < 1e-4

    def test_tau_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            I, T, tau, y_it, y_ti = composed_case(rng)
            log_tau = Tensor(np.log(tau), requires_grad=True)
            _, p_it, p_ti = predicted_similarity(Tensor(I), Tensor(T), G.exp(log_tau))
            G.backward(semantic_loss((p_it, p_ti), (y_it, y_ti)))
            num = numeric_grad(lambda lt: loss_value(I, T, float(np.exp(lt[0])), y_it, y_ti), [np.log(tau)])[0]
            assert rel_error(log_tau.grad, num) < 1e-5

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_loss_is_finite_and_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        I, T, tau, y_it, y_ti = composed_case(rng)
        v = loss_value(I * 50, T, float(tau[0]) / 100, y_it, y_ti)
        assert np.isfinite(v) and v >= 0


# ---------------------------------------------------------------- training loop

TINY = {"pretrain": 24, "base-train": 9, "unseen-train": 5, "unseen-test": 5}


def tiny_records(seed=0):
    cfg = CorpusConfig(counts=dict(TINY), image_size=24, seed=seed)
    return [make_sample("pretrain", i, cfg) for i in range(TINY["pretrain"])]


def tiny_model(records, seed=0):
    tok = Tokenizer.build([r.report for r in records])
    cfg = EncoderConfig(d_model=16, d=8, layers=1, heads=2, image_size=24, channels=[4, 4, 8])
    return VisionLanguageModel(cfg, tok, seed=seed)


def test_sentence_pool_inherits_report_labels():
    recs = tiny_records()
    sents, labels = sentence_pool(recs)
    i = 0
    for r in recs:
        for s in sentence_filter(r.report):
            assert sents[i] == s
            np.testing.assert_array_equal(labels[i], extract_labels(r.report))
            i += 1
    assert i == len(sents)


class TestPretrainRun:
    def cfg(self, **kw):
        base = dict(batch=8, epochs=2, lr=1e-3)
        base.update(kw)
        return PretrainConfig(**base)

    def test_deterministic_given_seed(self):
        recs = tiny_records()
        runs = []
        for _ in range(2):
            m = tiny_model(recs)
            res = pretrain_run(m, recs, self.cfg(), seed=5)
            runs.append((res.history, {k: v.data.copy() for k, v in m.named_parameters().items()}))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])

    def test_seed_changes_trajectory(self):
        recs = tiny_records()
        a = pretrain_run(tiny_model(recs), recs, self.cfg(), seed=0).history
        b = pretrain_run(tiny_model(recs), recs, self.cfg(), seed=1).history
        assert a != b

    def test_first_epoch_loss_near_log_batch(self):
        recs = tiny_records()
        res = pretrain_run(tiny_model(recs), recs, self.cfg(epochs=1), seed=0)
        assert abs(res.history[0]["loss"] - math.log(8)) <= 0.2 * math.log(8)

    def test_updates_all_encoder_tensors_and_keeps_tau_positive(self):
        recs = tiny_records()
        m = tiny_model(recs)
        before = {k: v.data.copy() for k, v in m.named_parameters().items()}
        res = pretrain_run(m, recs, self.cfg(), seed=0)
        changed = [k for k, v in m.named_parameters().items() if not np.array_equal(v.data, before[k])]
        # key biases receive an exactly zero gradient (softmax shift invariance)
        assert set(before) - set(changed) <= {k for k in before if k.endswith("attn.k.b")}
        assert all(row["tau"] > 0 for row in res.history)

    def test_loss_csv(self, tmp_path):
        recs = tiny_records()
        path = tmp_path / "loss.csv"
        res = pretrain_run(tiny_model(recs), recs, self.cfg(), seed=0, log_csv=path)
        rows = list(csv.DictReader(path.open()))
        assert list(rows[0]) == ["epoch", "step", "loss", "tau"]
        assert [int(r["epoch"]) for r in rows] == [0, 1]
        assert float(rows[-1]["loss"]) == pytest.approx(res.history[-1]["loss"], abs=1e-8)

    def test_too_few_images(self):
        recs = tiny_records()[:4]
        with pytest.raises(PretrainError, match="at least"):
            pretrain_run(tiny_model(recs), recs, self.cfg(), seed=0)

    @pytest.mark.parametrize("bad", [{"lr": 0.0}, {"batch": 1}, {"epochs": 0}, {"warmup": 1.5},
                                     {"weight_decay": -1.0}])
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            self.cfg(**bad).validate()

    def test_write_loss_csv_format(self, tmp_path):
        write_loss_csv([{"epoch": 0, "step": 3, "loss": 1.5, "tau": 0.07}], tmp_path / "l.csv")
        assert (tmp_path / "l.csv").read_text() == "epoch,step,loss,tau\n0,3,1.50000000,0.07000000\n"


class TestRetrieval:
    def test_bounds_and_determinism(self):
        recs = tiny_records()
        m = tiny_model(recs)
        a = retrieval_top1(m, recs, batch=8, seed=0)
        assert 0.0 <= a <= 1.0 and a == retrieval_top1(m, recs, batch=8, seed=0)

    def test_needs_a_full_batch(self):
        recs = tiny_records()
        with pytest.raises(ValueError):
            retrieval_top1(tiny_model(recs), recs[:5], batch=8)
