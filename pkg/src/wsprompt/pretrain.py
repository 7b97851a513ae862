"""Decoupled image/sentence semantic-matching pretraining."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grad as G
from .corpus import SampleRecord, augment, extract_labels, gt_similarity, sentence_filter
from .encoders import VisionLanguageModel
from .grad import DomainError, OptimizerState, Tensor

log = logging.getLogger(__name__)

EPS = 1e-12


class PretrainError(RuntimeError):
    pass


@dataclass
class PretrainConfig:
    lr: float = 5e-4
    warmup: float = 0.1
    weight_decay: float = 1e-4
    batch: int = 64
    epochs: int = 10
    augment: bool = True
    min_sentence_tokens: int = 4

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"pretrain.lr: must be positive, got {self.lr!r}")
        if not 0 <= self.warmup <= 1:
            raise ValueError(f"pretrain.warmup: must lie in [0, 1], got {self.warmup!r}")
        if not self.weight_decay >= 0:
            raise ValueError(f"pretrain.weight_decay: must be >= 0, got {self.weight_decay!r}")
        for name in ("batch", "epochs", "min_sentence_tokens"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < (2 if name == "batch" else 1):
                raise ValueError(f"pretrain.{name}: invalid value {v!r}")


def predicted_similarity(image_emb: Tensor, text_emb: Tensor, tau) -> tuple[Tensor, Tensor, Tensor]:
    """Cosine matrix (images × texts) and its temperature-scaled row/column softmaxes."""
    tau_t = tau if isinstance(tau, Tensor) else Tensor(np.asarray([tau], dtype=image_emb.dtype))
    if np.any(tau_t.data <= 0):
        raise DomainError("predicted_similarity", "temperature must be positive")
    s_hat = G.cosine_matrix(image_emb, text_emb)
    return s_hat, G.softmax(s_hat, axis=1, temperature=tau_t), G.softmax(s_hat, axis=0, temperature=tau_t)


def semantic_loss(pred: tuple[Tensor, Tensor], target: tuple[np.ndarray, np.ndarray]) -> Tensor:
    """Symmetric soft cross-entropy between predicted and label-similarity distributions.

    ``pred``/``target`` are (image→text, text→image) pairs of (n_images, n_texts)
    matrices; the first is row-normalised, the second column-normalised.
    """
    p_it, p_ti = pred
    y_it, y_ti = (np.asarray(t, dtype=p_it.dtype) for t in target)
    if p_it.shape != y_it.shape or p_ti.shape != y_ti.shape:
        raise G.ShapeError("semantic_loss", p_it.shape, y_it.shape, p_ti.shape, y_ti.shape)
    n_img, n_txt = y_it.shape
    img2txt = G.sum(G.mul(Tensor(y_it), G.log(p_it, floor=EPS)))
    txt2img = G.sum(G.mul(Tensor(y_ti), G.log(p_ti, floor=EPS)))
    return G.scale(G.add(G.scale(img2txt, 1.0 / n_img), G.scale(txt2img, 1.0 / n_txt)), -0.5)


def sentence_pool(records: list[SampleRecord], min_tokens: int = 4) -> tuple[list[str], np.ndarray]:
    """Filtered report sentences, each carrying its report's extracted labels."""
    sentences, labels = [], []
    for r in records:
        lv = extract_labels(r.report)
        for s in sentence_filter(r.report, min_tokens):
            sentences.append(s)
            labels.append(lv)
    return sentences, np.asarray(labels, dtype=np.int8)


class _Cycler:
    """Endless stream of index batches, reshuffled whenever a pass is exhausted."""

    def __init__(self, n: int, batch: int):
        self.n, self.batch = n, batch
        self.order = np.arange(n)
        self.cursor = n

    def next(self, rng: np.random.Generator) -> np.ndarray:
        if self.cursor + self.batch > self.n:
            self.order = rng.permutation(self.n)
            self.cursor = 0
        out = self.order[self.cursor:self.cursor + self.batch]
        self.cursor += self.batch
        return out


@dataclass
class PretrainResult:
    model: VisionLanguageModel
    history: list[dict] = field(default_factory=list)


def pretrain_run(model: VisionLanguageModel, records: list[SampleRecord], cfg: PretrainConfig, seed: int = 0,
                 log_csv: str | Path | None = None) -> PretrainResult:
    """Train both encoders and the temperature on decoupled batches.

    Images and sentences are shuffled independently each epoch; a step pairs
    ``batch`` images with ``batch`` sentences and matches their label-cosine
    targets.
    """
    cfg.validate()
    if len(records) < cfg.batch:
        raise PretrainError(f"need at least {cfg.batch} pretraining images, got {len(records)}")
    images = np.stack([r.image for r in records])
    image_labels = np.stack([extract_labels(r.report) for r in records])
    sentences, sentence_labels = sentence_pool(records, cfg.min_sentence_tokens)
    if len(sentences) < cfg.batch:
        raise PretrainError("too few sentences survive filtering")
    sentence_ids = model.tokenizer.encode_batch(sentences)

    # one epoch sweeps the larger of the two independently shuffled pools
    steps_per_epoch = max(len(records), len(sentences)) // cfg.batch
    model.unfreeze()
    params = model.named_parameters()
    opt = OptimizerState(lr=cfg.lr, total_steps=steps_per_epoch * cfg.epochs, weight_decay=cfg.weight_decay,
                         warmup_fraction=cfg.warmup)
    result = PretrainResult(model)
    img_stream = _Cycler(len(records), cfg.batch)
    sent_stream = _Cycler(len(sentences), cfg.batch)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
        losses = []
        for step in range(steps_per_epoch):
            idx = img_stream.next(rng)
            sidx = sent_stream.next(rng)
            batch_images = images[idx]
            if cfg.augment:
                batch_images = np.stack([augment(im, np.random.SeedSequence([seed, opt.step, int(i)]))
                                         for im, i in zip(batch_images, idx)])
            _, y_it, y_ti = gt_similarity(image_labels[idx], sentence_labels[sidx])
            img_e = model.image(batch_images)
            txt_e = model.text(sentence_ids[sidx])
            _, p_it, p_ti = predicted_similarity(img_e, txt_e, model.tau)
            loss = semantic_loss((p_it, p_ti), (y_it, y_ti))
            value = float(loss.data)
            if not math.isfinite(value):
                raise PretrainError(f"non-finite loss at epoch {epoch} step {step}")
            G.backward(loss)
            G.step_params(params, opt)
            losses.append(value)
        row = {"epoch": epoch, "step": opt.step, "loss": float(np.mean(losses)),
               "tau": float(np.exp(model.log_tau.data[0]))}
        result.history.append(row)
        log.info("pretrain epoch %d loss %.4f tau %.4f", epoch, row["loss"], row["tau"])
    if log_csv is not None:
        write_loss_csv(result.history, log_csv)
    return result


def write_loss_csv(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "step", "loss", "tau"], lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({"epoch": row["epoch"], "step": row["step"], "loss": f"{row['loss']:.8f}",
                        "tau": f"{row['tau']:.8f}"})


def report_embeddings(model: VisionLanguageModel, records: list[SampleRecord], min_tokens: int = 4) -> np.ndarray:
    """Unit-norm mean of each report's unit-norm filtered-sentence embeddings.

    Sentences are the unit the text encoder is trained on, so a report is
    represented by its sentences rather than as one long sequence.
    """
    out = []
    with G.no_grad():
        for r in records:
            sents = sentence_filter(r.report, min_tokens) or [r.report]
            e = model.encode_texts(sents).data.astype(np.float64)
            e /= np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)
            m = e.mean(axis=0)
            out.append(m / max(np.linalg.norm(m), 1e-12))
    return np.stack(out)


def retrieval_top1(model: VisionLanguageModel, records: list[SampleRecord], batch: int = 32, seed: int = 0) -> float:
    """Image-to-report top-1 accuracy within shuffled batches of ``batch`` pairs (chance 1/batch)."""
    if len(records) < batch:
        raise ValueError(f"need at least {batch} records for batched retrieval, got {len(records)}")
    order = np.random.default_rng(seed).permutation(len(records))
    with G.no_grad():
        img = model.image(np.stack([r.image for r in records])).data.astype(np.float64)
    img /= np.maximum(np.linalg.norm(img, axis=1, keepdims=True), 1e-12)
    txt = report_embeddings(model, records)
    hits = total = 0
    for start in range(0, len(order) - batch + 1, batch):
        idx = order[start:start + batch]
        sim = img[idx] @ txt[idx].T
        hits += int((sim.argmax(axis=1) == np.arange(batch)).sum())
        total += batch
    return hits / total
