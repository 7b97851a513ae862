"""Procedural image/report corpus and its on-disk format.

Layout of a corpus directory::

    manifest.jsonl        one JSON record per sample
    images/<id>.f32       raw little-endian float32, shape from the manifest
    corpus_meta.json      generating config and its hash

Every sample draws from its own stream, seeded by
``SeedSequence([master_seed, split_index, sample_index])``, so the output
does not depend on generation order.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .labels import fix_no_finding
from .vocab import BASE_CLASSES, DEFAULT_VOCAB, UNSEEN_CLASSES, ObservationVocabulary

SPLITS: tuple[str, ...] = ("pretrain", "base-train", "unseen-train", "unseen-test")
BACKGROUND = 0.2


class CorpusError(ValueError):
    pass


@dataclass
class CorpusConfig:
    counts: dict = field(default_factory=lambda: {
        "pretrain": 2000, "base-train": 450, "unseen-train": 200, "unseen-test": 250})
    image_size: int = 32
    # probability of drawing 0, 1, 2, 3 findings for a pretraining image (0 means No Finding)
    findings_per_image: list = field(default_factory=lambda: [0.1, 0.5, 0.25, 0.15])
    noise: float = 0.05
    negation_prob: float = 0.15
    ambiguity_prob: float = 0.03
    seed: int = 0

    def validate(self) -> None:
        if set(self.counts) != set(SPLITS):
            raise CorpusError(f"counts: expected keys {list(SPLITS)}, got {sorted(self.counts)}")
        for split, n in self.counts.items():
            if not isinstance(n, int) or n <= 0:
                raise CorpusError(f"counts.{split}: must be a positive integer, got {n!r}")
        if not isinstance(self.image_size, int) or self.image_size < 24 or self.image_size % 8:
            raise CorpusError(f"image_size: must be a multiple of 8 and >= 24, got {self.image_size!r}")
        p = np.asarray(self.findings_per_image, dtype=float)
        if p.shape != (4,) or (p < 0).any() or (p > 1).any() or abs(p.sum() - 1) > 1e-9:
            raise CorpusError("findings_per_image: need 4 probabilities (0..3 findings) summing to 1")
        if not self.noise >= 0:
            raise CorpusError(f"noise: must be >= 0, got {self.noise!r}")
        for name in ("negation_prob", "ambiguity_prob"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise CorpusError(f"{name}: must lie in [0, 1], got {v!r}")

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray
    report: str
    labels: np.ndarray
    class_id: int
    split: str


# ---------------------------------------------------------------- report text

POSITIVE_TEMPLATES = (
    "There is evidence of {s}.",
    "Findings are consistent with {s}.",
    "{S} is present on this study.",
    "Interval development of {s} is noted.",
    "Mild {s} is seen.",
)
NEGATED_TEMPLATES = (
    "There is no {s}.",
    "No {s}.",
    "The study is negative for {s}.",
    "No evidence of {s} is seen.",
    "The lungs are free of {s}.",
    "Without {s} on this exam.",
)
# negation after the mention; the labeler reads these as positive
AMBIGUOUS_TEMPLATES = ("{S} is not seen today.",)
MAX_NEGATIONS = 2
# short fillers fall below the sentence filter's length cut
FILLER = (
    "Stable.",
    "Unchanged from prior.",
    "Otherwise unremarkable.",
    "Comparison is made with the prior study.",
    "The osseous structures are intact.",
    "The visualized upper abdomen is unremarkable.",
    "Lung volumes are low.",
    "The patient is rotated.",
)
NORMAL = ("No acute cardiopulmonary process.", "The lungs are clear.")


def _fill(template: str, phrase: str) -> str:
    return template.format(s=phrase, S=phrase[0].upper() + phrase[1:])


def compose_report(positive: list[int], rng: np.random.Generator, cfg: CorpusConfig,
                   vocab: ObservationVocabulary = DEFAULT_VOCAB) -> str:
    sentences = []
    if positive:
        # all present findings share one sentence
        phrases = []
        for k in positive:
            syn = vocab.synonyms[vocab.names[k]]
            phrases.append(syn[rng.integers(len(syn))])
        joined = phrases[0] if len(phrases) == 1 else ", ".join(phrases[:-1]) + " and " + phrases[-1]
        sentences.append(_fill(POSITIVE_TEMPLATES[rng.integers(len(POSITIVE_TEMPLATES))], joined))
    else:
        sentences.append(NORMAL[rng.integers(len(NORMAL))])
    absent = [k for k in range(1, len(vocab)) if k not in positive]
    negated = [k for k in absent if rng.random() < cfg.negation_prob]
    rng.shuffle(negated)
    for k in negated[:MAX_NEGATIONS]:
        syn = vocab.synonyms[vocab.names[k]]
        phrase = syn[rng.integers(len(syn))]
        if rng.random() < cfg.ambiguity_prob:
            sentences.append(_fill(AMBIGUOUS_TEMPLATES[0], phrase))
        else:
            sentences.append(_fill(NEGATED_TEMPLATES[rng.integers(len(NEGATED_TEMPLATES))], phrase))
    sentences.append(FILLER[rng.integers(len(FILLER))])
    return " ".join(sentences)


# ---------------------------------------------------------------- images

def render(positive: list[int], rng: np.random.Generator, cfg: CorpusConfig,
           vocab: ObservationVocabulary = DEFAULT_VOCAB) -> np.ndarray:
    side = cfg.image_size
    img = np.full((side, side), BACKGROUND)
    for k in positive:
        motif = vocab.motifs[vocab.names[k]]
        rows, cols = motif.region(side)
        img[rows, cols] += motif.intensity * motif.mask
    img += rng.normal(0.0, cfg.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[:, :, None]


# ---------------------------------------------------------------- sampling

def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, SPLITS.index(split), index]))


def draw_findings(rng: np.random.Generator, cfg: CorpusConfig, n_obs: int = 14) -> list[int]:
    """Sorted observation indices (>= 1) for a pretraining image."""
    n = int(rng.choice(4, p=np.asarray(cfg.findings_per_image, dtype=float)))
    return sorted(int(k) for k in rng.choice(np.arange(1, n_obs), size=n, replace=False))


def split_classes(split: str, vocab: ObservationVocabulary = DEFAULT_VOCAB) -> tuple[str, ...]:
    if split == "base-train":
        return BASE_CLASSES
    if split in ("unseen-train", "unseen-test"):
        return UNSEEN_CLASSES
    return vocab.names


def make_sample(split: str, index: int, cfg: CorpusConfig,
                vocab: ObservationVocabulary = DEFAULT_VOCAB) -> SampleRecord:
    """Build one record.

    Pretraining images follow ``findings_per_image``; the classification
    splits are class-balanced (round robin over the split's classes) with a
    single finding each.
    """
    rng = sample_rng(cfg.seed, split, index)
    if split == "pretrain":
        positive = draw_findings(rng, cfg, len(vocab))
    else:
        classes = split_classes(split, vocab)
        k = vocab.index(classes[index % len(classes)])
        positive = [] if k == 0 else [k]
    labels = np.zeros(len(vocab), dtype=np.int8)
    labels[positive] = 1
    labels = fix_no_finding(labels)
    class_id = int(np.flatnonzero(labels)[0])
    image = render(positive, rng, cfg, vocab)
    report = compose_report(positive, rng, cfg, vocab)
    return SampleRecord(f"{split}-{index:05d}", image, report, labels, class_id, split)


def generate_corpus(cfg: CorpusConfig, out_dir: str | os.PathLike, config_hash: str | None = None) -> Path:
    cfg.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CorpusError(f"cannot create corpus directory {out}: {exc}") from exc
    lines = []
    for split in SPLITS:
        for i in range(cfg.counts[split]):
            rec = make_sample(split, i, cfg)
            rel = f"images/{rec.id}.f32"
            (out / rel).write_bytes(rec.image.astype("<f4").tobytes())
            lines.append(json.dumps({
                "id": rec.id, "image": rel, "shape": list(rec.image.shape), "report": rec.report,
                "labels": rec.labels.tolist(), "class_id": rec.class_id, "split": rec.split,
            }, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    meta = {"config": asdict(cfg), "config_hash": config_hash or cfg.hash()}
    (out / "corpus_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_corpus(corpus_dir: str | os.PathLike, splits: tuple[str, ...] | None = None) -> list[SampleRecord]:
    root = Path(corpus_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise CorpusError(f"no manifest at {manifest}")
    records = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        if splits is not None and r["split"] not in splits:
            continue
        shape = tuple(r["shape"])
        image = np.frombuffer((root / r["image"]).read_bytes(), dtype="<f4").astype(np.float32).reshape(shape)
        records.append(SampleRecord(r["id"], image, r["report"], np.asarray(r["labels"], dtype=np.int8),
                                    int(r["class_id"]), r["split"]))
    return records
