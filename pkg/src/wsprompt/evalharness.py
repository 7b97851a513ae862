"""Zero-, few- and full-shot protocols and their classification metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .corpus import OBSERVATIONS, UNSEEN_CLASSES, SampleRecord
from .encoders import VisionLanguageModel
from .promptgen import (
    SHOT_CHOICES,
    PromptConfig,
    PromptGenerator,
    TrainableMask,
    classify,
    fewshot_finetune,
    fullshot_train,
    zero_shot_setup,
)

log = logging.getLogger(__name__)

GRID = ("zero", "few:1", "few:2", "few:4", "few:8", "few:16", "full")
CSV_HEADER = ("protocol", "seed", "shots", "class", "precision", "recall", "specificity", "f1", "accuracy",
              "auc", "seconds")
MACRO = "macro"


class ProtocolError(ValueError):
    pass


class MissingClassWarning(UserWarning):
    pass


def parse_protocol(text: str) -> tuple[str, int | None]:
    """``zero`` -> ("zero", 0); ``few:<n>`` -> ("few", n); ``full`` -> ("full", None)."""
    if text == "zero":
        return "zero", 0
    if text == "full":
        return "full", None
    if text.startswith("few:"):
        raw = text[4:]
        try:
            n = int(raw)
        except ValueError:
            n = None
        if n not in SHOT_CHOICES:
            raise ProtocolError(f"few-shot count {raw!r} not in the valid set {{1, 2, 4, 8, 16}}")
        return "few", n
    raise ProtocolError(f"unknown protocol {text!r}; expected zero, few:<n> or full")


def shots_label(protocol: str) -> str:
    kind, n = parse_protocol(protocol)
    return "full" if kind == "full" else str(n)


@dataclass
class MetricsReport:
    protocol: str
    seed: int
    classes: list[str]
    confusion: np.ndarray  # rows: true class, columns: predicted class
    precision: np.ndarray
    recall: np.ndarray
    specificity: np.ndarray
    f1: np.ndarray
    auc: np.ndarray
    accuracy: float
    macro_auc: float
    seconds: float = 0.0
    mask: str = "all"
    missing: list[str] = field(default_factory=list)
    shot_ids: list[str] = field(default_factory=list)  # few-shot training samples actually drawn

    @property
    def shots(self) -> str:
        return shots_label(self.protocol)

    @property
    def warning(self) -> bool:
        return bool(self.missing)

    def macro(self, name: str) -> float:
        v = getattr(self, name)
        return float(np.nanmean(v)) if np.isfinite(v).any() else float("nan")

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol, "seed": self.seed, "shots": self.shots, "mask": self.mask,
            "classes": list(self.classes), "confusion": self.confusion.tolist(),
            "precision": _jsonable(self.precision), "recall": _jsonable(self.recall),
            "specificity": _jsonable(self.specificity), "f1": _jsonable(self.f1), "auc": _jsonable(self.auc),
            "accuracy": self.accuracy, "macro_auc": _none_if_nan(self.macro_auc), "missing": list(self.missing),
            "shot_ids": list(self.shot_ids),
        }


def _none_if_nan(x: float):
    return None if not np.isfinite(x) else float(x)


def _jsonable(v: np.ndarray) -> list:
    return [_none_if_nan(x) for x in v]


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # 0/0 counts as 0 for a present class (e.g. never predicted)
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def one_vs_rest_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney rank statistic with midranks; NaN when either side is empty."""
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def compute_metrics(y_true: np.ndarray, probs: np.ndarray, classes: Sequence[str], protocol: str = "zero",
                    seed: int = 0, seconds: float = 0.0, mask: str = "all") -> MetricsReport:
    y_true = np.asarray(y_true)
    probs = np.asarray(probs, dtype=np.float64)
    k = len(classes)
    if probs.ndim != 2 or probs.shape != (len(y_true), k) or len(y_true) == 0:
        raise ValueError(f"need probs of shape (n>0, {k}) matching y_true, got {probs.shape}")
    pred = probs.argmax(axis=1)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (y_true, pred), 1)
    tp = np.diag(conf).astype(np.float64)
    support = conf.sum(axis=1).astype(np.float64)
    predicted = conf.sum(axis=0).astype(np.float64)
    n = float(conf.sum())
    fp, fn = predicted - tp, support - tp
    tn = n - tp - fp - fn
    precision = _ratio(tp, predicted)
    recall = _ratio(tp, support)
    specificity = _ratio(tn, tn + fp)
    f1 = _ratio(2 * precision * recall, precision + recall)
    auc = np.array([one_vs_rest_auc(probs[:, j], y_true == j) for j in range(k)])
    present = support > 0
    missing = [c for c, p in zip(classes, present) if not p]
    for arr in (precision, recall, specificity, f1, auc):
        arr[~present] = np.nan
    if missing:
        warnings.warn(f"classes absent from the test split: {missing}", MissingClassWarning, stacklevel=2)
    macro_auc = float(np.nanmean(auc)) if np.isfinite(auc).any() else float("nan")
    return MetricsReport(protocol, seed, list(classes), conf, precision, recall, specificity, f1, auc,
                         float(np.trace(conf) / n), macro_auc, seconds, mask, missing)


def labels_for(records: Sequence[SampleRecord], classes: Sequence[str]) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([index[OBSERVATIONS[r.class_id]] for r in records])
    except KeyError as exc:
        raise ProtocolError(f"test sample of class {exc.args[0]!r} outside the evaluated class set") from exc


def evaluate(model: VisionLanguageModel, gen: PromptGenerator, records: Sequence[SampleRecord],
             classes: Sequence[str] = UNSEEN_CLASSES, protocol: str = "zero", seed: int = 0,
             mask: str = "all") -> MetricsReport:
    """Classify every sample of ``records`` and aggregate the metrics."""
    if not records:
        raise ProtocolError("empty evaluation split")
    start = time.perf_counter()
    y = labels_for(records, classes)
    probs = classify(model, gen, np.stack([r.image for r in records]), list(classes))
    return compute_metrics(y, probs, classes, protocol, seed, time.perf_counter() - start, mask)


def run_protocol(model: VisionLanguageModel, generators: Mapping[int, PromptGenerator], protocol: str,
                 seeds: Sequence[int], train: Sequence[SampleRecord], test: Sequence[SampleRecord],
                 cfg: PromptConfig, classes: Sequence[str] = UNSEEN_CLASSES,
                 mask: TrainableMask = TrainableMask()) -> list[MetricsReport]:
    """One report per seed; ``generators[seed]`` is the base-trained generator for that seed."""
    kind, shots = parse_protocol(protocol)
    reports = []
    for seed in seeds:
        if seed not in generators:
            raise ProtocolError(f"no trained prompt generator for seed {seed}")
        start = time.perf_counter()
        gen = zero_shot_setup(model, generators[seed], list(classes))
        picked = []
        if kind == "few":
            gen, picked, _ = fewshot_finetune(model, gen, list(train), shots, cfg, list(classes), seed=seed)
        elif kind == "full":
            gen, _ = fullshot_train(model, gen, list(train), cfg, mask, list(classes), seed=seed)
        rep = evaluate(model, gen, test, classes, protocol, seed, mask.name)
        rep.seconds = time.perf_counter() - start
        rep.shot_ids = [r.id for r in picked]
        log.info("%s %s seed %d accuracy %.4f auc %.4f", mask.name, protocol, seed, rep.accuracy, rep.macro_auc)
        reports.append(rep)
    return reports


def run_grid(model, generators, seeds, train, test, cfg, protocols: Sequence[str] = GRID,
             classes: Sequence[str] = UNSEEN_CLASSES, mask: TrainableMask = TrainableMask()) -> list[MetricsReport]:
    out = []
    for p in protocols:
        out.extend(run_protocol(model, generators, p, seeds, train, test, cfg, classes, mask))
    return out


# ---------------------------------------------------------------- aggregation and output

@dataclass
class SummaryRow:
    protocol: str
    precision: float
    recall: float
    specificity: float
    f1: float
    accuracy: float
    auc: float
    seeds: list[int]


def summarize(reports: Sequence[MetricsReport]) -> list[SummaryRow]:
    """Median over seeds of each protocol's macro metrics, in first-seen protocol order."""
    order: list[str] = []
    for r in reports:
        if r.protocol not in order:
            order.append(r.protocol)
    rows = []
    for p in order:
        group = [r for r in reports if r.protocol == p]
        med = lambda vals: float(np.median(vals)) if vals else float("nan")  # noqa: E731
        rows.append(SummaryRow(
            p, *(med([r.macro(m) for r in group]) for m in ("precision", "recall", "specificity", "f1")),
            med([r.accuracy for r in group]), med([r.macro_auc for r in group]), [r.seed for r in group]))
    return rows


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.6f}"


def metrics_csv(reports: Sequence[MetricsReport], with_seconds: bool = False) -> str:
    """Per-class rows and a macro row for each report, then one median row per protocol.

    ``seconds`` is left blank unless ``with_seconds``, so identical runs are byte-identical.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        secs = f"{r.seconds:.3f}" if with_seconds else ""
        acc = _fmt(r.accuracy)
        for j, c in enumerate(r.classes):
            w.writerow([r.protocol, r.seed, r.shots, c, _fmt(r.precision[j]), _fmt(r.recall[j]),
                        _fmt(r.specificity[j]), _fmt(r.f1[j]), acc, _fmt(r.auc[j]), secs])
        w.writerow([r.protocol, r.seed, r.shots, MACRO, _fmt(r.macro("precision")), _fmt(r.macro("recall")),
                    _fmt(r.macro("specificity")), _fmt(r.macro("f1")), acc, _fmt(r.macro_auc), secs])
    for s in summarize(reports):
        w.writerow([s.protocol, "median", shots_label(s.protocol), MACRO, _fmt(s.precision), _fmt(s.recall),
                    _fmt(s.specificity), _fmt(s.f1), _fmt(s.accuracy), _fmt(s.auc), ""])
    return buf.getvalue()


def write_metrics(reports: Sequence[MetricsReport], out_dir: str | Path, run_id: str, config_hash: str,
                  with_seconds: bool = False, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``metrics/<run-id>.csv`` and the ``.json`` summary under ``out_dir``."""
    mdir = Path(out_dir) / "metrics"
    mdir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = mdir / f"{run_id}.csv", mdir / f"{run_id}.json"
    csv_path.write_text(metrics_csv(reports, with_seconds))
    summary = {
        "run_id": run_id,
        "config_hash": config_hash,
        "reports": len(reports),
        "summary": [{"protocol": s.protocol, "shots": shots_label(s.protocol), "seeds": s.seeds,
                     "accuracy": _none_if_nan(s.accuracy), "auc": _none_if_nan(s.auc),
                     "f1": _none_if_nan(s.f1)} for s in summarize(reports)],
        "warnings": sorted({f"{r.protocol}/seed{r.seed}: missing {c}" for r in reports for c in r.missing}),
        "details": [r.to_dict() for r in reports],
    }
    if extra:
        summary.update(extra)
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def monotone_steps(rows: Sequence[SummaryRow]) -> int:
    """Number of adjacent protocol pairs whose median accuracy does not decrease."""
    return sum(b.accuracy >= a.accuracy for a, b in zip(rows, rows[1:]))


# ---------------------------------------------------------------- ablation

def ablation_table(reports_by_mask: Mapping[str, Sequence[MetricsReport]],
                   protocols: Sequence[str] = GRID) -> list[dict]:
    """Median accuracy per (mask, protocol) plus each seed's grid mean; missing cells are NaN."""
    rows = []
    for mask, reps in reports_by_mask.items():
        row = {"mask": mask}
        for p in protocols:
            accs = [r.accuracy for r in reps if r.protocol == p]
            row[p] = float(np.median(accs)) if accs else float("nan")
        seeds = sorted({r.seed for r in reps})
        row["seed_means"] = {s: float(np.mean([r.accuracy for r in reps if r.seed == s])) for s in seeds}
        rows.append(row)
    return rows


def ablation_csv(rows: Sequence[dict], protocols: Sequence[str] = GRID) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mask", *protocols, "mean"])
    for row in rows:
        vals = [row[p] for p in protocols]
        w.writerow([row["mask"], *map(_fmt, vals), _fmt(float(np.nanmean(vals)) if np.isfinite(vals).any()
                                                         else float("nan"))])
    return buf.getvalue()


def seeds_where_at_least(rows: Sequence[dict], better: str, worse: str) -> tuple[int, int]:
    """(seeds where ``better``'s grid mean >= ``worse``'s, seeds compared)."""
    a = next(r for r in rows if r["mask"] == better)["seed_means"]
    b = next(r for r in rows if r["mask"] == worse)["seed_means"]
    common = sorted(set(a) & set(b))
    return sum(a[s] >= b[s] for s in common), len(common)
