"""Experiment orchestration over an output directory.

Layout under ``out``::

    corpus/                         manifest.jsonl, images/, corpus_meta.json
    checkpoints/pretrain.mpck       encoders + temperature
    checkpoints/prompt-<mask>-s<seed>.mpck
    pretrain_loss.csv, prompt_loss-<mask>-s<seed>.csv
    metrics/<run-id>.csv|.json
    inspect/...
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evalharness as EH
from . import introspect as IN
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .corpus import BASE_CLASSES, OBSERVATIONS, UNSEEN_CLASSES, generate_corpus, load_corpus
from .encoders import SPECIALS, EncoderConfig, Tokenizer, VisionLanguageModel
from .pretrain import pretrain_run, retrieval_top1, write_loss_csv
from .promptgen import PromptGenerator, TrainableMask, prompt_train, zero_shot_setup

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


class Run:
    """Paths and loaders for one configuration's output directory."""

    def __init__(self, cfg: RunConfig, out: str | Path | None = None):
        cfg.validate()
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg.out)
        self.hash = cfg.hash()

    @property
    def corpus_dir(self) -> Path:
        return self.out / "corpus"

    @property
    def pretrain_path(self) -> Path:
        return self.out / "checkpoints" / "pretrain.mpck"

    def prompt_path(self, mask: str, seed: int) -> Path:
        return self.out / "checkpoints" / f"prompt-{mask}-s{seed}.mpck"

    def run_id(self, kind: str) -> str:
        return f"{kind}-{self.hash[:12]}"

    # ------------------------------------------------------------ corpus

    def gen_corpus(self) -> Path:
        return generate_corpus(self.cfg.corpus, self.corpus_dir, config_hash=self.hash)

    def records(self, split: str):
        if not (self.corpus_dir / "manifest.jsonl").exists():
            raise PipelineError(f"no corpus at {self.corpus_dir}; run gen-corpus first")
        meta = json.loads((self.corpus_dir / "corpus_meta.json").read_text())
        if meta.get("config") != asdict(self.cfg.corpus):
            raise PipelineError("corpus on disk was generated from a different corpus config")
        return load_corpus(self.corpus_dir, (split,))

    # ------------------------------------------------------------ pretraining

    def tokenizer(self) -> Tokenizer:
        reports = [r.report for r in self.records("pretrain")]
        return Tokenizer.build(reports, extra=OBSERVATIONS, max_len=self.cfg.encoder.max_len)

    def pretrain(self, seed: int = 0) -> dict:
        tok = self.tokenizer()
        model = VisionLanguageModel(self.cfg.encoder, tok, seed=seed, tau_init=self.cfg.tau_init)
        start = time.perf_counter()
        res = pretrain_run(model, self.records("pretrain"), self.cfg.pretrain, seed=seed,
                           log_csv=self.out / "pretrain_loss.csv")
        seconds = time.perf_counter() - start
        meta = {"config_hash": self.hash, "seed": seed, "epoch": self.cfg.pretrain.epochs, "kind": "pretrain",
                "tokenizer": tok.itos, "max_len": tok.max_len, "encoder": asdict(self.cfg.encoder)}
        save_checkpoint({k: v.data for k, v in model.named_parameters().items()}, self.pretrain_path, meta)
        held = self.records("base-train") + self.records("unseen-test")
        return {"history": res.history, "seconds": seconds, "retrieval_top1": retrieval_top1(model, held)}

    def load_model(self) -> VisionLanguageModel:
        if not self.pretrain_path.exists():
            raise PipelineError(f"missing pretraining checkpoint {self.pretrain_path}; run pretrain first")
        ck = load_checkpoint(self.pretrain_path, expected_hash=self.hash)
        return model_from_checkpoint(ck)

    # ------------------------------------------------------------ prompt learning

    def prompt_train(self, seed: int, mask: str = "all", model: VisionLanguageModel | None = None) -> dict:
        model = model or self.load_model()
        m = TrainableMask.from_name(mask)
        res = prompt_train(model, self.records("base-train"), self.cfg.prompt, m, list(BASE_CLASSES), seed=seed)
        meta = {"config_hash": self.hash, "seed": seed, "epoch": self.cfg.prompt.epochs, "kind": "prompt",
                "mask": mask, "classes": list(res.generator.classes)}
        save_checkpoint(res.generator.state(), self.prompt_path(mask, seed), meta)
        lines = ["epoch,loss,accuracy"] + [f"{h['epoch']},{h['loss']:.8f},{h['accuracy']:.6f}" for h in res.history]
        self.prompt_log_path(mask, seed).write_text("\n".join(lines) + "\n")
        return {"history": res.history}

    def prompt_log_path(self, mask: str, seed: int) -> Path:
        return self.out / f"prompt_loss-{mask}-s{seed}.csv"

    def load_generator(self, seed: int, mask: str = "all") -> PromptGenerator:
        path = self.prompt_path(mask, seed)
        if not path.exists():
            raise PipelineError(f"missing prompt checkpoint {path}; run prompt-train --mask {mask} first")
        ck = load_checkpoint(path, expected_hash=self.hash)
        return PromptGenerator.from_tensors(ck.tensors, ck.meta.get("classes"),
                                            use_metanet=TrainableMask.from_name(mask).train_metanet)

    # ------------------------------------------------------------ evaluation

    def evaluate(self, protocols: Sequence[str], seeds: Sequence[int], mask: str = "all",
                 model: VisionLanguageModel | None = None, run_id: str | None = None,
                 with_seconds: bool = False) -> tuple[list[EH.MetricsReport], Path]:
        for p in protocols:
            EH.parse_protocol(p)
        model = model or self.load_model()
        gens = {s: self.load_generator(s, mask) for s in seeds}
        reports = EH.run_grid(model, gens, list(seeds), self.records("unseen-train"), self.records("unseen-test"),
                              self.cfg.prompt, protocols, UNSEEN_CLASSES, TrainableMask.from_name(mask))
        label = "grid" if tuple(protocols) == EH.GRID else "_".join(p.replace(":", "") for p in protocols)
        rid = run_id or self.run_id(f"eval-{mask}-{label}")
        csv_path, _ = EH.write_metrics(reports, self.out, rid, self.hash, with_seconds, {"mask": mask})
        return reports, csv_path

    def ablate(self, seeds: Sequence[int], masks: Sequence[str] = ("class", "context", "metanet", "all"),
               protocols: Sequence[str] = EH.GRID) -> tuple[list[dict], Path]:
        """Every mask × protocol × seed; reuses prompt checkpoints already on disk."""
        model = self.load_model()
        by_mask = {}
        for mask in masks:
            for s in seeds:
                if not self.prompt_path(mask, s).exists():
                    self.prompt_train(s, mask, model)
            by_mask[mask], _ = self.evaluate(protocols, seeds, mask, model, self.run_id(f"ablate-{mask}"))
        rows = EH.ablation_table(by_mask, protocols)
        path = self.out / "metrics" / f"{self.run_id('ablate')}-table.csv"
        path.write_text(EH.ablation_csv(rows, protocols))
        wins, total = EH.seeds_where_at_least(rows, "all", "class") if {"all", "class"} <= set(masks) else (0, 0)
        summary = {"config_hash": self.hash, "table": rows, "all_ge_class_seeds": [wins, total]}
        path.with_suffix(".json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")
        return rows, path

    # ------------------------------------------------------------ inspection

    def full_tensors(self, seed: int = 0, mask: str = "all") -> tuple[dict, VisionLanguageModel, PromptGenerator]:
        """Encoder tensors plus a generator holding all 14 class rows."""
        model = self.load_model()
        gen = zero_shot_setup(model, self.load_generator(seed, mask), list(UNSEEN_CLASSES))
        tensors = {k: v.data for k, v in model.named_parameters().items()}
        tensors.update(gen.state())
        return tensors, model, gen

    def inspect(self, what: str, seed: int = 0, k: int = 30, n_images: int = 8, index: int = 0,
                mask: str = "all") -> list[Path]:
        idir = self.out / "inspect"
        idir.mkdir(parents=True, exist_ok=True)
        tensors, model, gen = self.full_tensors(seed, mask)
        trailer = f"# config_hash={self.hash}\n"
        test = self.records("unseen-test")
        if what == "nearest-words":
            p = idir / f"nearest_words-s{seed}.csv"
            p.write_text(IN.neighbors_csv(IN.context_nearest_words(model, gen, k)) + trailer)
            return [p]
        if what == "context-sim":
            if n_images < 2 or n_images > len(test):
                raise PipelineError(f"--n-images must lie in [2, {len(test)}], got {n_images}")
            sim = IN.context_similarity_matrix(model, gen, np.stack([r.image for r in test[:n_images]]))
            p = idir / f"context_similarity-s{seed}.csv"
            p.write_text(IN.grid_csv(sim) + trailer)
            IN.write_pgm((sim + 1) / 2, p.with_suffix(".pgm"))
            return [p, p.with_suffix(".pgm")]
        if what == "footprint":
            rows = IN.count_footprint(tensors, self.cfg.encoder, (self.cfg.corpus.image_size,) * 2 + (1,),
                                      components=("prompt",))
            p = idir / "footprint.csv"
            p.write_text(IN.footprint_csv(rows) + trailer)
            return [p]
        if what == "activation-map":
            if not 0 <= index < len(test):
                raise PipelineError(f"--index must lie in [0, {len(test) - 1}], got {index}")
            heat = IN.activation_map(model, test[index].image)
            p = idir / f"activation_map-{test[index].id}.csv"
            p.write_text(IN.grid_csv(heat) + trailer)
            IN.write_pgm(heat, p.with_suffix(".pgm"))
            return [p, p.with_suffix(".pgm")]
        raise PipelineError(f"unknown inspection {what!r}")


def model_from_checkpoint(ck: Checkpoint) -> VisionLanguageModel:
    meta = ck.meta
    try:
        itos, enc = meta["tokenizer"], meta["encoder"]
    except KeyError as exc:
        raise PipelineError(f"checkpoint metadata lacks {exc.args[0]!r}; not a pretraining checkpoint") from exc
    tok = Tokenizer([w for w in itos if w not in SPECIALS], max_len=meta.get("max_len", 32))
    if tok.itos != itos:
        raise PipelineError("stored vocabulary is not in canonical order")
    model = VisionLanguageModel(EncoderConfig(**enc), tok, seed=0)
    model.load_tensors(ck.tensors)
    model.freeze()
    return model
