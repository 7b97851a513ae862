"""Instance-conditioned prompt generator: Meta-Net, shared context, per-class embeddings."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import grad as G
from .corpus import BASE_CLASSES, OBSERVATIONS, UNSEEN_CLASSES, SampleRecord, words
from .encoders import VisionLanguageModel
from .encoders.layers import ParamStore, init_linear, linear
from .grad import OptimizerState, ShapeError, Tensor

log = logging.getLogger(__name__)

PREFIX = "prompt"
MASK_VARIANTS = ("class", "context", "metanet", "all")
SHOT_CHOICES = (1, 2, 4, 8, 16)


class PromptError(ValueError):
    pass


def class_slug(name: str) -> str:
    return "_".join(words(name))


def class_param_name(name: str) -> str:
    return f"{PREFIX}.class.{class_slug(name)}"


@dataclass(frozen=True)
class TrainableMask:
    train_metanet: bool = True
    train_context: bool = True
    train_class: bool = True

    def __post_init__(self):
        if not self.train_class:
            raise PromptError("class embeddings must always be trainable")

    @classmethod
    def from_name(cls, name: str) -> "TrainableMask":
        table = {
            "class": cls(False, False),
            "context": cls(False, True),
            "metanet": cls(True, False),
            "all": cls(True, True),
        }
        if name not in table:
            raise PromptError(f"unknown mask {name!r}; expected one of {list(MASK_VARIANTS)}")
        return table[name]

    @property
    def name(self) -> str:
        return {(False, False): "class", (False, True): "context",
                (True, False): "metanet", (True, True): "all"}[(self.train_metanet, self.train_context)]


@dataclass
class PromptConfig:
    m: int = 16
    reduction: int = 16
    context_std: float = 0.02
    epochs: int = 20
    batch: int = 32
    lr: float = 2e-3
    fewshot_epochs: int = 50
    fewshot_lr: float = 2e-3
    fullshot_epochs: int = 20

    def validate(self) -> None:
        for name in ("m", "reduction", "epochs", "batch", "fewshot_epochs", "fullshot_epochs"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise PromptError(f"prompt.{name}: must be a positive integer, got {v!r}")
        for name in ("lr", "fewshot_lr", "context_std"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v > 0):
                raise PromptError(f"prompt.{name}: must be positive, got {v!r}")


class PromptGenerator:
    """Parameters ``V`` (m × d_model), one ``C`` row per class and a bottleneck Meta-Net.

    With ``use_metanet`` off the conditional token is identically zero and the
    prompt no longer depends on the image.
    """

    def __init__(self, d: int, d_model: int, m: int = 16, reduction: int = 16, seed: int = 0,
                 context_std: float = 0.02, use_metanet: bool = True):
        if m < 1:
            raise PromptError(f"m must be >= 1, got {m}")
        if reduction < 1 or d // reduction < 1:
            raise PromptError(f"reduction {reduction} leaves no bottleneck units for d={d}")
        self.d, self.d_model, self.m, self.reduction = d, d_model, m, reduction
        self.use_metanet = use_metanet
        self.store = ParamStore(PREFIX)
        self.classes: list[str] = []
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70]))
        init_linear(self.store, "metanet.fc1", d, d // reduction, rng)
        init_linear(self.store, "metanet.fc2", d // reduction, d_model, rng)
        self.store.add("context", rng.normal(0.0, context_std, size=(m, d_model)))

    # ------------------------------------------------------------ parameters

    def named_parameters(self) -> dict[str, Tensor]:
        return self.store.named_parameters()

    def metanet_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if k.startswith(f"{PREFIX}.metanet.")}

    @property
    def context(self) -> Tensor:
        return self.store["context"]

    def class_embedding(self, name: str) -> Tensor:
        if name not in self.classes:
            raise PromptError(f"unknown class {name!r}")
        return self.store.params[class_param_name(name)]

    def set_class(self, name: str, vector) -> None:
        vec = np.asarray(vector, dtype=np.float32)
        if vec.shape != (self.d_model,):
            raise ShapeError("set_class", vec.shape, detail=f"expected ({self.d_model},)")
        if name in self.classes:
            self.class_embedding(name).data = vec.copy()
        else:
            self.store.add(f"class.{class_slug(name)}", vec)
            self.classes.append(name)

    def freeze(self) -> None:
        self.store.set_trainable(False)

    def trainable(self, mask: TrainableMask, classes: list[str]) -> dict[str, Tensor]:
        """Enable exactly the mask's groups (and the listed classes' rows)."""
        self.freeze()
        chosen = {}
        if mask.train_metanet:
            chosen.update(self.metanet_parameters())
        if mask.train_context:
            chosen[f"{PREFIX}.context"] = self.context
        for c in classes:
            chosen[class_param_name(c)] = self.class_embedding(c)
        for p in chosen.values():
            p.requires_grad = True
        return chosen

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def copy(self) -> "PromptGenerator":
        out = PromptGenerator.__new__(PromptGenerator)
        out.d, out.d_model, out.m, out.reduction = self.d, self.d_model, self.m, self.reduction
        out.use_metanet = self.use_metanet
        out.classes = list(self.classes)
        out.store = ParamStore(PREFIX)
        for k, v in self.named_parameters().items():
            out.store.add(k[len(PREFIX) + 1:], v.data)
        out.freeze()
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], classes: list[str] | None = None,
                     use_metanet: bool = True) -> "PromptGenerator":
        ctx = tensors[f"{PREFIX}.context"]
        w1 = tensors[f"{PREFIX}.metanet.fc1.w"]
        d, hidden = w1.shape
        gen = cls(d, ctx.shape[1], m=ctx.shape[0], reduction=d // hidden, use_metanet=use_metanet)
        for k in list(gen.store.params):
            gen.store.params[k].data = np.asarray(tensors[k], dtype=np.float32).copy()
        names = classes if classes is not None else [
            c for c in OBSERVATIONS if class_param_name(c) in tensors]
        for c in names:
            gen.set_class(c, tensors[class_param_name(c)])
        gen.freeze()
        return gen

    # ------------------------------------------------------------ forward

    def metanet_forward(self, image_emb) -> Tensor:
        """Conditional token ``W2·ReLU(W1·x + b1) + b2`` for one (d,) or a batch (B, d)."""
        x = image_emb if isinstance(image_emb, Tensor) else Tensor(np.asarray(image_emb))
        if x.shape[-1] != self.d or x.ndim not in (1, 2):
            raise ShapeError("metanet_forward", x.shape, detail=f"expected (..., {self.d})")
        s = self.store
        single = x.ndim == 1
        if single:
            x = G.reshape(x, (1, self.d))
        out = linear(s, "metanet.fc2", G.relu(linear(s, "metanet.fc1", x)))
        return G.reshape(out, (self.d_model,)) if single else out

    def conditional_token(self, image_emb) -> Tensor:
        if self.use_metanet:
            return self.metanet_forward(image_emb)
        x = np.asarray(image_emb.data if isinstance(image_emb, Tensor) else image_emb)
        return Tensor(np.zeros(x.shape[:-1] + (self.d_model,), dtype=np.float32))

    def contexts(self, image_emb) -> Tensor:
        """Instance-conditioned context slots: (m, d_model) or (B, m, d_model)."""
        pi = self.conditional_token(image_emb)
        if pi.ndim == 1:
            return self.context + pi
        return G.reshape(self.context, (1, self.m, self.d_model)) + G.reshape(pi, (pi.shape[0], 1, self.d_model))

    def build_prompt(self, image_emb, name: str) -> Tensor:
        """``[v_1+π, …, v_m+π, C_k]`` for a single image embedding."""
        ctx = self.contexts(image_emb)
        if ctx.ndim != 2:
            raise ShapeError("build_prompt", ctx.shape, detail="expects one image embedding")
        return G.concat([ctx, G.reshape(self.class_embedding(name), (1, self.d_model))], axis=0)

    def prompt_batch(self, image_emb, names: list[str]) -> Tensor:
        """All prompts for B images × K classes, shaped (B·K, m+1, d_model), image-major.

        Without Meta-Net the prompts are image independent and only K are built.
        """
        if not names:
            raise PromptError("empty class set")
        cls_rows = G.reshape(G.concat([G.reshape(self.class_embedding(n), (1, self.d_model)) for n in names],
                                      axis=0), (len(names), 1, self.d_model))
        k = len(names)
        if not self.use_metanet:
            ctx = G.concat([G.reshape(self.context, (1, self.m, self.d_model))] * k, axis=0)
            return G.concat([ctx, cls_rows], axis=1)
        ctx = self.contexts(image_emb)  # (B, m, D)
        b = ctx.shape[0]
        ctx = G.reshape(G.concat([G.reshape(ctx, (b, 1, self.m, self.d_model))] * k, axis=1),
                        (b * k, self.m, self.d_model))
        cls_all = G.concat([cls_rows] * b, axis=0)
        return G.concat([ctx, cls_all], axis=1)


# ---------------------------------------------------------------- classification

def class_logits(model: VisionLanguageModel, gen: PromptGenerator, image_emb, names: list[str]) -> tuple[Tensor, Tensor]:
    """Cosine similarities (B, K) between images and their class prompts, and the same divided by τ."""
    x = image_emb if isinstance(image_emb, Tensor) else Tensor(np.asarray(image_emb))
    if x.ndim == 1:
        x = G.reshape(x, (1, x.shape[0]))
    b, k = x.shape[0], len(names)
    text = model.text.encode_embeddings(gen.prompt_batch(x, names))
    img = G.l2_normalize(x)
    txt = G.l2_normalize(text)
    if gen.use_metanet:
        cos = G.sum(G.reshape(txt, (b, k, txt.shape[-1])) * G.reshape(img, (b, 1, img.shape[-1])), axis=-1)
    else:
        cos = img @ G.transpose(txt)
    tau = Tensor(model.tau.data.copy())
    return cos, G.div(cos, tau)


def classify(model: VisionLanguageModel, gen: PromptGenerator, images, names: list[str],
             batch: int = 64) -> np.ndarray:
    """Class probabilities (B, K) for raw images; softmax of cosine/τ over ``names``."""
    if not names:
        raise PromptError("empty class set")
    emb = embed_images(model, images, batch)
    return classify_embeddings(model, gen, emb, names, batch)


def classify_embeddings(model: VisionLanguageModel, gen: PromptGenerator, emb: np.ndarray, names: list[str],
                        batch: int = 64) -> np.ndarray:
    if not names:
        raise PromptError("empty class set")
    out = []
    with G.no_grad():
        for i in range(0, len(emb), batch):
            _, logits = class_logits(model, gen, emb[i:i + batch], names)
            out.append(G.softmax(logits, axis=-1).data)
    return np.concatenate(out, axis=0).astype(np.float64)


def embed_images(model: VisionLanguageModel, images, batch: int = 64) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    with G.no_grad():
        return np.concatenate([model.image(images[i:i + batch]).data for i in range(0, len(images), batch)])


# ---------------------------------------------------------------- training

@dataclass
class PromptTrainResult:
    generator: PromptGenerator
    history: list[dict] = field(default_factory=list)


def name_embedding(model: VisionLanguageModel, name: str) -> np.ndarray:
    """Mean token embedding of a class name's in-vocabulary words."""
    ids = [model.tokenizer.stoi[w] for w in words(name) if w in model.tokenizer.stoi]
    if not ids:
        raise PromptError(f"class name {name!r} has no in-vocabulary word")
    table = model.text.token_embeddings.data
    return table[ids].astype(np.float64).mean(axis=0).astype(np.float32)


def new_generator(model: VisionLanguageModel, classes: list[str], cfg: PromptConfig, seed: int = 0,
                  mask: TrainableMask = TrainableMask()) -> PromptGenerator:
    cfg.validate()
    gen = PromptGenerator(model.cfg.d, model.cfg.d_model, m=cfg.m, reduction=cfg.reduction, seed=seed,
                          context_std=cfg.context_std, use_metanet=mask.train_metanet)
    for c in classes:
        gen.set_class(c, name_embedding(model, c))
    gen.freeze()
    return gen


def _records_for(records: list[SampleRecord], names: list[str]) -> tuple[list[SampleRecord], np.ndarray]:
    index = {n: i for i, n in enumerate(names)}
    keep = [r for r in records if OBSERVATIONS[r.class_id] in index]
    if not keep:
        raise PromptError(f"no samples for classes {names}")
    return keep, np.array([index[OBSERVATIONS[r.class_id]] for r in keep])


def _fit(model: VisionLanguageModel, gen: PromptGenerator, params: dict[str, Tensor], emb: np.ndarray,
         targets: np.ndarray, names: list[str], epochs: int, batch: int, lr: float, seed: int,
         tag: str) -> list[dict]:
    if not params:
        raise PromptError("nothing to train")
    steps = -(-len(emb) // batch)
    opt = OptimizerState(lr=lr, total_steps=steps * epochs)
    history = []
    for epoch in range(epochs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
        order = rng.permutation(len(emb))
        losses, hits = [], 0
        for s in range(steps):
            idx = order[s * batch:(s + 1) * batch]
            _, logits = class_logits(model, gen, emb[idx], names)
            loss = G.cross_entropy(logits, targets[idx])
            G.backward(loss)
            G.step_params(params, opt)
            losses.append(float(loss.data) * len(idx))
            hits += int((logits.data.argmax(axis=1) == targets[idx]).sum())
        row = {"epoch": epoch, "loss": sum(losses) / len(emb), "accuracy": hits / len(emb)}
        history.append(row)
        log.info("%s epoch %d loss %.4f acc %.3f", tag, epoch, row["loss"], row["accuracy"])
    return history


def _check_frozen_encoders(model: VisionLanguageModel) -> dict[str, np.ndarray]:
    model.freeze()
    return {k: v.data for k, v in model.named_parameters().items()}


def prompt_train(model: VisionLanguageModel, records: list[SampleRecord], cfg: PromptConfig,
                 mask: TrainableMask = TrainableMask(), classes: list[str] = BASE_CLASSES,
                 seed: int = 0) -> PromptTrainResult:
    """Fit the generator on labelled base-class images with the encoders frozen."""
    classes = list(classes)
    before = _check_frozen_encoders(model)
    gen = new_generator(model, classes, cfg, seed, mask)
    recs, targets = _records_for(records, classes)
    emb = embed_images(model, np.stack([r.image for r in recs]))
    params = gen.trainable(mask, classes)
    history = _fit(model, gen, params, emb, targets, classes, cfg.epochs, cfg.batch, cfg.lr, seed, "prompt")
    gen.freeze()
    _assert_unchanged(model, before)
    return PromptTrainResult(gen, history)


def zero_shot_setup(model: VisionLanguageModel, gen: PromptGenerator,
                    classes: list[str] = UNSEEN_CLASSES) -> PromptGenerator:
    """Copy of ``gen`` with name-embedding rows for ``classes``; context and Meta-Net untouched."""
    out = gen.copy()
    for c in classes:
        out.set_class(c, name_embedding(model, c))
    out.freeze()
    return out


def select_shots(records: list[SampleRecord], classes: list[str], shots: int, seed: int) -> list[SampleRecord]:
    """``shots`` samples per class, drawn without replacement by a seeded generator."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, shots, 0x5407]))
    chosen = []
    for c in classes:
        pool = [r for r in records if OBSERVATIONS[r.class_id] == c]
        if len(pool) < shots:
            raise PromptError(f"class {c!r} has {len(pool)} samples, {shots} shots requested")
        pick = rng.choice(len(pool), size=shots, replace=False)
        chosen.extend(pool[i] for i in sorted(pick))
    return chosen


def fewshot_finetune(model: VisionLanguageModel, gen: PromptGenerator, records: list[SampleRecord], shots: int,
                     cfg: PromptConfig, classes: list[str] = UNSEEN_CLASSES,
                     seed: int = 0) -> tuple[PromptGenerator, list[SampleRecord], list[dict]]:
    """Tune only the ``classes`` rows of ``C`` on ``shots`` samples per class."""
    classes = list(classes)
    if shots == 0:
        return gen, [], []
    if shots not in SHOT_CHOICES:
        raise PromptError(f"shots must be one of {list(SHOT_CHOICES)}, got {shots}")
    before = _check_frozen_encoders(model)
    out = gen.copy()
    picked = select_shots(records, classes, shots, seed)
    recs, targets = _records_for(picked, classes)
    emb = embed_images(model, np.stack([r.image for r in recs]))
    params = out.trainable(TrainableMask(False, False), classes)
    history = _fit(model, out, params, emb, targets, classes, cfg.fewshot_epochs, cfg.batch, cfg.fewshot_lr,
                   seed, f"few:{shots}")
    out.freeze()
    _assert_unchanged(model, before)
    return out, picked, history


def fullshot_train(model: VisionLanguageModel, gen: PromptGenerator, records: list[SampleRecord], cfg: PromptConfig,
                   mask: TrainableMask = TrainableMask(), classes: list[str] = UNSEEN_CLASSES,
                   seed: int = 0) -> tuple[PromptGenerator, list[dict]]:
    """Train every mask-enabled generator group on the whole labelled split."""
    classes = list(classes)
    before = _check_frozen_encoders(model)
    out = gen.copy()
    recs, targets = _records_for(records, classes)
    emb = embed_images(model, np.stack([r.image for r in recs]))
    params = out.trainable(mask, classes)
    history = _fit(model, out, params, emb, targets, classes, cfg.fullshot_epochs, cfg.batch, cfg.lr, seed, "full")
    out.freeze()
    _assert_unchanged(model, before)
    return out, history


def _assert_unchanged(model: VisionLanguageModel, before: dict[str, np.ndarray]) -> None:
    for k, v in model.named_parameters().items():
        if v.data is not before[k] and not np.array_equal(v.data, before[k]):
            raise RuntimeError(f"frozen tensor {k} changed during prompt learning")
