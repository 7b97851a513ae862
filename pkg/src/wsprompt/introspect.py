"""Post-hoc analyses: nearest words, context similarity, parameter/FLOP footprint, activation maps."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .encoders import SPECIALS, EncoderConfig, VisionLanguageModel
from .promptgen import PromptGenerator, embed_images

# published full-scale prompt generator figures, quoted rather than recomputed
REFERENCE_PARAMETERS = 86_016
REFERENCE_FLOPS = 86_112
CITATION = (f"reference (full-scale prompt generator, published): {REFERENCE_PARAMETERS} parameters, "
            f"{REFERENCE_FLOPS} FLOPs; not recomputed")


class IntrospectError(ValueError):
    pass


# ---------------------------------------------------------------- nearest words

@dataclass(frozen=True)
class WordNeighbor:
    token: str
    distance: float
    rank: int
    token_id: int


def nearest_words(vector, table, k: int = 30, itos: Sequence[str] | None = None,
                  n_special: int = len(SPECIALS)) -> list[WordNeighbor]:
    """Exact k nearest rows of ``table`` by Euclidean distance, ties to the lower id.

    Rows ``0 .. n_special-1`` (pad/unk/bos/eos) are never returned.
    """
    if k <= 0:
        raise IntrospectError(f"k must be positive, got {k}")
    table = np.asarray(table, dtype=np.float64)
    v = np.asarray(vector, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] == 0:
        raise IntrospectError("embedding table must be a non-empty matrix")
    if v.shape != (table.shape[1],):
        raise IntrospectError(f"query of shape {v.shape} does not match table width {table.shape[1]}")
    ids = np.arange(n_special, table.shape[0])
    if k > len(ids):
        raise IntrospectError(f"k={k} exceeds the {len(ids)} non-special tokens")
    dist = np.sqrt(((table[ids] - v) ** 2).sum(axis=1))
    order = np.lexsort((ids, dist))[:k]
    names = itos if itos is not None else [str(i) for i in range(table.shape[0])]
    return [WordNeighbor(names[ids[j]], float(dist[j]), r + 1, int(ids[j])) for r, j in enumerate(order)]


def context_nearest_words(model: VisionLanguageModel, gen: PromptGenerator, k: int = 30,
                          image=None) -> list[list[WordNeighbor]]:
    """Neighbours of each context slot in token-embedding space (conditioned on ``image`` if given)."""
    ctx = gen.context.data if image is None else gen.contexts(embed_images(model, image)[0]).data
    table = model.text.token_embeddings.data
    return [nearest_words(row, table, k, model.tokenizer.itos) for row in ctx]


def neighbors_csv(lists: Sequence[Sequence[WordNeighbor]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["slot", "rank", "token", "token_id", "distance"])
    for slot, items in enumerate(lists, start=1):
        for n in items:
            w.writerow([slot, n.rank, n.token, n.token_id, f"{n.distance:.6f}"])
    return buf.getvalue()


# ---------------------------------------------------------------- context similarity

def context_similarity_from_embeddings(gen: PromptGenerator, image_emb: np.ndarray) -> np.ndarray:
    emb = np.asarray(image_emb, dtype=np.float32)
    if emb.ndim != 2 or len(emb) < 2:
        raise IntrospectError("need at least 2 image embeddings")
    flat = gen.contexts(emb).data.reshape(len(emb), -1).astype(np.float64)
    flat /= np.maximum(np.linalg.norm(flat, axis=1, keepdims=True), 1e-12)
    return np.clip(flat @ flat.T, -1.0, 1.0)


def context_similarity_matrix(model: VisionLanguageModel, gen: PromptGenerator, images) -> np.ndarray:
    """Pairwise cosine between images' flattened instance-conditioned context slots."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or len(images) < 2:
        raise IntrospectError("need at least 2 images")
    return context_similarity_from_embeddings(gen, embed_images(model, images))


def grid_csv(matrix: np.ndarray) -> str:
    return "\n".join(",".join(f"{x:.6f}" for x in row) for row in np.asarray(matrix)) + "\n"


def write_pgm(matrix: np.ndarray, path) -> None:
    """8-bit binary greyscale image of a [0, 1] grid."""
    m = np.clip(np.asarray(matrix, dtype=np.float64), 0.0, 1.0)
    pix = np.round(m * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode())
        fh.write(pix.tobytes())


# ---------------------------------------------------------------- footprint

@dataclass(frozen=True)
class ComponentFootprint:
    name: str
    parameters: int
    flops: int
    fraction: float


def affine_flops(tokens: int, n_in: int, n_out: int, bias: bool = True) -> int:
    """2 × multiply-accumulates plus one add per bias element."""
    return tokens * (2 * n_in * n_out + (n_out if bias else 0))


def block_flops(tokens: int, dim: int, hidden: int) -> int:
    qkvo = 4 * affine_flops(tokens, dim, dim)
    attn = 2 * (2 * tokens * tokens * dim)  # scores and weighted values
    mlp = affine_flops(tokens, dim, hidden) + affine_flops(tokens, hidden, dim)
    return qkvo + attn + mlp


def image_flops(cfg: EncoderConfig, input_shape: tuple[int, ...]) -> int:
    h, w = int(input_shape[0]), int(input_shape[1])
    if cfg.variant == "conv":
        total, c_in = 0, 1
        for i, c in enumerate(cfg.channels):
            if i:
                h, w = h // 2, w // 2
            total += affine_flops(h * w, 9 * c_in, c)
            c_in = c
        return total + affine_flops(1, c_in, cfg.d, bias=False)
    n = (h // cfg.patch) * (w // cfg.patch)
    total = affine_flops(n, cfg.patch * cfg.patch, cfg.d_model)
    total += cfg.layers * block_flops(n, cfg.d_model, cfg.d_model * cfg.mlp_ratio)
    return total + affine_flops(1, cfg.d_model, cfg.d, bias=False)


def text_flops(cfg: EncoderConfig, seq_len: int) -> int:
    body = cfg.layers * block_flops(seq_len, cfg.d_model, cfg.d_model * cfg.mlp_ratio)
    return body + affine_flops(1, cfg.d_model, cfg.d, bias=False)


def prompt_flops(d: int, hidden: int, d_model: int) -> int:
    """Meta-Net forward for one image; slot additions are elementwise and free."""
    return affine_flops(1, d, hidden) + affine_flops(1, hidden, d_model)


def count_footprint(tensors: Mapping[str, np.ndarray], cfg: EncoderConfig | None = None,
                    input_shape: tuple[int, ...] | None = None, n_classes: int | None = None,
                    components: Sequence[str] = ("prompt",)) -> list[ComponentFootprint]:
    """Parameter and FLOP counts for each named prefix, then ``rest`` and ``whole``.

    FLOPs are per forward of one image: the image encoder on ``input_shape``,
    the Meta-Net, and the text encoder once per class prompt. Without
    ``cfg``/``input_shape`` only the prompt generator's FLOPs are counted.
    """
    sizes = {k: int(np.asarray(v).size) for k, v in tensors.items()}
    for c in components:
        if not any(k.startswith(c + ".") for k in sizes):
            raise IntrospectError(f"unknown component prefix {c!r}")
    owner = {k: next((c for c in components if k.startswith(c + ".")), "rest") for k in sizes}
    params = {c: sum(n for k, n in sizes.items() if owner[k] == c) for c in (*components, "rest")}
    whole = sum(sizes.values())

    flops = {c: 0 for c in (*components, "rest")}
    if "prompt.metanet.fc1.w" in tensors:
        d, hidden = np.asarray(tensors["prompt.metanet.fc1.w"]).shape
        d_model = np.asarray(tensors["prompt.context"]).shape[1]
        m = np.asarray(tensors["prompt.context"]).shape[0]
        key = "prompt" if "prompt" in components else "rest"
        flops[key] += prompt_flops(d, hidden, d_model)
        if cfg is not None:
            k = n_classes if n_classes is not None else sum(1 for t in tensors if t.startswith("prompt.class."))
            flops["rest"] += k * text_flops(cfg, m + 1)
    if cfg is not None and input_shape is not None:
        flops["rest"] += image_flops(cfg, input_shape)

    rows = [ComponentFootprint(c, params[c], flops[c], params[c] / whole if whole else 0.0)
            for c in (*components, "rest")]
    rows.append(ComponentFootprint("whole", whole, sum(flops.values()), 1.0))
    return rows


def footprint_csv(rows: Sequence[ComponentFootprint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["component", "parameters", "flops", "fraction"])
    for r in rows:
        w.writerow([r.name, r.parameters, r.flops, f"{r.fraction:.9f}"])
    return buf.getvalue() + f"# {CITATION}\n"


# ---------------------------------------------------------------- activation maps

def normalize_map(m: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a zero-range map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if not hi > lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def upsample_nearest(m: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    rows = (np.arange(shape[0]) * m.shape[0]) // shape[0]
    cols = (np.arange(shape[1]) * m.shape[1]) // shape[1]
    return m[np.ix_(rows, cols)]


def activation_map(model: VisionLanguageModel, image) -> np.ndarray:
    """Channel-mean (token-norm for the attention variant) of the last feature map, in [0, 1] at input size."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise IntrospectError(f"expected one (H, W, 1) image, got shape {image.shape}")
    raw = model.image.spatial_map(image[None])[0]
    return upsample_nearest(normalize_map(raw), image.shape[:2])
