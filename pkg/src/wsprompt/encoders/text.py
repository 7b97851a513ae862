"""Transformer text encoder with a token entry point and an embedding entry point."""

from __future__ import annotations

import numpy as np

from .. import grad as G
from ..grad import ShapeError, Tensor
from .image import EncoderConfig
from .layers import ParamStore, block, init_block, init_layer_norm, init_linear, layer_norm, linear
from .tokenizer import PAD

MASKED = -1e9


class TextEncoder:
    def __init__(self, cfg: EncoderConfig, vocab_size: int, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.store = ParamStore("text")
        s = self.store
        s.add("tok_emb", rng.normal(0.0, 0.02, size=(vocab_size, cfg.d_model)))
        s.add("pos_emb", rng.normal(0.0, 0.02, size=(cfg.max_len, cfg.d_model)))
        for i in range(cfg.layers):
            init_block(s, f"block{i}", cfg.d_model, cfg.d_model * cfg.mlp_ratio, rng)
        init_layer_norm(s, "ln_f", cfg.d_model)
        init_linear(s, "proj", cfg.d_model, cfg.d, rng, bias=False)

    def named_parameters(self) -> dict[str, Tensor]:
        return self.store.named_parameters()

    @property
    def token_embeddings(self) -> Tensor:
        return self.store["tok_emb"]

    def __call__(self, x) -> Tensor:
        """Token ids (T,) / (B, T) or an embedding Tensor (T, D) / (B, T, D)."""
        if isinstance(x, Tensor):
            return self.encode_embeddings(x)
        return self.encode_tokens(x)

    def encode_tokens(self, ids) -> Tensor:
        ids = np.asarray(ids)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
        if ids.ndim != 2 or ids.dtype.kind not in "iu":
            raise ShapeError("encode_text", ids.shape, detail="expected integer ids (B, T)")
        pad = ids == PAD
        # trailing all-pad columns are masked out anyway
        width = int((~pad).any(axis=0).nonzero()[0].max()) + 1 if (~pad).any() else 1
        ids, pad = ids[:, :width], pad[:, :width]
        emb = G.embedding(self.store["tok_emb"], ids)
        bias = np.where(pad, MASKED, 0.0) if pad.any() else None
        # final non-pad position (EOS for tokenizer output)
        last = ids.shape[1] - 1 - np.argmax((~pad)[:, ::-1], axis=1)
        out = self.encode_embeddings(emb, key_bias=bias, pool_index=last)
        return out[0] if single else out

    def encode_embeddings(self, seq: Tensor, key_bias: np.ndarray | None = None,
                          pool_index: np.ndarray | None = None) -> Tensor:
        single = seq.ndim == 2
        if single:
            seq = G.reshape(seq, (1, *seq.shape))
        b, t, d = seq.shape if seq.ndim == 3 else (0, 0, -1)
        if seq.ndim != 3 or d != self.cfg.d_model:
            raise ShapeError("encode_text", seq.shape, detail=f"embedding width must be d_model={self.cfg.d_model}")
        if t > self.cfg.max_len:
            raise ShapeError("encode_text", seq.shape, detail=f"sequence longer than max_len={self.cfg.max_len}")
        s = self.store
        h = seq + G.index(s["pos_emb"], slice(0, t))
        for i in range(self.cfg.layers):
            h = block(s, f"block{i}", h, self.cfg.heads, key_bias)
        h = layer_norm(s, "ln_f", h)
        if pool_index is None:
            pool_index = np.full(b, t - 1)
        pooled = G.index(h, (np.arange(b), np.asarray(pool_index)))
        out = linear(s, "proj", pooled)
        return out[0] if single else out
