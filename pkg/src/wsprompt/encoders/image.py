"""Image encoders: a three-stage CNN and a patch-embedding transformer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import grad as G
from ..grad import ShapeError, Tensor
from .layers import ParamStore, block, init_block, init_layer_norm, init_linear, layer_norm, linear

VARIANTS = ("conv", "attention")


@dataclass
class EncoderConfig:
    variant: str = "conv"
    d_model: int = 64
    d: int = 64
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    max_len: int = 32
    image_size: int = 32
    patch: int = 4
    channels: list = field(default_factory=lambda: [16, 32, 64])

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"encoder.variant: expected one of {VARIANTS}, got {self.variant!r}")
        for name in ("d_model", "d", "layers", "heads", "mlp_ratio", "max_len", "image_size", "patch"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"encoder.{name}: must be a positive integer, got {v!r}")
        if self.d_model % self.heads:
            raise ValueError("encoder.d_model must be divisible by encoder.heads")
        if self.image_size % self.patch or self.image_size % 8:
            raise ValueError("encoder.image_size must be divisible by the patch size and by 8")
        if len(self.channels) != 3 or any(not isinstance(c, int) or c <= 0 for c in self.channels):
            raise ValueError("encoder.channels: need three positive integers")


def standardize(x: np.ndarray) -> np.ndarray:
    """Per-image zero mean, unit variance; constant images map to zeros."""
    mu = x.mean(axis=(1, 2, 3), keepdims=True)
    sd = x.std(axis=(1, 2, 3), keepdims=True)
    return ((x - mu) / np.where(sd > 0, sd, 1.0)).astype(np.float32)


def _as_batch(images) -> tuple[np.ndarray, bool]:
    x = np.asarray(images, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    return x, single


class ImageEncoder:
    """Maps ``H×W×1`` images to unnormalised embeddings of width ``d``."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.store = ParamStore("image")
        s = self.store
        if cfg.variant == "conv":
            c_in = 1
            for i, c in enumerate(cfg.channels, start=1):
                init_linear(s, f"conv{i}", 9 * c_in, c, rng)
                c_in = c
            init_linear(s, "proj", c_in, cfg.d, rng, bias=False)
        else:
            n_patches = (cfg.image_size // cfg.patch) ** 2
            init_linear(s, "patch", cfg.patch * cfg.patch, cfg.d_model, rng)
            s.add("pos_emb", rng.normal(0.0, 0.02, size=(n_patches, cfg.d_model)))
            for i in range(cfg.layers):
                init_block(s, f"block{i}", cfg.d_model, cfg.d_model * cfg.mlp_ratio, rng)
            init_layer_norm(s, "ln_f", cfg.d_model)
            init_linear(s, "proj", cfg.d_model, cfg.d, rng, bias=False)

    def named_parameters(self) -> dict[str, Tensor]:
        return self.store.named_parameters()

    def _check(self, x: np.ndarray) -> None:
        side = self.cfg.image_size
        if x.ndim != 4 or x.shape[1:] != (side, side, 1):
            raise ShapeError("encode_image", x.shape, detail=f"expected (B, {side}, {side}, 1)")

    def features(self, images) -> Tensor:
        """Last spatial feature map: (B, h, w, C) for conv, (B, tokens, d_model) for attention."""
        x, _ = _as_batch(images)
        self._check(x)
        x = standardize(x)
        s = self.store
        if self.cfg.variant == "conv":
            h = Tensor(x)
            for i in range(1, 4):
                if i > 1:
                    h = G.avg_pool2(h)
                h = G.relu(linear(s, f"conv{i}", G.unfold(h, 3)))
            return h
        p = self.cfg.patch
        b, side = x.shape[0], self.cfg.image_size
        n = side // p
        patches = x[:, :, :, 0].reshape(b, n, p, n, p).transpose(0, 1, 3, 2, 4).reshape(b, n * n, p * p)
        h = linear(s, "patch", Tensor(patches)) + s["pos_emb"]
        for i in range(self.cfg.layers):
            h = block(s, f"block{i}", h, self.cfg.heads)
        return layer_norm(s, "ln_f", h)

    def __call__(self, images) -> Tensor:
        _, single = _as_batch(images)
        f = self.features(images)
        if self.cfg.variant == "conv":
            pooled = G.mean(G.avg_pool2(f), axis=(1, 2))
        else:
            pooled = G.mean(f, axis=1)
        out = linear(self.store, "proj", pooled)
        return out[0] if single else out

    def spatial_map(self, images) -> np.ndarray:
        """Per-location activation strength (B, h, w) of the last feature layer."""
        with G.no_grad():
            f = self.features(images).data
        if self.cfg.variant == "conv":
            return f.mean(axis=-1)
        n = self.cfg.image_size // self.cfg.patch
        return np.linalg.norm(f, axis=-1).reshape(f.shape[0], n, n)
