from __future__ import annotations

import numpy as np

from .. import grad as G
from ..grad import Tensor
from .image import EncoderConfig, ImageEncoder
from .text import TextEncoder
from .tokenizer import Tokenizer

# unit scale, matching the untempered label-similarity targets
TAU_INIT = 1.0


class VisionLanguageModel:
    """Image encoder, text encoder and the shared log-temperature."""

    def __init__(self, cfg: EncoderConfig, tokenizer: Tokenizer, seed: int = 0, tau_init: float = TAU_INIT):
        if tau_init <= 0:
            raise ValueError(f"tau_init must be positive, got {tau_init}")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.tokenizer = tokenizer
        self.image = ImageEncoder(cfg, rng)
        self.text = TextEncoder(cfg, len(tokenizer), rng)
        self.log_tau = Tensor(np.array([np.log(tau_init)], dtype=np.float32), requires_grad=True)

    @property
    def tau(self) -> Tensor:
        return G.exp(self.log_tau)

    def named_parameters(self) -> dict[str, Tensor]:
        params = {}
        params.update(self.image.named_parameters())
        params.update(self.text.named_parameters())
        params["tau.log"] = self.log_tau
        return params

    def encoder_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if not k.startswith("tau.")}

    def freeze(self) -> None:
        for p in self.named_parameters().values():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.named_parameters().values():
            p.requires_grad = True

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.image.store.load(tensors)
        self.text.store.load(tensors)
        self.log_tau.data = np.asarray(tensors["tau.log"], dtype=np.float32).reshape(1).copy()

    def encode_texts(self, texts: list[str]) -> Tensor:
        return self.text(self.tokenizer.encode_batch(texts))
