"""Parameter store and transformer building blocks."""

from __future__ import annotations

import numpy as np

from .. import grad as G
from ..grad import Tensor

DTYPE = np.float32


class ParamStore:
    """Flat ``name -> Tensor`` mapping shared by all learnable components."""

    def __init__(self, prefix: str):
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(value, dtype=DTYPE), requires_grad=True)
        self.params[f"{self.prefix}.{name}"] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def load(self, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in tensors:
                raise KeyError(f"missing tensor {name!r}")
            arr = np.asarray(tensors[name], dtype=DTYPE)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: stored shape {arr.shape} != expected {p.shape}")
            p.data = arr.copy()


def init_linear(store: ParamStore, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                bias: bool = True) -> None:
    store.add(f"{name}.w", rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out)))
    if bias:
        store.add(f"{name}.b", np.zeros(n_out))


def linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    y = x @ store[f"{name}.w"]
    b = store.params.get(f"{store.prefix}.{name}.b")
    return y if b is None else y + b


def init_layer_norm(store: ParamStore, name: str, dim: int) -> None:
    store.add(f"{name}.g", np.ones(dim))
    store.add(f"{name}.b", np.zeros(dim))


def layer_norm(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return G.layer_norm(x, store[f"{name}.g"], store[f"{name}.b"])


def init_block(store: ParamStore, name: str, dim: int, hidden: int, rng: np.random.Generator) -> None:
    init_layer_norm(store, f"{name}.ln1", dim)
    for proj in ("q", "k", "v", "o"):
        init_linear(store, f"{name}.attn.{proj}", dim, dim, rng)
    init_layer_norm(store, f"{name}.ln2", dim)
    init_linear(store, f"{name}.mlp.fc1", dim, hidden, rng)
    init_linear(store, f"{name}.mlp.fc2", hidden, dim, rng)


def attention(store: ParamStore, name: str, x: Tensor, heads: int, key_bias: np.ndarray | None) -> Tensor:
    """Multi-head self-attention over (B, T, D); ``key_bias`` is an additive
    (B, T) mask on keys (``-inf``-like for padding)."""
    b, t, d = x.shape
    dh = d // heads

    def split(z: Tensor) -> Tensor:
        return G.transpose(G.reshape(z, (b, t, heads, dh)), (0, 2, 1, 3))

    q = split(linear(store, f"{name}.q", x))
    k = split(linear(store, f"{name}.k", x))
    v = split(linear(store, f"{name}.v", x))
    scores = q @ G.transpose(k)
    if key_bias is not None:
        scores = scores + Tensor(key_bias[:, None, None, :].astype(x.dtype))
    att = G.softmax(scores, axis=-1, temperature=float(np.sqrt(dh)))
    out = G.reshape(G.transpose(att @ v, (0, 2, 1, 3)), (b, t, d))
    return linear(store, f"{name}.o", out)


def block(store: ParamStore, name: str, x: Tensor, heads: int, key_bias: np.ndarray | None = None) -> Tensor:
    """Pre-norm transformer block with a ReLU MLP."""
    x = x + attention(store, f"{name}.attn", layer_norm(store, f"{name}.ln1", x), heads, key_bias)
    h = G.relu(linear(store, f"{name}.mlp.fc1", layer_norm(store, f"{name}.ln2", x)))
    return x + linear(store, f"{name}.mlp.fc2", h)
