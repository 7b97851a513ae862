"""Run configuration: one JSON file, every field validated, unknown keys rejected."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .corpus import CorpusConfig
from .encoders import TAU_INIT, EncoderConfig
from .pretrain import PretrainConfig
from .promptgen import PromptConfig


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


# encoder.image_size always follows corpus.image_size
ENCODER_KEYS = ("variant", "d_model", "d", "layers", "heads", "mlp_ratio", "max_len", "patch", "channels")
PROMPT_KEYS = ("epochs", "batch", "lr", "context_std", "fewshot_epochs", "fewshot_lr", "fullshot_epochs")


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    m: int = 16
    reduction: int = 16
    tau_init: float = TAU_INIT
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    out: str = "runs/default"

    def __post_init__(self):
        self.sync()

    def sync(self) -> None:
        self.encoder.image_size = self.corpus.image_size
        self.prompt.m = self.m
        self.prompt.reduction = self.reduction

    def validate(self) -> None:
        self.sync()
        _check_int("m", self.m, 1)
        _check_int("reduction", self.reduction, 1)
        if self.encoder.d // self.reduction < 1:
            raise ConfigError("reduction", f"{self.reduction} leaves no Meta-Net units for encoder.d={self.encoder.d}")
        if self.m + 1 > self.encoder.max_len:
            raise ConfigError("m", f"m+1 prompt slots exceed encoder.max_len={self.encoder.max_len}")
        if isinstance(self.tau_init, bool) or not isinstance(self.tau_init, (int, float)) or not self.tau_init > 0:
            raise ConfigError("tau_init", f"must be a positive number, got {self.tau_init!r}")
        if (not isinstance(self.seeds, list) or not self.seeds
                or any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in self.seeds)
                or len(set(self.seeds)) != len(self.seeds)):
            raise ConfigError("seeds", f"need a non-empty list of distinct non-negative integers, got {self.seeds!r}")
        if not isinstance(self.out, str) or not self.out:
            raise ConfigError("out", "must be a non-empty path string")
        for name, sub in (("corpus", self.corpus), ("encoder", self.encoder), ("pretrain", self.pretrain),
                          ("prompt", self.prompt)):
            try:
                sub.validate()
            except ValueError as exc:
                head, _, rest = str(exc).partition(": ")
                if not rest or " " in head:
                    raise ConfigError(name, str(exc)) from exc
                where = head if head.startswith(name + ".") else f"{name}.{head}"
                raise ConfigError(where, rest) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = {k: d["encoder"][k] for k in ENCODER_KEYS}
        d["prompt"] = {k: d["prompt"][k] for k in PROMPT_KEYS}
        return d

    def hash(self) -> str:
        """SHA-256 of the canonical JSON of every result-affecting field (``out`` excluded)."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        allowed = {f.name for f in fields(cls)}
        _reject_unknown("", raw, allowed)
        kw = {}
        sections = {"corpus": (CorpusConfig, None), "encoder": (EncoderConfig, ENCODER_KEYS),
                    "pretrain": (PretrainConfig, None), "prompt": (PromptConfig, PROMPT_KEYS)}
        for name, value in raw.items():
            if name in sections:
                klass, keys = sections[name]
                kw[name] = _build(name, klass, value, keys)
            else:
                default = getattr(cls(), name)
                kw[name] = _typed(name, value, default)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError("<file>", f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON in {path}: {exc}") from exc
        return cls.from_dict(raw)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _check_int(name: str, v, lo: int) -> None:
    if isinstance(v, bool) or not isinstance(v, int) or v < lo:
        raise ConfigError(name, f"must be an integer >= {lo}, got {v!r}")


def _reject_unknown(prefix: str, raw: dict, allowed) -> None:
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}", "unknown key")


def _typed(name: str, value, default):
    """Coerce ``value`` to the kind of ``default`` (ints may stand for floats)."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, (list, dict, str)):
        ok = isinstance(value, type(default))
    else:
        ok = True
    if not ok:
        raise ConfigError(name, f"expected {type(default).__name__}, got {type(value).__name__}")
    return value


def _build(section: str, klass, raw, keys):
    if not isinstance(raw, dict):
        raise ConfigError(section, "must be a JSON object")
    allowed = keys if keys is not None else [f.name for f in fields(klass)]
    _reject_unknown(section + ".", raw, allowed)
    base = klass()
    kw = {k: _typed(f"{section}.{k}", v, getattr(base, k)) for k, v in raw.items()}
    assert is_dataclass(base)
    return klass(**{**{f.name: getattr(base, f.name) for f in fields(klass)}, **kw})
