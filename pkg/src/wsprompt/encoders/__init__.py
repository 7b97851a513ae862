from .image import VARIANTS, EncoderConfig, ImageEncoder
from .model import TAU_INIT, VisionLanguageModel
from .text import TextEncoder
from .tokenizer import BOS, EOS, PAD, SPECIALS, UNK, Tokenizer

__all__ = [
    "VARIANTS", "EncoderConfig", "ImageEncoder", "TAU_INIT", "VisionLanguageModel", "TextEncoder",
    "BOS", "EOS", "PAD", "SPECIALS", "UNK", "Tokenizer",
]
