from .augment import augment, hflip
from .generate import (
    SPLITS,
    CorpusConfig,
    CorpusError,
    SampleRecord,
    compose_report,
    draw_findings,
    generate_corpus,
    load_corpus,
    make_sample,
    render,
    sample_rng,
)
from .labels import extract_labels, fix_no_finding, is_valid_label_vector, sentence_filter, split_sentences, words
from .similarity import cosine_rows, gt_similarity
from .vocab import BASE_CLASSES, DEFAULT_VOCAB, OBSERVATIONS, SYNONYMS, UNSEEN_CLASSES, ObservationVocabulary

__all__ = [
    "augment", "hflip", "SPLITS", "CorpusConfig", "CorpusError", "SampleRecord", "compose_report",
    "draw_findings", "generate_corpus", "load_corpus", "make_sample", "render", "sample_rng",
    "extract_labels", "fix_no_finding", "is_valid_label_vector", "sentence_filter", "split_sentences",
    "words", "cosine_rows", "gt_similarity", "BASE_CLASSES", "DEFAULT_VOCAB", "OBSERVATIONS", "SYNONYMS",
    "UNSEEN_CLASSES", "ObservationVocabulary",
]
