"""Ground-truth semantic similarity targets from label vectors."""

from __future__ import annotations

import numpy as np


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine of rows; any pair involving an all-zero row scores 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    an = np.divide(a, na, out=np.zeros_like(a), where=na > 0)
    bn = np.divide(b, nb, out=np.zeros_like(b), where=nb > 0)
    return an @ bn.T


def softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def gt_similarity(image_labels, text_labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Label cosine matrix and its two normalisations (no temperature).

    Returns ``(S, y_img2txt, y_txt2img)``, all shaped (n_images, n_texts):
    rows of ``y_img2txt`` and columns of ``y_txt2img`` are distributions.
    """
    image_labels = np.atleast_2d(np.asarray(image_labels))
    text_labels = np.atleast_2d(np.asarray(text_labels))
    if image_labels.shape[0] == 0 or text_labels.shape[0] == 0 or image_labels.size == 0 or text_labels.size == 0:
        raise ValueError("gt_similarity: empty batch")
    s = cosine_rows(image_labels, text_labels)
    return s, softmax(s, axis=1), softmax(s, axis=0)
