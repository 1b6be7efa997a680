"""Blocked max-sum similarity between image and text embeddings.

An image embedding of length ``n_views * d1`` and a text embedding of length
``d1`` are each cut into contiguous blocks of width ``d2`` (``p`` image
blocks, ``q`` text blocks, ``q <= p``). The affinity matrix holds every
block-pair cosine; the similarity is the sum over text blocks of the best
matching image block:

    S = sum_j max_i A[i, j]

so each text block is free to pick a different region of the image
embedding. With one view and ``d2 == d1`` this degenerates to the plain
cosine of the full vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .validation import as_float_array, check_positive_int

# Cosine denominators are clamped below by this, so zero blocks score zero
# instead of poisoning training with NaNs.
NORM_EPS = 1e-12

SCORE_METHODS = ("aeom", "cosine")


@dataclass(frozen=True)
class MetaBlockConfig:
    """Block geometry: ``d2`` must divide ``d1``; ``p = n_views * d1 / d2``."""

    d1: int
    d2: int
    n_views: int = 2

    def __post_init__(self):
        check_positive_int(self.d1, "d1")
        check_positive_int(self.d2, "d2")
        check_positive_int(self.n_views, "n_views")
        if self.d1 % self.d2 != 0:
            raise DomainError(f"d2 ({self.d2}) must divide d1 ({self.d1})")

    @property
    def q(self) -> int:
        """Text block count."""
        return self.d1 // self.d2

    @property
    def p(self) -> int:
        """Image block count."""
        return self.n_views * self.q

    @property
    def image_dim(self) -> int:
        return self.n_views * self.d1


@dataclass(frozen=True)
class SimilarityMatrix:
    """Batched scores: ``scores[a, b]`` is image ``a`` against text ``b``."""

    scores: np.ndarray
    method: str


def split_blocks(embedding: np.ndarray, cfg: MetaBlockConfig, side: str) -> np.ndarray:
    """Cut an embedding into contiguous ``d2`` blocks, one per row.

    ``side`` is ``"image"`` (expects ``n_views * d1`` entries, yields ``p``
    rows) or ``"text"`` (expects ``d1``, yields ``q``).
    """
    vec = as_float_array(embedding, "embedding", ndim=1)
    if side == "image":
        expected, rows = cfg.image_dim, cfg.p
    elif side == "text":
        expected, rows = cfg.d1, cfg.q
    else:
        raise DomainError(f"side must be 'image' or 'text', got {side!r}")
    if vec.size != expected:
        raise DomainError(
            f"{side} embedding length {vec.size} is not {expected} (d2={cfg.d2})"
        )
    return vec.reshape(rows, cfg.d2)


def _unit_rows(blocks: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(blocks, axis=-1, keepdims=True)
    return blocks / np.maximum(norms, NORM_EPS)


def affinity_matrix(image_blocks: np.ndarray, text_blocks: np.ndarray) -> np.ndarray:
    """Cosine of every (image block, text block) pair: shape (p, q)."""
    v = as_float_array(image_blocks, "image_blocks", ndim=2)
    t = as_float_array(text_blocks, "text_blocks", ndim=2)
    if v.shape[1] != t.shape[1]:
        raise DomainError(
            f"block widths differ: {v.shape[1]} vs {t.shape[1]}"
        )
    return _unit_rows(v) @ _unit_rows(t).T


def aeom_score(image_emb: np.ndarray, text_emb: np.ndarray, cfg: MetaBlockConfig) -> float:
    """Max-sum pooled similarity of one image/text pair."""
    a = affinity_matrix(
        split_blocks(image_emb, cfg, "image"), split_blocks(text_emb, cfg, "text")
    )
    return float(a.max(axis=0).sum())


def cosine_score(pooled_image_emb: np.ndarray, text_emb: np.ndarray) -> float:
    """Plain cosine similarity of two equal-length vectors."""
    u = as_float_array(pooled_image_emb, "pooled_image_emb", ndim=1)
    v = as_float_array(text_emb, "text_emb", ndim=1)
    if u.size != v.size:
        raise DomainError(f"vector lengths differ: {u.size} vs {v.size}")
    denom = max(np.linalg.norm(u), NORM_EPS) * max(np.linalg.norm(v), NORM_EPS)
    return float(u @ v / denom)


def mean_pool_views(image_embs: np.ndarray, cfg: MetaBlockConfig) -> np.ndarray:
    """Average the ``n_views`` views of flat image embeddings down to d1."""
    arr = as_float_array(image_embs, "image_embs")
    if arr.shape[-1] != cfg.image_dim:
        raise DomainError(
            f"image embedding length {arr.shape[-1]} is not {cfg.image_dim}"
        )
    return arr.reshape(*arr.shape[:-1], cfg.n_views, cfg.d1).mean(axis=-2)


def score_matrix(
    images: np.ndarray,
    texts: np.ndarray,
    cfg: MetaBlockConfig,
    method: str = "aeom",
) -> SimilarityMatrix:
    """Score every image against every text.

    ``images`` is (B_img, n_views * d1), ``texts`` is (B_txt, d1). The
    ``cosine`` method mean-pools the views first. Entries equal the
    corresponding per-pair scores.
    """
    if method not in SCORE_METHODS:
        raise DomainError(f"method must be one of {SCORE_METHODS}, got {method!r}")
    imgs = as_float_array(images, "images", ndim=2)
    txts = as_float_array(texts, "texts", ndim=2)
    if imgs.shape[0] == 0 or txts.shape[0] == 0:
        raise DomainError("images and texts must be nonempty")
    if txts.shape[1] != cfg.d1:
        raise DomainError(f"text width {txts.shape[1]} is not d1={cfg.d1}")
    if imgs.shape[1] != cfg.image_dim:
        raise DomainError(
            f"image width {imgs.shape[1]} is not n_views*d1={cfg.image_dim}"
        )
    if method == "cosine":
        pu = _unit_rows(mean_pool_views(imgs, cfg))
        tu = _unit_rows(txts)
        return SimilarityMatrix(scores=pu @ tu.T, method="cosine")

    b_img, b_txt = imgs.shape[0], txts.shape[0]
    vu = _unit_rows(imgs.reshape(b_img * cfg.p, cfg.d2))
    tu = _unit_rows(txts.reshape(b_txt * cfg.q, cfg.d2))
    aff = (vu @ tu.T).reshape(b_img, cfg.p, b_txt, cfg.q)
    scores = aff.max(axis=1).sum(axis=2)
    return SimilarityMatrix(scores=scores, method="aeom")
