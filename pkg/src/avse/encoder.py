"""Small trainable linear encoders for patches and tokens.

Each sampled patch group is mean-pooled and projected to a view embedding of
width ``d1``; an image embedding is the concatenation of its view embeddings.
Token features are mean-pooled and projected to a single ``d1`` text
embedding, so image embeddings are ``n_views`` times longer than text ones.

Pooling commutes with the linear projection, so the mean is taken first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .sampling import SamplePlan
from .validation import as_float_array, check_positive_int


@dataclass
class EncoderParams:
    """Trainable projections and biases for both modalities."""

    patch_proj: np.ndarray  # (d_in, d1)
    text_proj: np.ndarray   # (d_in, d1)
    patch_bias: np.ndarray  # (d1,)
    text_bias: np.ndarray   # (d1,)

    @property
    def d_in(self) -> int:
        return self.patch_proj.shape[0]

    @property
    def d1(self) -> int:
        return self.patch_proj.shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            patch_proj=self.patch_proj.copy(),
            text_proj=self.text_proj.copy(),
            patch_bias=self.patch_bias.copy(),
            text_bias=self.text_bias.copy(),
        )

    def equals(self, other: "EncoderParams") -> bool:
        """Bitwise equality of all parameter tensors."""
        return (
            self.patch_proj.tobytes() == other.patch_proj.tobytes()
            and self.text_proj.tobytes() == other.text_proj.tobytes()
            and self.patch_bias.tobytes() == other.patch_bias.tobytes()
            and self.text_bias.tobytes() == other.text_bias.tobytes()
        )


def init_encoder_params(d_in: int, d1: int, rng: np.random.Generator) -> EncoderParams:
    """Gaussian projections scaled by 1/sqrt(d_in), zero biases."""
    check_positive_int(d_in, "d_in")
    check_positive_int(d1, "d1")
    scale = 1.0 / np.sqrt(d_in)
    return EncoderParams(
        patch_proj=rng.normal(0.0, scale, size=(d_in, d1)),
        text_proj=rng.normal(0.0, scale, size=(d_in, d1)),
        patch_bias=np.zeros(d1),
        text_bias=np.zeros(d1),
    )


@dataclass(frozen=True)
class MultiViewImageEmbedding:
    """Per-view embeddings of one image plus their concatenation."""

    views: tuple[np.ndarray, ...]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate(self.views)


def encode_view(params: EncoderParams, group_features: np.ndarray) -> np.ndarray:
    """Encode one patch group: mean over patches, project, add bias."""
    feats = as_float_array(group_features, "group_features", ndim=2)
    if feats.shape[0] < 1:
        raise DomainError("group must contain at least one patch")
    if feats.shape[1] != params.d_in:
        raise DomainError(
            f"feature width {feats.shape[1]} does not match encoder d_in {params.d_in}"
        )
    return feats.mean(axis=0) @ params.patch_proj + params.patch_bias


def encode_image(
    params: EncoderParams, plan: SamplePlan, patch_features: np.ndarray
) -> MultiViewImageEmbedding:
    """Encode every group of ``plan`` against the image's patch features.

    ``patch_features`` holds one row per grid cell in row-major order.
    """
    feats = as_float_array(patch_features, "patch_features", ndim=2)
    if feats.shape[0] != plan.grid.cells:
        raise DomainError(
            f"expected {plan.grid.cells} patch rows, got {feats.shape[0]}"
        )
    views = []
    for group in plan.groups:
        idx = np.asarray(group, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= feats.shape[0]):
            raise DomainError("plan group index out of bounds")
        views.append(encode_view(params, feats[idx]))
    return MultiViewImageEmbedding(views=tuple(views))


def encode_text(params: EncoderParams, token_features: np.ndarray) -> np.ndarray:
    """Encode a caption: mean over tokens, project, add bias."""
    feats = as_float_array(token_features, "token_features", ndim=2)
    if feats.shape[0] < 1:
        raise DomainError("caption must contain at least one token")
    if feats.shape[1] != params.d_in:
        raise DomainError(
            f"feature width {feats.shape[1]} does not match encoder d_in {params.d_in}"
        )
    return feats.mean(axis=0) @ params.text_proj + params.text_bias


def encode_views_batch(params: EncoderParams, group_means: np.ndarray) -> np.ndarray:
    """Batch view encoding from precomputed group means.

    ``group_means`` is (B, n_views, d_in); the result is (B, n_views, d1).
    Identical to per-image :func:`encode_image` because pooling is linear.
    """
    means = as_float_array(group_means, "group_means", ndim=3)
    return means @ params.patch_proj + params.patch_bias


def encode_texts_batch(params: EncoderParams, token_means: np.ndarray) -> np.ndarray:
    """Batch text encoding from precomputed token means: (B, d1)."""
    means = as_float_array(token_means, "token_means", ndim=2)
    return means @ params.text_proj + params.text_bias
