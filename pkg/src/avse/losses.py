"""Training objectives and their analytic gradients.

Two terms are optimised jointly:

* a hinge triplet loss over the in-batch similarity matrix, mining the
  hardest negative per row (text side) and per column (image side), and
* a redundancy-reduction term that drives the dimension-wise
  cross-correlation matrix between every pair of view batches toward the
  identity.

Gradients are hand-derived for the linear encoder. The column max routes
its gradient to the argmax image block (lowest index on ties) and a hinge
that sits exactly at zero contributes a zero subgradient, so the analytic
gradient matches central finite differences everywhere away from those
kinks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderParams, encode_texts_batch, encode_views_batch
from .errors import DomainError
from .similarity import NORM_EPS, MetaBlockConfig, SimilarityMatrix
from .validation import as_float_array, check_nonnegative

PARAM_FIELDS = ("patch_proj", "text_proj", "patch_bias", "text_bias")


@dataclass(frozen=True)
class LossConfig:
    """Margin for the triplet term and weight for the off-diagonal
    regulariser term; ``lambda_reg=None`` resolves to ``1 / (d1 - 1)``."""

    margin: float = 0.2
    lambda_reg: float | None = None

    def __post_init__(self):
        check_nonnegative(self.margin, "margin")
        if self.lambda_reg is not None and self.lambda_reg <= 0:
            raise DomainError("lambda_reg must be positive")

    def lambda_for(self, d1: int) -> float:
        if self.lambda_reg is not None:
            return self.lambda_reg
        if d1 < 2:
            raise DomainError("default lambda_reg needs d1 >= 2")
        return 1.0 / (d1 - 1)


@dataclass(frozen=True)
class LossBreakdown:
    l_m: float
    l_reg: float

    @property
    def total(self) -> float:
        return self.l_m + self.l_reg


@dataclass
class EncoderGrads:
    """Gradient of the total loss w.r.t. every encoder parameter."""

    patch_proj: np.ndarray
    text_proj: np.ndarray
    patch_bias: np.ndarray
    text_bias: np.ndarray

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "EncoderGrads":
        return cls(
            patch_proj=np.zeros_like(params.patch_proj),
            text_proj=np.zeros_like(params.text_proj),
            patch_bias=np.zeros_like(params.patch_bias),
            text_bias=np.zeros_like(params.text_bias),
        )

    def max_abs(self) -> float:
        return max(
            float(np.abs(getattr(self, f)).max(initial=0.0)) for f in PARAM_FIELDS
        )


@dataclass(frozen=True)
class TrainingBatch:
    """One matched mini-batch, reduced to the statistics the linear encoder
    needs: per-image mean features of every sampled group and per-caption
    mean token features. Row ``b`` of both arrays is a positive pair."""

    group_means: np.ndarray  # (B, n_views, d_in)
    token_means: np.ndarray  # (B, d_in)

    def __post_init__(self):
        if self.group_means.ndim != 3 or self.token_means.ndim != 2:
            raise DomainError("group_means must be 3D and token_means 2D")
        if self.group_means.shape[0] != self.token_means.shape[0]:
            raise DomainError("image and text batch sizes differ")
        if self.group_means.shape[2] != self.token_means.shape[1]:
            raise DomainError("image and text feature widths differ")

    @property
    def size(self) -> int:
        return self.group_means.shape[0]


def make_training_batch(patch_features, plans, token_features) -> TrainingBatch:
    """Pool raw per-item features into a :class:`TrainingBatch`.

    ``patch_features[b]`` is the (cells, d_in) feature matrix of image ``b``,
    sampled according to ``plans[b]``; ``token_features[b]`` is the
    (tokens, d_in) matrix of its matched caption.
    """
    if not (len(patch_features) == len(plans) == len(token_features)):
        raise DomainError("patch_features, plans and token_features lengths differ")
    group_means = []
    token_means = []
    for feats, plan, tokens in zip(patch_features, plans, token_features):
        feats = as_float_array(feats, "patch_features", ndim=2)
        tokens = as_float_array(tokens, "token_features", ndim=2)
        group_means.append([feats[np.asarray(g, dtype=np.int64)].mean(axis=0) for g in plan.groups])
        token_means.append(tokens.mean(axis=0))
    return TrainingBatch(
        group_means=np.asarray(group_means, dtype=np.float64),
        token_means=np.asarray(token_means, dtype=np.float64),
    )


def cross_correlation(view_a: np.ndarray, view_b: np.ndarray) -> np.ndarray:
    """Dimension-wise cross-correlation of two view batches.

    ``C[i, j]`` is the batch dot product of column ``i`` of ``view_a`` with
    column ``j`` of ``view_b``, divided by both column norms. Every entry
    lies in [-1, 1].
    """
    a = as_float_array(view_a, "view_a", ndim=2)
    b = as_float_array(view_b, "view_b", ndim=2)
    if a.shape != b.shape:
        raise DomainError(f"view shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < 2:
        raise DomainError("cross-correlation needs a batch of at least 2")
    na = np.maximum(np.linalg.norm(a, axis=0), NORM_EPS)
    nb = np.maximum(np.linalg.norm(b, axis=0), NORM_EPS)
    return (a / na).T @ (b / nb)


def _reg_pair_terms(c: np.ndarray, lambda_reg: float) -> float:
    diag = np.diagonal(c)
    off_sq = (c * c).sum() - (diag * diag).sum()
    return float(((1.0 - diag) ** 2).sum() + lambda_reg * off_sq)


def reg_loss(views, lambda_reg: float) -> float:
    """Redundancy-reduction loss summed over all unordered view pairs."""
    if len(views) < 2:
        raise DomainError("reg_loss needs at least two views")
    check_nonnegative(lambda_reg, "lambda_reg")
    total = 0.0
    for g in range(len(views)):
        for h in range(g + 1, len(views)):
            total += _reg_pair_terms(cross_correlation(views[g], views[h]), lambda_reg)
    return total


def triplet_loss(sim, margin: float) -> float:
    """Hinge triplet loss with in-batch hardest negatives.

    ``sim`` is the square matched-batch similarity matrix (images in rows,
    texts in columns, positives on the diagonal), either raw or wrapped in
    a :class:`SimilarityMatrix`.
    """
    scores = sim.scores if isinstance(sim, SimilarityMatrix) else sim
    s = as_float_array(scores, "sim", ndim=2)
    if s.shape[0] != s.shape[1]:
        raise DomainError(f"matched-batch similarity must be square, got {s.shape}")
    check_nonnegative(margin, "margin")
    pos = np.diagonal(s)
    masked = s.copy()
    np.fill_diagonal(masked, -np.inf)
    hardest_text = masked.max(axis=1)   # per image: best non-matching caption
    hardest_image = masked.max(axis=0)  # per caption: best non-matching image
    row = np.maximum(margin - pos + hardest_text, 0.0)
    col = np.maximum(margin - pos + hardest_image, 0.0)
    return float(row.sum() + col.sum())


# ---------------------------------------------------------------------------
# Forward pass with caches, shared by total_loss and grad_total_loss.
# ---------------------------------------------------------------------------


@dataclass
class _Forward:
    views: np.ndarray      # (B, n, d1)
    texts: np.ndarray      # (B, d1)
    scores: np.ndarray     # (B, B)
    breakdown: LossBreakdown
    method: str
    # aeom caches
    v_unit: np.ndarray | None = None   # (B, p, d2)
    v_norm: np.ndarray | None = None   # (B, p) clipped
    v_raw: np.ndarray | None = None    # (B, p) raw norms
    t_unit: np.ndarray | None = None   # (B, q, d2)
    t_norm: np.ndarray | None = None
    t_raw: np.ndarray | None = None
    argmax_block: np.ndarray | None = None  # (B, B, q)
    # cosine caches
    pool_unit: np.ndarray | None = None
    pool_norm: np.ndarray | None = None
    pool_raw: np.ndarray | None = None
    # triplet structure
    hardest_text: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    hardest_image: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    text_active: np.ndarray = field(default_factory=lambda: np.empty(0, bool))
    image_active: np.ndarray = field(default_factory=lambda: np.empty(0, bool))


def _clip_norms(blocks: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    raw = np.linalg.norm(blocks, axis=-1)
    clipped = np.maximum(raw, NORM_EPS)
    return blocks / clipped[..., None], clipped, raw


def _forward(
    batch: TrainingBatch,
    params: EncoderParams,
    block_cfg: MetaBlockConfig,
    loss_cfg: LossConfig,
    method: str,
    include_reg: bool,
) -> _Forward:
    if batch.size < 2:
        raise DomainError("matched batch must contain at least 2 pairs")
    if batch.group_means.shape[1] != block_cfg.n_views:
        raise DomainError(
            f"batch has {batch.group_means.shape[1]} views, config expects {block_cfg.n_views}"
        )
    b = batch.size
    views = encode_views_batch(params, batch.group_means)      # (B, n, d1)
    texts = encode_texts_batch(params, batch.token_means)      # (B, d1)

    fwd = _Forward(views=views, texts=texts, scores=np.empty(0), method=method,
                   breakdown=LossBreakdown(0.0, 0.0))
    if method == "aeom":
        v_unit, v_norm, v_raw = _clip_norms(views.reshape(b, block_cfg.p, block_cfg.d2))
        t_unit, t_norm, t_raw = _clip_norms(texts.reshape(b, block_cfg.q, block_cfg.d2))
        aff = np.einsum("apk,bqk->abpq", v_unit, t_unit)
        fwd.argmax_block = aff.argmax(axis=2)
        scores = aff.max(axis=2).sum(axis=2)
        fwd.v_unit, fwd.v_norm, fwd.v_raw = v_unit, v_norm, v_raw
        fwd.t_unit, fwd.t_norm, fwd.t_raw = t_unit, t_norm, t_raw
    elif method == "cosine":
        pooled = views.mean(axis=1)
        pool_unit, pool_norm, pool_raw = _clip_norms(pooled)
        t_unit, t_norm, t_raw = _clip_norms(texts)
        scores = pool_unit @ t_unit.T
        fwd.pool_unit, fwd.pool_norm, fwd.pool_raw = pool_unit, pool_norm, pool_raw
        fwd.t_unit, fwd.t_norm, fwd.t_raw = t_unit, t_norm, t_raw
    else:
        raise DomainError(f"method must be 'aeom' or 'cosine', got {method!r}")
    fwd.scores = scores

    pos = np.diagonal(scores)
    masked = scores.copy()
    np.fill_diagonal(masked, -np.inf)
    fwd.hardest_text = masked.argmax(axis=1)
    fwd.hardest_image = masked.argmax(axis=0)
    row_hinge = loss_cfg.margin - pos + masked.max(axis=1)
    col_hinge = loss_cfg.margin - pos + masked.max(axis=0)
    fwd.text_active = row_hinge > 0.0
    fwd.image_active = col_hinge > 0.0
    l_m = float(row_hinge[fwd.text_active].sum() + col_hinge[fwd.image_active].sum())

    l_reg = 0.0
    if include_reg:
        lam = loss_cfg.lambda_for(block_cfg.d1)
        view_list = [views[:, g, :] for g in range(block_cfg.n_views)]
        l_reg = reg_loss(view_list, lam)
    fwd.breakdown = LossBreakdown(l_m=l_m, l_reg=l_reg)
    return fwd


def total_loss(
    batch: TrainingBatch,
    params: EncoderParams,
    block_cfg: MetaBlockConfig,
    loss_cfg: LossConfig,
    method: str = "aeom",
    include_reg: bool = True,
) -> LossBreakdown:
    """Joint objective of one matched batch: triplet term plus regulariser."""
    return _forward(batch, params, block_cfg, loss_cfg, method, include_reg).breakdown


def _unit_backward(grad_unit, unit, norm, raw):
    """Backprop through x -> x / max(|x|, eps) along the last axis.

    When the norm is clipped the map is linear, so the projection term
    vanishes.
    """
    proj = (unit * grad_unit).sum(axis=-1, keepdims=True)
    live = (raw > NORM_EPS)[..., None]
    return (grad_unit - np.where(live, unit * proj, 0.0)) / norm[..., None]


def _triplet_score_grad(fwd: _Forward) -> np.ndarray:
    """d(l_m)/d(scores): +-1 per active hinge, hardest negatives only."""
    b = fwd.scores.shape[0]
    g = np.zeros((b, b))
    rows = np.flatnonzero(fwd.text_active)
    g[rows, rows] -= 1.0
    g[rows, fwd.hardest_text[rows]] += 1.0
    cols = np.flatnonzero(fwd.image_active)
    g[cols, cols] -= 1.0
    g[fwd.hardest_image[cols], cols] += 1.0
    return g


def _reg_backward(views: np.ndarray, lam: float) -> np.ndarray:
    """d(l_reg)/d(views) for views of shape (B, n, d1)."""
    b, n, d1 = views.shape
    grad = np.zeros_like(views)
    for g in range(n):
        for h in range(g + 1, n):
            a, bv = views[:, g, :], views[:, h, :]
            na_raw = np.linalg.norm(a, axis=0)
            nb_raw = np.linalg.norm(bv, axis=0)
            na = np.maximum(na_raw, NORM_EPS)
            nb = np.maximum(nb_raw, NORM_EPS)
            ah, bh = a / na, bv / nb
            c = ah.T @ bh
            m = 2.0 * lam * c
            np.fill_diagonal(m, -2.0 * (1.0 - np.diagonal(c)))
            d_ah = bh @ m.T
            d_bh = ah @ m
            live_a = na_raw > NORM_EPS
            live_b = nb_raw > NORM_EPS
            proj_a = np.where(live_a, (ah * d_ah).sum(axis=0), 0.0)
            proj_b = np.where(live_b, (bh * d_bh).sum(axis=0), 0.0)
            grad[:, g, :] += (d_ah - ah * proj_a) / na
            grad[:, h, :] += (d_bh - bh * proj_b) / nb
    return grad


def grad_total_loss(
    batch: TrainingBatch,
    params: EncoderParams,
    block_cfg: MetaBlockConfig,
    loss_cfg: LossConfig,
    method: str = "aeom",
    include_reg: bool = True,
) -> tuple[LossBreakdown, EncoderGrads]:
    """Loss value and its analytic gradient for every encoder parameter."""
    fwd = _forward(batch, params, block_cfg, loss_cfg, method, include_reg)
    b = batch.size
    g_scores = _triplet_score_grad(fwd)

    if method == "aeom":
        p, q = block_cfg.p, block_cfg.q
        d_aff = np.zeros((b, b, p, q))
        np.put_along_axis(
            d_aff, fwd.argmax_block[:, :, None, :], g_scores[:, :, None, None], axis=2
        )
        d_vu = np.einsum("abpq,bqk->apk", d_aff, fwd.t_unit)
        d_tu = np.einsum("abpq,apk->bqk", d_aff, fwd.v_unit)
        d_vblocks = _unit_backward(d_vu, fwd.v_unit, fwd.v_norm, fwd.v_raw)
        d_tblocks = _unit_backward(d_tu, fwd.t_unit, fwd.t_norm, fwd.t_raw)
        d_views = d_vblocks.reshape(b, block_cfg.n_views, block_cfg.d1)
        d_texts = d_tblocks.reshape(b, block_cfg.d1)
    else:
        d_pu = g_scores @ fwd.t_unit
        d_tu = g_scores.T @ fwd.pool_unit
        d_pool = _unit_backward(d_pu, fwd.pool_unit, fwd.pool_norm, fwd.pool_raw)
        d_texts = _unit_backward(d_tu, fwd.t_unit, fwd.t_norm, fwd.t_raw)
        d_views = np.repeat(
            d_pool[:, None, :] / block_cfg.n_views, block_cfg.n_views, axis=1
        )

    if include_reg:
        lam = loss_cfg.lambda_for(block_cfg.d1)
        d_views = d_views + _reg_backward(fwd.views, lam)

    grads = EncoderGrads(
        patch_proj=np.einsum("bgi,bgo->io", batch.group_means, d_views),
        text_proj=batch.token_means.T @ d_texts,
        patch_bias=d_views.sum(axis=(0, 1)),
        text_bias=d_texts.sum(axis=0),
    )
    return fwd.breakdown, grads


# ---------------------------------------------------------------------------
# Finite-difference verification.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    """Per-coordinate comparison of analytic and numerical gradients.

    Coordinates whose perturbation flips the hinge/argmax structure are
    listed in ``kink_coordinates`` and excluded from ``max_relative_error``
    and ``flagged``.
    """

    max_relative_error: float
    flagged: tuple[tuple[str, int, float], ...]
    kink_coordinates: tuple[tuple[str, int], ...]
    checked: int

    def summary(self) -> str:
        lines = [
            f"coordinates checked: {self.checked}",
            f"kink-adjacent (excluded): {len(self.kink_coordinates)}",
            f"max relative error: {self.max_relative_error:.3e}",
            f"flagged (> tolerance): {len(self.flagged)}",
        ]
        lines += [
            f"  {name}[{idx}] rel_err={err:.3e}" for name, idx, err in self.flagged
        ]
        return "\n".join(lines)


def _structure_signature(fwd: _Forward):
    parts = [
        fwd.hardest_text.copy(),
        fwd.hardest_image.copy(),
        fwd.text_active.copy(),
        fwd.image_active.copy(),
    ]
    if fwd.argmax_block is not None:
        parts.append(fwd.argmax_block.copy())
    return parts


def _same_signature(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_difference_check(
    batch: TrainingBatch,
    params: EncoderParams,
    block_cfg: MetaBlockConfig,
    loss_cfg: LossConfig,
    h: float = 1e-4,
    method: str = "aeom",
    include_reg: bool = True,
    rel_tol: float = 1e-3,
) -> GradCheckReport:
    """Compare the analytic gradient against central finite differences.

    The relative error of coordinate ``x`` is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if h <= 0:
        raise DomainError("step h must be positive")
    _, grads = grad_total_loss(batch, params, block_cfg, loss_cfg, method, include_reg)
    base_sig = _structure_signature(
        _forward(batch, params, block_cfg, loss_cfg, method, include_reg)
    )

    work = params.copy()
    flagged = []
    kinks = []
    max_err = 0.0
    checked = 0
    for name in PARAM_FIELDS:
        theta = getattr(work, name)
        analytic = getattr(grads, name)
        for idx in range(theta.size):
            orig = theta.flat[idx]
            theta.flat[idx] = orig + h
            fwd_plus = _forward(batch, work, block_cfg, loss_cfg, method, include_reg)
            theta.flat[idx] = orig - h
            fwd_minus = _forward(batch, work, block_cfg, loss_cfg, method, include_reg)
            theta.flat[idx] = orig

            checked += 1
            if not (
                _same_signature(_structure_signature(fwd_plus), base_sig)
                and _same_signature(_structure_signature(fwd_minus), base_sig)
            ):
                kinks.append((name, idx))
                continue
            numeric = (fwd_plus.breakdown.total - fwd_minus.breakdown.total) / (2.0 * h)
            ana = float(analytic.flat[idx])
            err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            max_err = max(max_err, err)
            if err > rel_tol:
                flagged.append((name, idx, err))
    return GradCheckReport(
        max_relative_error=max_err,
        flagged=tuple(flagged),
        kink_coordinates=tuple(kinks),
        checked=checked,
    )
