"""Deterministic mini-batch training loop.

Every run is a pure function of (config, dataset): parameter init, epoch
shuffling, caption choice and patch-group sampling all draw from one seeded
generator, and gradient accumulation is single-threaded, so equal seeds
give bit-identical checkpoints.

Batches hold one caption per distinct image. At desk scale an in-batch
repeat of an image would make its other captions false negatives for the
hardest-negative mining, which full-size training avoids only by virtue of
its huge image pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderParams, init_encoder_params
from .errors import DomainError, TrainingDivergedError
from .losses import (
    PARAM_FIELDS,
    EncoderGrads,
    LossBreakdown,
    LossConfig,
    TrainingBatch,
    grad_total_loss,
)
from .sampling import PatchGrid, SamplingConfig, draw_plan
from .similarity import MetaBlockConfig
from .validation import check_positive_int

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

OPTIMIZERS = ("adamw", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale training schedule: constant learning rate that steps down
    once at ``decay_epoch``, decoupled weight decay, seeded end to end."""

    block_cfg: MetaBlockConfig
    sampling_cfg: SamplingConfig
    loss_cfg: LossConfig = LossConfig()
    epochs: int = 30
    batch_size: int = 32
    lr_initial: float = 5e-4
    lr_decayed: float = 5e-5
    decay_epoch: int = 20
    weight_decay: float = 1e-4
    seed: int = 0
    optimizer: str = "adamw"
    method: str = "aeom"
    use_reg: bool = True

    def __post_init__(self):
        check_positive_int(self.epochs, "epochs")
        if self.batch_size < 2:
            raise DomainError("batch_size must be at least 2")
        if self.lr_initial <= 0 or self.lr_decayed <= 0:
            raise DomainError("learning rates must be positive")
        if not 0 <= self.decay_epoch <= self.epochs:
            raise DomainError("decay_epoch must lie within [0, epochs]")
        if self.weight_decay < 0:
            raise DomainError("weight_decay must be nonnegative")
        if self.optimizer not in OPTIMIZERS:
            raise DomainError(f"optimizer must be one of {OPTIMIZERS}")
        if self.method not in ("aeom", "cosine"):
            raise DomainError("method must be 'aeom' or 'cosine'")
        if self.sampling_cfg.group_count != self.block_cfg.n_views:
            raise DomainError(
                "sampling group_count must equal block n_views "
                f"({self.sampling_cfg.group_count} vs {self.block_cfg.n_views})"
            )

    def lr_at(self, epoch: int) -> float:
        return self.lr_initial if epoch < self.decay_epoch else self.lr_decayed


@dataclass
class TrainState:
    """Everything a run accumulates; checkpoints round-trip it bit-exactly."""

    config: TrainConfig
    params: EncoderParams
    opt_m: EncoderGrads
    opt_v: EncoderGrads
    rng: np.random.Generator
    step: int = 0
    history: list[LossBreakdown] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)

    def copy(self) -> "TrainState":
        clone_rng = np.random.Generator(np.random.PCG64())
        clone_rng.bit_generator.state = self.rng.bit_generator.state
        return TrainState(
            config=self.config,
            params=self.params.copy(),
            opt_m=EncoderGrads(**{f: getattr(self.opt_m, f).copy() for f in PARAM_FIELDS}),
            opt_v=EncoderGrads(**{f: getattr(self.opt_v, f).copy() for f in PARAM_FIELDS}),
            rng=clone_rng,
            step=self.step,
            history=list(self.history),
            lr_history=list(self.lr_history),
        )

    def equals(self, other: "TrainState") -> bool:
        """Bit-exact equality of params, moments, rng state and history."""
        if self.step != other.step or self.config != other.config:
            return False
        if self.rng.bit_generator.state != other.rng.bit_generator.state:
            return False
        if not self.params.equals(other.params):
            return False
        for f in PARAM_FIELDS:
            if getattr(self.opt_m, f).tobytes() != getattr(other.opt_m, f).tobytes():
                return False
            if getattr(self.opt_v, f).tobytes() != getattr(other.opt_v, f).tobytes():
                return False
        return self.history == other.history and self.lr_history == other.lr_history


def init_state(config: TrainConfig, d_in: int) -> TrainState:
    rng = np.random.default_rng(config.seed)
    params = init_encoder_params(d_in, config.block_cfg.d1, rng)
    return TrainState(
        config=config,
        params=params,
        opt_m=EncoderGrads.zeros_like(params),
        opt_v=EncoderGrads.zeros_like(params),
        rng=rng,
    )


def _apply_update(state: TrainState, grads: EncoderGrads, lr: float) -> None:
    cfg = state.config
    wd = cfg.weight_decay
    if cfg.optimizer == "sgd":
        for name in PARAM_FIELDS:
            theta = getattr(state.params, name)
            theta -= lr * getattr(grads, name) + lr * wd * theta
        return
    t = state.step + 1
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name in PARAM_FIELDS:
        theta = getattr(state.params, name)
        g = getattr(grads, name)
        m = getattr(state.opt_m, name)
        v = getattr(state.opt_v, name)
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        theta -= lr * ((m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)) + lr * wd * theta


def train_step(state: TrainState, batch: TrainingBatch, lr: float | None = None) -> TrainState:
    """One optimizer update in place; returns the same state for chaining."""
    cfg = state.config
    if lr is None:
        lr = cfg.lr_initial
    breakdown, grads = grad_total_loss(
        batch,
        state.params,
        cfg.block_cfg,
        cfg.loss_cfg,
        method=cfg.method,
        include_reg=cfg.use_reg,
    )
    if not np.isfinite(breakdown.total):
        norms = {f: float(np.linalg.norm(getattr(state.params, f))) for f in PARAM_FIELDS}
        raise TrainingDivergedError(
            f"non-finite loss at step {state.step}: l_m={breakdown.l_m}, "
            f"l_reg={breakdown.l_reg}, batch_size={batch.size}, param_norms={norms}"
        )
    _apply_update(state, grads, lr)
    state.step += 1
    state.history.append(breakdown)
    state.lr_history.append(lr)
    return state


def _captions_by_image(caption_to_image: np.ndarray, num_images: int) -> list[np.ndarray]:
    groups: list[list[int]] = [[] for _ in range(num_images)]
    for cap_idx, img in enumerate(caption_to_image):
        groups[int(img)].append(cap_idx)
    return [np.asarray(g, dtype=np.int64) for g in groups]


def fit(config: TrainConfig, dataset) -> TrainState:
    """Train on a multi-view dataset and return the final state.

    ``dataset`` needs ``patch_features`` (N, cells, d_in), ``token_features``
    (C, tokens, d_in), ``gt`` and ``grid``. Patch groups are redrawn every
    epoch, and each batch pairs distinct images with one of their captions.
    """
    patch_features = np.asarray(dataset.patch_features, dtype=np.float64)
    token_means_all = np.asarray(dataset.token_features, dtype=np.float64).mean(axis=1)
    num_images = patch_features.shape[0]
    if num_images == 0:
        raise DomainError("dataset is empty")
    grid: PatchGrid = dataset.grid
    if patch_features.shape[1] != grid.cells:
        raise DomainError("patch feature rows do not match the dataset grid")

    state = init_state(config, d_in=patch_features.shape[2])
    rng = state.rng
    caps_of = _captions_by_image(
        np.asarray(dataset.gt.caption_to_image, dtype=np.int64), num_images
    )
    n_views = config.block_cfg.n_views

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(num_images)
        for start in range(0, num_images, config.batch_size):
            chunk = order[start : start + config.batch_size]
            if chunk.size < 2:
                continue
            group_means = np.empty((chunk.size, n_views, patch_features.shape[2]))
            token_means = np.empty((chunk.size, token_means_all.shape[1]))
            for b, img in enumerate(chunk):
                plan = draw_plan(grid, config.sampling_cfg, rng)
                feats = patch_features[img]
                for g, group in enumerate(plan.groups):
                    group_means[b, g] = feats[np.asarray(group, dtype=np.int64)].mean(axis=0)
                caps = caps_of[int(img)]
                token_means[b] = token_means_all[caps[rng.integers(caps.size)]]
            train_step(
                state,
                TrainingBatch(group_means=group_means, token_means=token_means),
                lr,
            )
    return state


def save_checkpoint(state: TrainState, path) -> None:
    from . import store

    store.write_checkpoint(state, path)


def load_checkpoint(path) -> TrainState:
    from . import store

    return store.read_checkpoint(path)
