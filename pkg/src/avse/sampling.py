"""Biased sampling of patch groups on a 2D grid.

Patches live on integer grid coordinates (row, col). A probability map puts
weight on every cell as a function of its Euclidean distance to a centre
cell; groups of distinct cells are then drawn without replacement with
probability proportional to the map, renormalising after every draw.

Three map shapes are supported:

* ``radial_bias`` - weight ``exp(-alpha * d)``, sharply favouring the centre,
* ``uniform``     - every cell equally likely,
* ``gaussian``    - weight ``exp(-d**2 / (2 * sigma**2))``.

Draws are implemented as an exponential race (smallest ``Exp(1)/w`` keys win),
which has exactly the sequential renormalised-draw distribution. Keys are
compared in log space, so extreme decay rates cannot underflow cell weights
to zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError
from .validation import check_nonnegative, check_positive_int

STRATEGIES = ("radial_bias", "uniform", "gaussian")


@dataclass(frozen=True)
class PatchGrid:
    """Rectangular patch layout with ``rows * cols`` cells, row-major."""

    rows: int
    cols: int

    def __post_init__(self):
        check_positive_int(self.rows, "rows")
        check_positive_int(self.cols, "cols")

    @property
    def cells(self) -> int:
        return self.rows * self.cols

    def contains(self, center: tuple[int, int]) -> bool:
        r, c = center
        return 0 <= r < self.rows and 0 <= c < self.cols

    def distances_from(self, center: tuple[int, int]) -> np.ndarray:
        """Euclidean distance of every cell to ``center``, in patch units."""
        r, c = center
        rr = np.arange(self.rows, dtype=np.float64)[:, None] - float(r)
        cc = np.arange(self.cols, dtype=np.float64)[None, :] - float(c)
        return np.hypot(rr, cc)


@dataclass(frozen=True)
class SamplingConfig:
    """How patch groups are drawn for the multi-view encoder.

    ``group_size=None`` resolves to ``ceil(cells / 2)`` when a plan is made,
    so two views jointly cover the grid in expectation. ``gaussian_sigma``
    only matters for the gaussian strategy and defaults to
    ``min(rows, cols) / 4``.
    """

    decay_alpha: float = 1.0
    group_count: int = 2
    group_size: int | None = None
    strategy: str = "radial_bias"
    seed: int = 0
    gaussian_sigma: float | None = None

    def __post_init__(self):
        check_nonnegative(self.decay_alpha, "decay_alpha")
        check_positive_int(self.group_count, "group_count")
        if self.group_size is not None:
            check_positive_int(self.group_size, "group_size")
        if self.strategy not in STRATEGIES:
            raise DomainError(
                f"strategy must be one of {STRATEGIES}, got {self.strategy!r}"
            )
        if self.gaussian_sigma is not None and self.gaussian_sigma <= 0:
            raise DomainError("gaussian_sigma must be positive")

    def resolved_group_size(self, grid: PatchGrid) -> int:
        size = self.group_size
        if size is None:
            size = (grid.cells + 1) // 2
        if size > grid.cells:
            raise DomainError(
                f"group_size {size} exceeds cell count {grid.cells}"
            )
        return size

    def resolved_sigma(self, grid: PatchGrid) -> float:
        if self.gaussian_sigma is not None:
            return self.gaussian_sigma
        return min(grid.rows, grid.cols) / 4.0


@dataclass(frozen=True)
class ProbabilityMap:
    """Normalised per-cell sampling distribution over a grid.

    ``log_weights`` holds the unnormalised log weights; draws use them
    directly so that cells whose normalised probability underflows remain
    drawable in the correct order.
    """

    probs: np.ndarray
    center: tuple[int, int]
    log_weights: np.ndarray

    @property
    def cells(self) -> int:
        return self.probs.size


def _map_from_log_weights(log_w: np.ndarray, center: tuple[int, int]) -> ProbabilityMap:
    w = np.exp(log_w - log_w.max())
    probs = w / w.sum()
    probs.setflags(write=False)
    log_w.setflags(write=False)
    return ProbabilityMap(probs=probs, center=(int(center[0]), int(center[1])), log_weights=log_w)


def build_probability_map(
    grid: PatchGrid, center: tuple[int, int], decay_alpha: float
) -> ProbabilityMap:
    """Radial-bias map: cell weight decays exponentially with distance.

    Weight of cell (i, j) is ``exp(-decay_alpha * d(i, j))`` where d is the
    Euclidean distance to ``center``; weights are normalised to sum to one.
    """
    check_nonnegative(decay_alpha, "decay_alpha")
    if not grid.contains(center):
        raise DomainError(f"center {center} outside {grid.rows}x{grid.cols} grid")
    log_w = -decay_alpha * grid.distances_from(center)
    return _map_from_log_weights(log_w, center)


def uniform_probability_map(grid: PatchGrid, center: tuple[int, int] = (0, 0)) -> ProbabilityMap:
    """Equal probability on every cell; ``center`` is recorded but unused."""
    if not grid.contains(center):
        raise DomainError(f"center {center} outside {grid.rows}x{grid.cols} grid")
    return _map_from_log_weights(np.zeros((grid.rows, grid.cols)), center)


def gaussian_probability_map(
    grid: PatchGrid, center: tuple[int, int], sigma: float
) -> ProbabilityMap:
    """Gaussian map: cell weight ``exp(-d**2 / (2 * sigma**2))``."""
    if sigma <= 0 or not np.isfinite(sigma):
        raise DomainError(f"sigma must be positive and finite, got {sigma}")
    if not grid.contains(center):
        raise DomainError(f"center {center} outside {grid.rows}x{grid.cols} grid")
    d = grid.distances_from(center)
    return _map_from_log_weights(-(d * d) / (2.0 * sigma * sigma), center)


def probability_map_for(
    grid: PatchGrid, center: tuple[int, int], config: SamplingConfig
) -> ProbabilityMap:
    """Build the map the configured strategy prescribes around ``center``."""
    if config.strategy == "radial_bias":
        return build_probability_map(grid, center, config.decay_alpha)
    if config.strategy == "uniform":
        return uniform_probability_map(grid, center)
    return gaussian_probability_map(grid, center, config.resolved_sigma(grid))


def _race_draw(log_w: np.ndarray, group_size: int, n_groups: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n_groups`` index groups of ``group_size`` distinct cells each.

    The ``group_size`` smallest keys ``log(Exp(1)) - log_w`` per row are the
    winners; sorting them by key reproduces sequential draw order.
    """
    cells = log_w.size
    flat = log_w.ravel()
    out = np.empty((n_groups, group_size), dtype=np.int64)
    # Chunked so a million-draw fidelity run stays within a few dozen MB.
    chunk = max(1, min(n_groups, (1 << 22) // max(cells, 1)))
    for start in range(0, n_groups, chunk):
        stop = min(start + chunk, n_groups)
        u = rng.random((stop - start, cells))
        keys = np.log(-np.log(u)) - flat[None, :]
        if group_size == cells:
            picked = np.argsort(keys, axis=1)
        else:
            picked = np.argpartition(keys, group_size - 1, axis=1)[:, :group_size]
            order = np.argsort(np.take_along_axis(keys, picked, axis=1), axis=1)
            picked = np.take_along_axis(picked, order, axis=1)
        out[start:stop] = picked[:, :group_size]
    return out


def draw_group(pmap: ProbabilityMap, group_size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``group_size`` distinct flat cell indices from ``pmap``.

    Indices are row-major and come back in draw order. Deterministic for a
    given generator state.
    """
    check_positive_int(group_size, "group_size")
    if group_size > pmap.cells:
        raise DomainError(f"group_size {group_size} exceeds cell count {pmap.cells}")
    return _race_draw(pmap.log_weights, group_size, 1, rng)[0]


def draw_groups(
    pmap: ProbabilityMap, group_size: int, n_groups: int, rng: np.random.Generator
) -> np.ndarray:
    """Vectorised ``draw_group``: ``(n_groups, group_size)`` independent draws."""
    check_positive_int(group_size, "group_size")
    check_positive_int(n_groups, "n_groups")
    if group_size > pmap.cells:
        raise DomainError(f"group_size {group_size} exceeds cell count {pmap.cells}")
    return _race_draw(pmap.log_weights, group_size, n_groups, rng)


@dataclass(frozen=True)
class SamplePlan:
    """The drawn patch groups for one image: ``group_count`` index lists."""

    groups: tuple[tuple[int, ...], ...]
    centers: tuple[tuple[int, int], ...]
    grid: PatchGrid
    config: SamplingConfig

    @property
    def group_count(self) -> int:
        return len(self.groups)

    def to_json(self) -> str:
        doc = {
            "grid": {"rows": self.grid.rows, "cols": self.grid.cols},
            "strategy": self.config.strategy,
            "alpha": self.config.decay_alpha,
            "seed": self.config.seed,
            "groups": [list(g) for g in self.groups],
            "centers": [list(c) for c in self.centers],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SamplePlan":
        doc = json.loads(text)
        grid = PatchGrid(rows=doc["grid"]["rows"], cols=doc["grid"]["cols"])
        groups = tuple(tuple(int(i) for i in g) for g in doc["groups"])
        if not groups:
            raise DomainError("plan document has no groups")
        config = SamplingConfig(
            decay_alpha=doc["alpha"],
            group_count=len(groups),
            group_size=len(groups[0]),
            strategy=doc["strategy"],
            seed=doc["seed"],
        )
        centers = tuple((int(r), int(c)) for r, c in doc["centers"])
        return cls(groups=groups, centers=centers, grid=grid, config=config)


def draw_plan(grid: PatchGrid, config: SamplingConfig, rng: np.random.Generator) -> SamplePlan:
    """Draw one plan using ``rng``: an independent uniform-random centre per
    group, then a group of distinct cells from that centre's map.

    Groups from different views may overlap.
    """
    size = config.resolved_group_size(grid)
    groups = []
    centers = []
    for _ in range(config.group_count):
        center = (int(rng.integers(grid.rows)), int(rng.integers(grid.cols)))
        pmap = probability_map_for(grid, center, config)
        groups.append(tuple(int(i) for i in draw_group(pmap, size, rng)))
        centers.append(center)
    resolved = replace(config, group_size=size)
    return SamplePlan(groups=tuple(groups), centers=tuple(centers), grid=grid, config=resolved)


def make_sample_plan(grid: PatchGrid, config: SamplingConfig) -> SamplePlan:
    """Draw a plan from a fresh generator seeded with ``config.seed``."""
    return draw_plan(grid, config, np.random.default_rng(config.seed))


def baseline_plan(grid: PatchGrid, config: SamplingConfig) -> SamplePlan:
    """Plan for the non-radial baseline strategies (uniform, gaussian)."""
    if config.strategy == "radial_bias":
        raise DomainError("baseline_plan requires a non-radial strategy")
    return make_sample_plan(grid, config)
