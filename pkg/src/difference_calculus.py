# Copyright 2026 The pclab authors
# See LICENSE file for licensing details.

"""Correctors indexed by point subsets and their difference operators.

For a fixed realization, `phi^E` solves the massive corrector equation with the
coefficient field A^E in which only the inclusions indexed by E are present.
Difference operators are alternating sums of these subset correctors:

    delta^F phi^H = sum over G in F of (-1)^{|F \\ G|} phi^{G u H}

All quantities are handled at the gradient level. The affine `e.x` term of the
`with_e` variant is added to the gradient, never materialized as a scalar field.
"""

import itertools
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from corrector_solver import (
    CorrectorField,
    SolverParams,
    face_coefficients,
    flux_average,
    solve_massive,
    window_cells,
)
from errors import CombinatorialGuardError, ContractError, ParameterError
from inclusion_field import (
    BALL_RADIUS,
    CoefficientField,
    CVariant,
    Grid,
    InclusionRaster,
    MaterialPair,
    assemble_A,
    assemble_C,
)
from point_process import PointCloud, Seed, thinning_mask

logger = logging.getLogger(__name__)

DEFAULT_SUBSET_CAP = 8
DEFAULT_CACHE_CELLS = (2 * 1024**3) // 8
MAX_CLUSTERS = 1_000_000


@dataclass(frozen=True, order=True)
class IndexSet:
    """Finite set of point labels in strictly increasing order."""

    labels: Tuple[int, ...] = ()

    def __post_init__(self):
        labels = tuple(int(n) for n in self.labels)
        if any(b <= a for a, b in zip(labels, labels[1:])):
            raise ContractError(f"labels must be strictly increasing, got {labels}")
        if labels and labels[0] < 0:
            raise ContractError(f"labels must be non-negative, got {labels}")
        object.__setattr__(self, "labels", labels)

    @classmethod
    def of(cls, labels: Iterable[int] = ()) -> "IndexSet":
        return cls(tuple(sorted({int(n) for n in labels})))

    def __iter__(self) -> Iterator[int]:
        return iter(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label) -> bool:
        return int(label) in self.labels

    def __or__(self, other: "IndexSet") -> "IndexSet":
        return IndexSet.of(self.labels + other.labels)

    def __sub__(self, other: "IndexSet") -> "IndexSet":
        drop = set(other.labels)
        return IndexSet(tuple(n for n in self.labels if n not in drop))

    def isdisjoint(self, other: "IndexSet") -> bool:
        return not set(self.labels) & set(other.labels)

    def subsets(self, proper: bool = False) -> Iterator["IndexSet"]:
        """All subsets by increasing size, lexicographic within a size."""
        top = len(self) - 1 if proper else len(self)
        for size in range(top + 1):
            for combo in itertools.combinations(self.labels, size):
                yield IndexSet(combo)

    def encode(self) -> str:
        return ",".join(str(n) for n in self.labels)

    def __repr__(self) -> str:
        return "{" + self.encode() + "}"


EMPTY = IndexSet()


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    resident_cells: int = 0

    def merge(self, other: "CacheStats") -> "CacheStats":
        return CacheStats(
            self.hits + other.hits,
            self.misses + other.misses,
            self.evictions + other.evictions,
            max(self.resident_cells, other.resident_cells),
        )


class CorrectorCache:
    """Least-recently-used store of subset correctors, bounded in grid cells.

    Two threads missing the same key may both compute; the later insert wins and
    both results are equal.
    """

    def __init__(self, capacity_cells: int = DEFAULT_CACHE_CELLS):
        if capacity_cells < 1:
            raise ParameterError(f"cache capacity must be positive, got {capacity_cells}")
        self.capacity_cells = capacity_cells
        self.stats = CacheStats()
        self._entries: "OrderedDict[IndexSet, CorrectorField]" = OrderedDict()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def get_or_compute(
        self, key: IndexSet, compute: Callable[[], CorrectorField]
    ) -> CorrectorField:
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None:
                self._entries.move_to_end(key)
                self.stats.hits += 1
                return entry
            self.stats.misses += 1
        value = compute()
        with self._lock:
            if key not in self._entries:
                self._entries[key] = value
                self.stats.resident_cells += value.grid.size
            self._entries.move_to_end(key)
            while self.stats.resident_cells > self.capacity_cells and len(self._entries) > 1:
                _, evicted = self._entries.popitem(last=False)
                self.stats.resident_cells -= evicted.grid.size
                self.stats.evictions += 1
        return value


@dataclass(frozen=True)
class WindowPolicy:
    """Localized solves on periodic cubes of half-width c1 sqrt(T lambda_max) ln(1/eps)."""

    c1: float = 1.0
    eps_loc: float = 1e-6

    def __post_init__(self):
        if self.c1 <= 0 or not 0 < self.eps_loc < 1:
            raise ParameterError(f"invalid window policy {self}")

    def radius(self, T: float, stiffness: float) -> float:
        return self.c1 * float(np.sqrt(T * stiffness)) * float(np.log(1.0 / self.eps_loc))


@dataclass(frozen=True)
class GradientField:
    """Face gradient components, shape (d, *grid.shape)."""

    grid: Grid
    components: np.ndarray

    def __post_init__(self):
        expected = (self.grid.d,) + self.grid.shape
        if self.components.shape != expected:
            raise ContractError(f"gradient shape {self.components.shape} != {expected}")

    @classmethod
    def zeros(cls, grid: Grid) -> "GradientField":
        return cls(grid, np.zeros((grid.d,) + grid.shape))

    def __add__(self, other: "GradientField") -> "GradientField":
        self.grid.require_same(other.grid)
        return GradientField(self.grid, self.components + other.components)

    def __sub__(self, other: "GradientField") -> "GradientField":
        self.grid.require_same(other.grid)
        return GradientField(self.grid, self.components - other.components)

    def mean_square(self) -> float:
        """Box average of |g|^2."""
        return float(np.mean(np.sum(self.components**2, axis=0)))

    def l2_norm(self) -> float:
        return float(np.sqrt(np.sum(self.components**2) * self.grid.cell_volume))

    def max_norm(self) -> float:
        return float(np.max(np.abs(self.components))) if self.components.size else 0.0


class RealizationContext:
    """One realization: cloud, materials, grid, solver settings and corrector cache."""

    def __init__(
        self,
        cloud: PointCloud,
        materials: MaterialPair,
        grid: Grid,
        params: SolverParams,
        subset_cap: int = DEFAULT_SUBSET_CAP,
        cache: Optional[CorrectorCache] = None,
        window: Optional[WindowPolicy] = None,
        index: int = 0,
    ):
        if materials.d != grid.d or len(params.e) != grid.d:
            raise ContractError("materials, grid and direction must share the dimension")
        self.cloud = cloud
        self.materials = materials
        self.grid = grid
        self.params = params
        self.subset_cap = subset_cap
        self.cache = cache if cache is not None else CorrectorCache()
        self.window = window
        self.index = index
        self.raster = InclusionRaster(cloud, grid)
        self.solve_log: List[Tuple[str, int, float]] = []
        self._log_lock = threading.Lock()
        if window is not None and not materials.constant_background:
            logger.warning("window solves need a constant background; solving on the full box")
            self.window = None

    def sibling(self, window: Optional[WindowPolicy]) -> "RealizationContext":
        """Same realization with its own cache and another window policy."""
        return RealizationContext(
            self.cloud,
            self.materials,
            self.grid,
            self.params,
            self.subset_cap,
            CorrectorCache(self.cache.capacity_cells),
            window,
            self.index,
        )

    @property
    def all_labels(self) -> IndexSet:
        return IndexSet(tuple(range(len(self.cloud))))

    def coefficients(self, E: IndexSet) -> CoefficientField:
        return assemble_A(self.cloud, E, self.materials, self.grid, self.raster)

    def contrast(self, E: IndexSet, F: IndexSet, variant: CVariant) -> CoefficientField:
        return assemble_C(self.cloud, E, F, variant, self.materials, self.grid, self.raster)

    def _window_mask(self, E: IndexSet) -> Optional[np.ndarray]:
        if self.window is None or not len(E):
            return None
        stiffness = float(np.linalg.eigvalsh(self.materials.A1).max())
        radius = self.window.radius(self.params.T, stiffness) + BALL_RADIUS + 1.0
        centers = self.cloud.positions[list(E.labels)]
        return window_cells(self.grid, centers, radius)

    def _solve(self, E: IndexSet) -> CorrectorField:
        corrector = solve_massive(self.coefficients(E), self.params, self._window_mask(E))
        with self._log_lock:
            self.solve_log.append((E.encode(), corrector.iterations, corrector.residual))
        return corrector

    def corrector(self, E: IndexSet) -> CorrectorField:
        self.cloud.check_labels(E)
        return self.cache.get_or_compute(E, lambda: self._solve(E))

    def gradient(self, E: IndexSet, with_e: bool = False) -> np.ndarray:
        grad = self.corrector(E).gradient
        if with_e:
            grad = grad + self.params.direction.reshape((-1,) + (1,) * self.grid.d)
        return grad

    def flux_value(self, E: IndexSet) -> float:
        """e . k^E (grad phi^E + e), box-averaged."""
        flux = flux_average(self.coefficients(E), self.corrector(E), self.params)
        return float(flux @ self.params.direction)

    def thinned(self, p: float, seed: Seed) -> IndexSet:
        """E^(p): labels kept by the Bernoulli(p) deletion of this realization."""
        keep = thinning_mask(self.cloud, p, seed, self.index)
        return IndexSet(tuple(int(n) for n in np.flatnonzero(keep)))

    def log_cache_stats(self) -> None:
        stats = self.cache.stats
        logger.debug(
            "realization %d cache: %d hits, %d misses, %d evictions, %d resident cells",
            self.index,
            stats.hits,
            stats.misses,
            stats.evictions,
            stats.resident_cells,
        )


def _guard(context: RealizationContext, *sets: IndexSet) -> None:
    total = sum(len(s) for s in sets)
    if total > context.subset_cap:
        raise CombinatorialGuardError(
            f"{total} labels exceed the subset cap {context.subset_cap} (2^{total} solves)"
        )


def corrector_for_subset(context: RealizationContext, E: IndexSet) -> CorrectorField:
    """phi^E for the realization, memoized by E."""
    return context.corrector(E)


def delta(
    context: RealizationContext, F: IndexSet, H: IndexSet = EMPTY, with_e: bool = False
) -> GradientField:
    """Gradient of delta^F phi^H, or of delta_e^F phi^H with `with_e`."""
    if not F.isdisjoint(H):
        raise ContractError(f"F={F} and H={H} overlap")
    _guard(context, F, H)
    total = np.zeros((context.grid.d,) + context.grid.shape)
    for G in F.subsets():
        sign = -1.0 if (len(F) - len(G)) % 2 else 1.0
        total += sign * context.gradient(G | H)
    if with_e and not len(F):
        total += context.params.direction.reshape((-1,) + (1,) * context.grid.d)
    return GradientField(context.grid, total)


def delta_recursive(
    context: RealizationContext, F: IndexSet, H: IndexSet = EMPTY
) -> GradientField:
    """delta^F phi^H as nested first-order differences, peeling the smallest label first."""
    if not F.isdisjoint(H):
        raise ContractError(f"F={F} and H={H} overlap")
    _guard(context, F, H)
    if not len(F):
        return GradientField(context.grid, np.array(context.gradient(H)))
    first = IndexSet(F.labels[:1])
    rest = IndexSet(F.labels[1:])
    return delta_recursive(context, rest, H | first) - delta_recursive(context, rest, H)


@dataclass(frozen=True)
class Residual:
    value: float
    budget: float

    @property
    def within_budget(self) -> bool:
        return self.value <= self.budget


def check_binomial(
    context: RealizationContext, F: IndexSet, G: IndexSet, H: IndexSet
) -> Residual:
    """Max-norm gap between grad delta_e^G phi^{F u H} and sum over S in F of grad delta_e^{S u G} phi^H."""
    if not (F.isdisjoint(G) and F.isdisjoint(H) and G.isdisjoint(H)):
        raise ContractError(f"F={F}, G={G}, H={H} must be pairwise disjoint")
    lhs = delta(context, G, F | H, with_e=True)
    rhs = GradientField.zeros(context.grid)
    for S in F.subsets():
        rhs = rhs + delta(context, S | G, H, with_e=True)
    scale = GradientField(context.grid, context.gradient(EMPTY, with_e=True)).max_norm()
    budget = 10.0 * 2 ** (len(F) + len(G)) * context.params.tolerance * max(scale, 1.0)
    return Residual((lhs - rhs).max_norm(), budget)


@dataclass(frozen=True)
class SeparationResult:
    norm: float
    min_gap: float


def separation_decay(context: RealizationContext, F: IndexSet) -> SeparationResult:
    """L2 norm of grad delta^F phi and the smallest pairwise point distance in F."""
    if len(F) < 2:
        raise ContractError(f"separation needs at least two labels, got {F}")
    points = context.cloud.positions[list(F.labels)]
    gaps = [
        float(context.cloud.box.distance(points[a], points[b]))
        for a, b in itertools.combinations(range(len(F)), 2)
    ]
    return SeparationResult(delta(context, F).l2_norm(), min(gaps))


def _adjacency(cloud: PointCloud, labels: Sequence[int], radius: float) -> Dict[int, set]:
    labels = list(labels)
    neighbors: Dict[int, set] = {n: set() for n in labels}
    if len(labels) < 2:
        return neighbors
    if radius >= cloud.box.L * np.sqrt(cloud.box.d) / 2:
        for n in labels:
            neighbors[n] = set(labels) - {n}
        return neighbors
    tree = cKDTree(cloud.positions[labels], boxsize=cloud.box.L)
    for a, b in tree.query_pairs(radius):
        neighbors[labels[a]].add(labels[b])
        neighbors[labels[b]].add(labels[a])
    return neighbors


def clusters(
    cloud: PointCloud,
    labels: Iterable[int],
    size: int,
    radius: float,
    limit: int = MAX_CLUSTERS,
) -> List[IndexSet]:
    """Subsets of `labels` of the given size whose points are pairwise within `radius`."""
    if size < 0:
        raise ParameterError(f"cluster size must be non-negative, got {size}")
    if size == 0:
        return [EMPTY]
    pool = sorted({int(n) for n in labels})
    neighbors = _adjacency(cloud, pool, radius)
    found: List[IndexSet] = []

    def extend(clique: Tuple[int, ...], candidates: List[int]) -> None:
        if len(clique) == size:
            found.append(IndexSet(clique))
            if len(found) > limit:
                raise CombinatorialGuardError(f"more than {limit} clusters of size {size}")
            return
        for i, n in enumerate(candidates):
            extend(clique + (n,), [m for m in candidates[i + 1 :] if m in neighbors[n]])

    extend((), pool)
    return found


def common_neighbors(
    cloud: PointCloud, G: IndexSet, labels: Iterable[int], radius: float
) -> List[int]:
    """Labels outside G within `radius` of every point of G."""
    pool = [int(n) for n in labels if int(n) not in G]
    if not len(G):
        return sorted(pool)
    anchors = cloud.positions[list(G.labels)]
    keep = []
    for n in pool:
        if np.all(cloud.box.distance(anchors, cloud.positions[n]) <= radius):
            keep.append(n)
    return sorted(keep)


@dataclass(frozen=True)
class PartialSum:
    """Order-k cluster partial sum of corrector gradients on a thinned set."""

    gradient: GradientField
    error: float
    thinned: IndexSet
    clusters_per_order: Tuple[int, ...] = field(default=())


def cluster_corrector_partial(
    context: RealizationContext,
    p: float,
    k: int,
    seed: Seed,
    radius: Optional[float] = None,
    max_order: int = 3,
) -> PartialSum:
    """Sum of grad delta^F phi over clusters F in E^(p) with |F| <= k.

    `error` is the L2 distance to grad phi^{E^(p)} solved directly.
    """
    if k > max_order:
        raise CombinatorialGuardError(f"partial sums are limited to order {max_order}, got {k}")
    if k < 0:
        raise ParameterError(f"order must be non-negative, got {k}")
    radius = context.cloud.box.L if radius is None else radius
    kept = context.thinned(p, seed)
    total = GradientField.zeros(context.grid)
    counts = []
    for order in range(k + 1):
        found = clusters(context.cloud, kept, order, radius)
        counts.append(len(found))
        for F in found:
            total = total + delta(context, F)
    direct = GradientField(context.grid, np.array(context.gradient(kept)))
    return PartialSum(total, (total - direct).l2_norm(), kept, tuple(counts))


def window_agreement(
    context: RealizationContext, F: IndexSet, H: IndexSet = EMPTY, policy: Optional[WindowPolicy] = None
) -> float:
    """Relative max-norm gap between delta^F phi^H from window solves and from full solves."""
    full = delta(context.sibling(None), F, H)
    local = delta(context.sibling(policy or WindowPolicy()), F, H)
    scale = full.max_norm()
    gap = (full - local).max_norm()
    return gap / scale if scale > 0 else gap


def cluster_form_term(
    context: RealizationContext, F: IndexSet, H: IndexSet = EMPTY
) -> float:
    """Inner cluster-formula sum over proper subsets G of F, spatially averaged.

    Each term pairs grad delta_e^G phi^H with the face contrast of
    C_{F\\G || G u H} against the base field A^H, applied to grad phi^{F u H} + e.
    """
    if not F.isdisjoint(H):
        raise ContractError(f"F={F} and H={H} overlap")
    _guard(context, F, H)
    rule = context.params.face_rule
    base = context.coefficients(H)
    base_faces = face_coefficients(base, rule)
    outer = context.gradient(F | H, with_e=True)
    total = 0.0
    for G in F.subsets(proper=True):
        sign = 1.0 if (len(F) - len(G)) % 2 else -1.0
        piece = context.contrast(F - G, G | H, CVariant.INTERSECTION_MINUS)
        contrast = face_coefficients(base + piece, rule) - base_faces
        inner = delta(context, G, H, with_e=True).components
        total += sign * float(np.sum(np.mean(inner * contrast * outer, axis=tuple(range(1, inner.ndim)))))
    return total


def alternating_form_term(
    context: RealizationContext, F: IndexSet, H: IndexSet = EMPTY
) -> float:
    """delta^F applied to the flux functional X -> e.k^X (grad phi^X + e) at base H."""
    if not F.isdisjoint(H):
        raise ContractError(f"F={F} and H={H} overlap")
    _guard(context, F, H)
    total = 0.0
    for G in F.subsets():
        sign = -1.0 if (len(F) - len(G)) % 2 else 1.0
        total += sign * context.flux_value(G | H)
    return total
