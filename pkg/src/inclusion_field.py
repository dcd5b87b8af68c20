# Copyright 2026 The pclab authors
# See LICENSE file for licensing details.

"""Inclusion geometry on a raster grid and the coefficient fields built from it.

Unit balls around cloud points are rasterized by cell-center membership, combined
into unions, intersections and relative differences, and turned into coefficient
fields `A1 + (A2 - A1) * indicator`. Symmetric matrices are stored as their
d(d+1)/2 upper-triangular entries.
"""

import io
import itertools
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from errors import (
    CombinatorialGuardError,
    ContractError,
    GeometryError,
    MaterialError,
    ShapeError,
)
from point_process import Box, PointCloud

logger = logging.getLogger(__name__)

BALL_RADIUS = 1.0
MAX_IDENTITY_SET = 20
FIELD_FORMAT = "pclab-field"
FIELD_FORMAT_VERSION = 1

# eigenvalue slack when checking ellipticity bounds
_EIG_SLACK = 1e-12

Labels = Iterable[int]


def _canonical(labels: Optional[Labels]) -> Tuple[int, ...]:
    if labels is None:
        return ()
    return tuple(sorted({int(n) for n in labels}))


def packed_size(d: int) -> int:
    return d * (d + 1) // 2


def pack(matrix: np.ndarray) -> np.ndarray:
    """Upper-triangular entries of (..., d, d) matrices, shape (..., d(d+1)/2)."""
    matrix = np.asarray(matrix, dtype=float)
    rows, cols = np.triu_indices(matrix.shape[-1])
    return matrix[..., rows, cols]


def unpack(packed: np.ndarray, d: int) -> np.ndarray:
    """Inverse of `pack`; the result is symmetric by construction."""
    packed = np.asarray(packed, dtype=float)
    rows, cols = np.triu_indices(d)
    matrix = np.zeros(packed.shape[:-1] + (d, d))
    matrix[..., rows, cols] = packed
    matrix[..., cols, rows] = packed
    return matrix


def diagonal_slots(d: int) -> np.ndarray:
    """Positions of the diagonal entries inside a packed vector."""
    rows, cols = np.triu_indices(d)
    return np.flatnonzero(rows == cols)


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered grid of n^d cells on a box, row-major."""

    box: Box
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise GeometryError(f"grid needs at least 2 cells per side, got {self.n}")

    @property
    def d(self) -> int:
        return self.box.d

    @property
    def dx(self) -> float:
        return self.box.L / self.n

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.n,) * self.box.d

    @property
    def size(self) -> int:
        return self.n**self.box.d

    @property
    def cell_volume(self) -> float:
        return self.dx**self.box.d

    def centers(self) -> np.ndarray:
        """1D array of cell-center coordinates along any axis."""
        return (np.arange(self.n) + 0.5) * self.dx

    def check_resolution(self, max_dx: float = 0.25) -> None:
        """Raise unless the spacing resolves a unit radius with enough cells."""
        if self.dx > max_dx:
            raise GeometryError(f"grid spacing {self.dx} exceeds {max_dx}")

    def require_same(self, other: "Grid") -> None:
        if self != other:
            raise ShapeError(f"grid mismatch: {self} vs {other}")


@dataclass(frozen=True)
class Mask:
    """Per-cell boolean occupancy."""

    grid: Grid
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=bool)
        if cells.shape != self.grid.shape:
            raise ShapeError(f"mask shape {cells.shape} does not match grid {self.grid.shape}")
        cells = np.ascontiguousarray(cells)
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @classmethod
    def empty(cls, grid: Grid) -> "Mask":
        return cls(grid, np.zeros(grid.shape, dtype=bool))

    def __or__(self, other: "Mask") -> "Mask":
        self.grid.require_same(other.grid)
        return Mask(self.grid, self.cells | other.cells)

    def __and__(self, other: "Mask") -> "Mask":
        self.grid.require_same(other.grid)
        return Mask(self.grid, self.cells & other.cells)

    def __sub__(self, other: "Mask") -> "Mask":
        self.grid.require_same(other.grid)
        return Mask(self.grid, self.cells & ~other.cells)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        return self.grid == other.grid and bool(np.array_equal(self.cells, other.cells))

    __hash__ = None  # type: ignore[assignment]

    def count(self) -> int:
        return int(self.cells.sum())

    def volume(self) -> float:
        return self.count() * self.grid.cell_volume

    def issubset(self, other: "Mask") -> bool:
        self.grid.require_same(other.grid)
        return not bool(np.any(self.cells & ~other.cells))


class SetMode(str, Enum):
    """Boolean combination used by `raster_set`."""

    UNION = "union"  # J^E
    INTERSECTION = "intersection"  # J_E
    UNION_MINUS = "union_minus"  # J^E_{||F}
    INTERSECTION_MINUS = "intersection_minus"  # J_{E||F}


class CVariant(str, Enum):
    """Which perturbation field `assemble_C` builds."""

    UNION = "union"  # C^E
    INTERSECTION = "intersection"  # C_E
    INTERSECTION_MINUS = "intersection_minus"  # C_{E||F}
    UNION_MINUS = "union_minus"  # C^E_{||F}


_VARIANT_MODE = {
    CVariant.UNION: SetMode.UNION,
    CVariant.INTERSECTION: SetMode.INTERSECTION,
    CVariant.INTERSECTION_MINUS: SetMode.INTERSECTION_MINUS,
    CVariant.UNION_MINUS: SetMode.UNION_MINUS,
}


def _ball_cells(position: np.ndarray, grid: Grid) -> np.ndarray:
    """Flat indices of cells whose center lies strictly within the unit ball."""
    dx, n, d = grid.dx, grid.n, grid.d
    if grid.box.L <= 2 * BALL_RADIUS:
        # the ball wraps onto itself: compare every cell
        gaps = [grid.box.displacement(position[a], grid.centers()) for a in range(d)]
        dist2 = sum(g**2 for g in np.meshgrid(*gaps, indexing="ij"))
        return np.flatnonzero(dist2.ravel() < BALL_RADIUS**2)

    window = []
    for a in range(d):
        lo = int(np.ceil((position[a] - BALL_RADIUS) / dx - 0.5))
        hi = int(np.floor((position[a] + BALL_RADIUS) / dx - 0.5))
        window.append(np.arange(lo, hi + 1))
    offsets = np.meshgrid(*window, indexing="ij")
    dist2 = sum(((o + 0.5) * dx - position[a]) ** 2 for a, o in enumerate(offsets))
    inside = dist2 < BALL_RADIUS**2
    if not inside.any():
        return np.empty(0, dtype=np.int64)
    index = tuple(np.mod(o[inside], n) for o in offsets)
    return np.sort(np.ravel_multi_index(index, grid.shape))


class InclusionRaster:
    """Per-label ball rasters of one cloud on one grid, computed lazily.

    All set operations are expressed through coverage counts, so unions and
    intersections of many balls never materialize intermediate masks.
    """

    def __init__(self, cloud: PointCloud, grid: Grid):
        if cloud.box != grid.box:
            raise ShapeError("cloud and grid live on different boxes")
        self.cloud = cloud
        self.grid = grid
        self._balls: Dict[int, np.ndarray] = {}

    def ball_cells(self, label: int) -> np.ndarray:
        label = int(label)
        cells = self._balls.get(label)
        if cells is None:
            cells = _ball_cells(self.cloud.position(label), self.grid)
            cells.setflags(write=False)
            self._balls[label] = cells
        return cells

    def coverage(self, labels: Labels) -> np.ndarray:
        """Number of balls among `labels` covering each cell (flat array)."""
        counts = np.zeros(self.grid.size, dtype=np.int32)
        for label in _canonical(labels):
            counts[self.ball_cells(label)] += 1
        return counts

    def ball(self, label: int) -> Mask:
        flat = np.zeros(self.grid.size, dtype=bool)
        flat[self.ball_cells(label)] = True
        return Mask(self.grid, flat.reshape(self.grid.shape))

    def indicator(self, E: Labels, F: Optional[Labels], mode: SetMode) -> np.ndarray:
        """Flat boolean indicator of the requested set."""
        E, F = _canonical(E), _canonical(F)
        mode = SetMode(mode)
        if mode in (SetMode.INTERSECTION, SetMode.INTERSECTION_MINUS):
            if not E:
                raise ContractError("intersection of an empty family is undefined; use C_empty = 0")
            flat = self.coverage(E) == len(E)
        else:
            flat = self.coverage(E) > 0
        if mode in (SetMode.UNION_MINUS, SetMode.INTERSECTION_MINUS) and F:
            flat &= self.coverage(F) == 0
        return flat

    def mask(self, E: Labels, F: Optional[Labels] = None, mode: SetMode = SetMode.UNION) -> Mask:
        return Mask(self.grid, self.indicator(E, F, mode).reshape(self.grid.shape))


def raster_ball(cloud: PointCloud, label: int, grid: Grid) -> Mask:
    """Mask of J_n: cells with center within periodic distance 1 of point `label`."""
    return InclusionRaster(cloud, grid).ball(label)


def raster_set(
    cloud: PointCloud, E: Labels, F: Optional[Labels], mode: SetMode, grid: Grid
) -> Mask:
    """Mask of J^E, J_E, J^E_{||F} or J_{E||F}."""
    cloud.check_labels(_canonical(E) + _canonical(F))
    return InclusionRaster(cloud, grid).mask(E, F, mode)


@dataclass(frozen=True)
class CoefficientField:
    """Per-cell symmetric matrices in packed storage, shape (*grid.shape, d(d+1)/2)."""

    grid: Grid
    packed: np.ndarray
    kind: str = "A"

    def __post_init__(self):
        packed = np.asarray(self.packed, dtype=float)
        expected = self.grid.shape + (packed_size(self.grid.d),)
        if packed.shape != expected:
            raise ShapeError(f"field shape {packed.shape} does not match {expected}")
        packed = np.ascontiguousarray(packed)
        packed.setflags(write=False)
        object.__setattr__(self, "packed", packed)

    @classmethod
    def constant(cls, grid: Grid, matrix: np.ndarray, kind: str = "A") -> "CoefficientField":
        values = np.broadcast_to(pack(matrix), grid.shape + (packed_size(grid.d),))
        return cls(grid, values.copy(), kind)

    @classmethod
    def zeros(cls, grid: Grid, kind: str = "C") -> "CoefficientField":
        return cls(grid, np.zeros(grid.shape + (packed_size(grid.d),)), kind)

    def matrices(self) -> np.ndarray:
        return unpack(self.packed, self.grid.d)

    def diagonal(self, axis: int) -> np.ndarray:
        """Entry (axis, axis) on every cell, shape `grid.shape`."""
        return self.packed[..., diagonal_slots(self.grid.d)[axis]]

    def quadratic(self, e: np.ndarray) -> np.ndarray:
        """Per-cell e.A e."""
        e = np.asarray(e, dtype=float)
        return np.einsum("...ij,i,j->...", self.matrices(), e, e)

    def eigen_range(self) -> Tuple[float, float]:
        eig = np.linalg.eigvalsh(self.matrices().reshape(-1, self.grid.d, self.grid.d))
        return float(eig.min()), float(eig.max())

    def check_elliptic(self, alpha: float, beta: float) -> None:
        low, high = self.eigen_range()
        if low < alpha - _EIG_SLACK or high > beta + _EIG_SLACK:
            raise MaterialError(
                f"cell eigenvalues in [{low}, {high}] leave the ellipticity band [{alpha}, {beta}]"
            )

    def is_constant(self) -> bool:
        flat = self.packed.reshape(-1, self.packed.shape[-1])
        return bool(np.all(flat == flat[0]))

    def __add__(self, other: "CoefficientField") -> "CoefficientField":
        self.grid.require_same(other.grid)
        return CoefficientField(self.grid, self.packed + other.packed, "A" if "A" in (self.kind, other.kind) else "C")

    def __sub__(self, other: "CoefficientField") -> "CoefficientField":
        self.grid.require_same(other.grid)
        return CoefficientField(self.grid, self.packed - other.packed, "C")


def _check_matrix(name: str, matrix: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.shape[0] != matrix.shape[1]:
        raise MaterialError(f"{name} must be square, got shape {matrix.shape}")
    if not np.array_equal(matrix, matrix.T):
        raise MaterialError(f"{name} must be exactly symmetric")
    eig = np.linalg.eigvalsh(matrix)
    if eig.min() < alpha - _EIG_SLACK or eig.max() > beta + _EIG_SLACK:
        raise MaterialError(f"{name} eigenvalues {eig} leave [{alpha}, {beta}]")
    return matrix


@dataclass(frozen=True)
class MaterialPair:
    """Background A1, inclusion A2 and their ellipticity band [alpha, beta].

    `A1_field`, when given, replaces the constant background by a deterministic
    periodic per-cell field on one specific grid.
    """

    A1: np.ndarray
    A2: np.ndarray
    alpha: float
    beta: float
    A1_field: Optional[CoefficientField] = field(default=None, compare=False)

    def __post_init__(self):
        if not 0 < self.alpha <= self.beta:
            raise MaterialError(f"need 0 < alpha <= beta, got {self.alpha}, {self.beta}")
        a1 = _check_matrix("A1", self.A1, self.alpha, self.beta)
        a2 = _check_matrix("A2", self.A2, self.alpha, self.beta)
        if a1.shape != a2.shape:
            raise MaterialError("A1 and A2 must have the same dimension")
        object.__setattr__(self, "A1", a1)
        object.__setattr__(self, "A2", a2)
        if self.A1_field is not None:
            self.A1_field.check_elliptic(self.alpha, self.beta)

    @classmethod
    def isotropic(cls, d: int, alpha: float = 1.0, beta: float = 4.0) -> "MaterialPair":
        """A1 = alpha Id, A2 = beta Id."""
        return cls(alpha * np.eye(d), beta * np.eye(d), alpha, beta)

    @property
    def d(self) -> int:
        return int(self.A1.shape[0])

    @property
    def zero_contrast(self) -> bool:
        return self.A1_field is None and bool(np.array_equal(self.A1, self.A2))

    @property
    def constant_background(self) -> bool:
        return self.A1_field is None or self.A1_field.is_constant()

    def background(self, grid: Grid) -> CoefficientField:
        if self.A1_field is not None:
            self.A1_field.grid.require_same(grid)
            return self.A1_field
        return CoefficientField.constant(grid, self.A1)

    def contrast(self, grid: Grid) -> np.ndarray:
        """Packed A2 - A1(x) on every cell."""
        return pack(self.A2) - self.background(grid).packed


def checkerboard_background(
    grid: Grid, low: np.ndarray, high: np.ndarray, period: float = 2.0
) -> CoefficientField:
    """Periodic checkerboard of two constant matrices with the given tile period."""
    tiles = grid.box.L / period
    if abs(tiles - round(tiles)) > 1e-9:
        raise GeometryError(f"checkerboard period {period} must divide L={grid.box.L}")
    index = np.floor(grid.centers() / (period / 2)).astype(np.int64)
    parity = sum(np.meshgrid(*([index] * grid.d), indexing="ij")) % 2
    packed = np.where(parity[..., None] == 0, pack(low), pack(high))
    return CoefficientField(grid, packed, "A")


def _raster(cloud: PointCloud, grid: Grid, raster: Optional[InclusionRaster]) -> InclusionRaster:
    if raster is None:
        return InclusionRaster(cloud, grid)
    if raster.cloud is not cloud or raster.grid != grid:
        raise ShapeError("raster was built for another cloud or grid")
    return raster


def assemble_A(
    cloud: PointCloud,
    E: Labels,
    materials: MaterialPair,
    grid: Grid,
    raster: Optional[InclusionRaster] = None,
) -> CoefficientField:
    """A^E: A2 on the union of the balls indexed by E, A1 elsewhere."""
    if materials.d != grid.d:
        raise MaterialError(f"materials are {materials.d}-dimensional, grid is {grid.d}-dimensional")
    E = _canonical(E)
    cloud.check_labels(E)
    background = materials.background(grid)
    if not E:
        return background
    inside = _raster(cloud, grid, raster).indicator(E, None, SetMode.UNION).reshape(grid.shape)
    packed = np.where(inside[..., None], pack(materials.A2), background.packed)
    return CoefficientField(grid, packed, "A")


def assemble_C(
    cloud: PointCloud,
    E: Labels,
    F: Optional[Labels],
    variant: CVariant,
    materials: MaterialPair,
    grid: Grid,
    raster: Optional[InclusionRaster] = None,
) -> CoefficientField:
    """(A2 - A1) on the set selected by `variant`, zero elsewhere.

    An empty E gives the zero field for every variant. The plain variants
    (C^E, C_E) take no exclusion set.
    """
    variant = CVariant(variant)
    E, F = _canonical(E), _canonical(F)
    if F and variant in (CVariant.UNION, CVariant.INTERSECTION):
        raise ContractError(f"variant {variant.value} takes no exclusion set")
    cloud.check_labels(E + F)
    if not E:
        return CoefficientField.zeros(grid)
    inside = _raster(cloud, grid, raster).indicator(E, F, _VARIANT_MODE[variant])
    packed = inside.reshape(grid.shape)[..., None] * materials.contrast(grid)
    return CoefficientField(grid, packed, "C")


@dataclass(frozen=True)
class InclusionExclusionReport:
    """Max absolute cell-wise residuals; `None` where the identity was not evaluated."""

    union_vs_intersections: float
    relative_union: Optional[float]
    relative_intersection: Optional[float]

    @property
    def max_residual(self) -> float:
        values = [self.union_vs_intersections, self.relative_union, self.relative_intersection]
        return max(v for v in values if v is not None)


def _subsets(labels: Tuple[int, ...]):
    for size in range(len(labels) + 1):
        yield from itertools.combinations(labels, size)


def verify_inclusion_exclusion(
    cloud: PointCloud,
    H: Labels,
    G: Optional[Labels],
    grid: Grid,
    materials: MaterialPair,
    raster: Optional[InclusionRaster] = None,
) -> InclusionExclusionReport:
    """Evaluate the three inclusion-exclusion identities by explicit subset sums.

    The signed indicator sums are accumulated in integers, so the reported
    residuals are exactly zero whenever the identities hold.
    """
    H, G = _canonical(H), _canonical(G)
    if len(H) > MAX_IDENTITY_SET:
        raise CombinatorialGuardError(f"|H| = {len(H)} exceeds {MAX_IDENTITY_SET}")
    if set(H) & set(G):
        raise ContractError("H and G must be disjoint")
    cloud.check_labels(H + G)
    raster = _raster(cloud, grid, raster)
    contrast = materials.contrast(grid).reshape(grid.size, -1)

    def residual(lhs: np.ndarray, rhs: np.ndarray) -> float:
        diff = (rhs - lhs.astype(np.int64))[:, None] * contrast
        return float(np.max(np.abs(diff))) if diff.size else 0.0

    def indicator(E, F, mode) -> np.ndarray:
        if not E:
            return np.zeros(grid.size, dtype=np.int64)
        return raster.indicator(E, F, mode).astype(np.int64)

    # C^H = sum_S (-1)^{|S|+1} C_S
    rhs = np.zeros(grid.size, dtype=np.int64)
    for S in _subsets(H):
        rhs += (-1) ** (len(S) + 1) * indicator(S, None, SetMode.INTERSECTION)
    union = residual(indicator(H, None, SetMode.UNION), rhs)

    relative_union = relative_intersection = None
    if G:
        # C^H_{||G} = sum_S (-1)^{|S|+1} C_{S||G}
        rhs = np.zeros(grid.size, dtype=np.int64)
        for S in _subsets(H):
            rhs += (-1) ** (len(S) + 1) * indicator(S, G, SetMode.INTERSECTION_MINUS)
        relative_union = residual(indicator(H, G, SetMode.UNION_MINUS), rhs)

        # C_{G||H} = sum_S (-1)^{|S|} C_{S u G}
        rhs = np.zeros(grid.size, dtype=np.int64)
        for S in _subsets(H):
            rhs += (-1) ** len(S) * indicator(S + G, None, SetMode.INTERSECTION)
        relative_intersection = residual(indicator(G, H, SetMode.INTERSECTION_MINUS), rhs)

    report = InclusionExclusionReport(union, relative_union, relative_intersection)
    logger.debug("inclusion-exclusion |H|=%d |G|=%d: %s", len(H), len(G), report)
    return report


def disjoint_partition_overlap(
    cloud: PointCloud, G: Labels, grid: Grid, raster: Optional[InclusionRaster] = None
) -> int:
    """Cells where the pieces J_{U||G\\U}, U a nonempty subset of G, overlap or miss J^G.

    Returns 0 when the pieces are pairwise disjoint and tile J^G exactly.
    """
    G = _canonical(G)
    cloud.check_labels(G)
    raster = _raster(cloud, grid, raster)
    covered = np.zeros(grid.size, dtype=np.int64)
    for U in _subsets(G):
        if not U:
            continue
        rest = tuple(n for n in G if n not in U)
        covered += raster.indicator(U, rest, SetMode.INTERSECTION_MINUS)
    union = raster.indicator(G, None, SetMode.UNION) if G else np.zeros(grid.size, dtype=bool)
    return int(np.count_nonzero(covered != union.astype(np.int64)))


class FieldHeader(BaseModel):
    """First line of a binary field file."""

    model_config = ConfigDict(extra="forbid")

    format: str = FIELD_FORMAT
    version: int = FIELD_FORMAT_VERSION
    kind: str
    dtype: str
    shape: Tuple[int, ...]
    L: float


def write_field(path: Union[str, Path], values: np.ndarray, kind: str, L: float) -> Path:
    """JSON header line, then raw little-endian row-major bytes."""
    values = np.ascontiguousarray(values)
    if values.dtype == bool:
        values = values.astype(np.uint8)
    values = values.astype(values.dtype.newbyteorder("<"), copy=False)
    header = FieldHeader(kind=kind, dtype=values.dtype.str, shape=values.shape, L=L)
    path = Path(path)
    with path.open("wb") as stream:
        stream.write(header.model_dump_json().encode("utf-8") + b"\n")
        stream.write(values.tobytes(order="C"))
    logger.debug("Wrote %s field %s to %s", kind, values.shape, path)
    return path


def read_field(path: Union[str, Path]) -> Tuple[FieldHeader, np.ndarray]:
    raw = Path(path).read_bytes()
    line, _, body = raw.partition(b"\n")
    header = FieldHeader.model_validate(json.loads(line))
    if header.format != FIELD_FORMAT or header.version != FIELD_FORMAT_VERSION:
        raise ShapeError(f"unsupported field file {header.format} v{header.version}")
    values = np.frombuffer(body, dtype=np.dtype(header.dtype)).reshape(header.shape)
    return header, values


def write_mask(path: Union[str, Path], mask: Mask) -> Path:
    return write_field(path, mask.cells, "mask", mask.grid.box.L)


def write_coefficients(path: Union[str, Path], coefficients: CoefficientField) -> Path:
    return write_field(path, coefficients.packed, coefficients.kind, coefficients.grid.box.L)


def field_to_csv(values: np.ndarray, grid: Grid) -> str:
    """Small-grid CSV: cell multi-index, cell center, then one column per component."""
    values = np.asarray(values)
    flat = values.reshape(grid.size, -1).astype(float)
    axes = ["i", "j", "k"][: grid.d]
    header = axes + [f"x{a}" for a in range(grid.d)] + [f"v{c}" for c in range(flat.shape[1])]
    out = io.StringIO()
    out.write(",".join(header) + "\n")
    centers = grid.centers()
    for cell, row in enumerate(flat):
        index = np.unravel_index(cell, grid.shape)
        parts = [str(int(i)) for i in index]
        parts += [f"{centers[i]:.17g}" for i in index]
        parts += [f"{v:.17g}" for v in row]
        out.write(",".join(parts) + "\n")
    return out.getvalue()
