# Copyright 2026 The pclab authors
# See LICENSE file for licensing details.

"""Massive corrector solves on a periodic grid.

The operator `(1/T) phi - div k (grad phi + e)` is discretized with cell-centered
finite volumes and a two-point flux: along axis i the face between cells c and
c + e_i carries the coefficient `rule(A_ii(c), A_ii(c + e_i))`. The assembled
matrix is symmetric by construction and positive definite thanks to the 1/T term;
it is solved with Jacobi-preconditioned conjugate gradients.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from errors import ConvergenceError, GeometryError, MaterialError, ParameterError, ShapeError, SolverDefectError
from inclusion_field import CoefficientField, Grid, MaterialPair, write_field

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-10
ENERGY_SLACK_FACTOR = 10.0
# recomputed residuals drift above the CG recurrence by a small factor
RESIDUAL_SLACK = 10.0


class FaceRule(str, Enum):
    """How a face coefficient is built from the two adjacent cells."""

    HARMONIC = "harmonic"
    ARITHMETIC = "arithmetic"


def combine(left: np.ndarray, right: np.ndarray, rule: FaceRule) -> np.ndarray:
    if FaceRule(rule) is FaceRule.ARITHMETIC:
        return 0.5 * (left + right)
    total = left + right
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(total != 0, 2.0 * left * right / np.where(total != 0, total, 1.0), 0.0)
    return mean


def face_coefficients(A: CoefficientField, rule: FaceRule = FaceRule.HARMONIC) -> np.ndarray:
    """Face coefficients, shape (d, *grid.shape); entry c on axis i is face c + 1/2 e_i."""
    faces = np.empty((A.grid.d,) + A.grid.shape)
    for axis in range(A.grid.d):
        diag = A.diagonal(axis)
        faces[axis] = combine(diag, np.roll(diag, -1, axis=axis), rule)
    return faces


def face_contrast(
    background: CoefficientField, perturbation: CoefficientField, rule: FaceRule = FaceRule.HARMONIC
) -> np.ndarray:
    """Face coefficients of background + perturbation minus those of the background."""
    background.grid.require_same(perturbation.grid)
    return face_coefficients(background + perturbation, rule) - face_coefficients(background, rule)


def discrete_gradient(phi: np.ndarray, dx: float) -> np.ndarray:
    """Periodic forward differences, shape (d, *phi.shape)."""
    return np.stack([(np.roll(phi, -1, axis=a) - phi) / dx for a in range(phi.ndim)])


@dataclass(frozen=True)
class SolverParams:
    """Massive parameter, stopping rule, direction and face rule of one solve."""

    T: float
    e: Tuple[float, ...]
    tolerance: float = DEFAULT_TOLERANCE
    max_iterations: Optional[int] = None
    face_rule: FaceRule = FaceRule.HARMONIC
    check_energy: bool = True

    def __post_init__(self):
        if not self.T > 0:
            raise ParameterError(f"massive parameter T must be positive, got {self.T}")
        if not 0 < self.tolerance < 1:
            raise ParameterError(f"tolerance must lie in (0, 1), got {self.tolerance}")
        e = tuple(float(c) for c in self.e)
        if abs(np.linalg.norm(e) - 1.0) > 1e-12:
            raise ParameterError(f"direction must be a unit vector, got {e}")
        object.__setattr__(self, "e", e)
        object.__setattr__(self, "face_rule", FaceRule(self.face_rule))

    @classmethod
    def along_axis(cls, d: int, T: float, axis: int = 0, **kwargs) -> "SolverParams":
        e = [0.0] * d
        e[axis] = 1.0
        return cls(T=T, e=tuple(e), **kwargs)

    @property
    def direction(self) -> np.ndarray:
        return np.asarray(self.e, dtype=float)

    def iteration_cap(self, grid: Grid) -> int:
        return self.max_iterations if self.max_iterations is not None else 10 * grid.size

    def with_direction(self, e: Sequence[float]) -> "SolverParams":
        return SolverParams(
            self.T, tuple(e), self.tolerance, self.max_iterations, self.face_rule, self.check_energy
        )


@dataclass(frozen=True)
class CorrectorField:
    """Cell potential phi and its periodic forward-difference gradient."""

    grid: Grid
    phi: np.ndarray
    gradient: np.ndarray
    iterations: int = 0
    residual: float = 0.0

    def __post_init__(self):
        if self.phi.shape != self.grid.shape:
            raise ShapeError(f"phi shape {self.phi.shape} does not match grid {self.grid.shape}")
        for name in ("phi", "gradient"):
            values = np.ascontiguousarray(getattr(self, name), dtype=float)
            values.setflags(write=False)
            object.__setattr__(self, name, values)

    @classmethod
    def from_phi(cls, grid: Grid, phi: np.ndarray, iterations: int = 0, residual: float = 0.0):
        phi = np.asarray(phi, dtype=float).reshape(grid.shape)
        return cls(grid, phi, discrete_gradient(phi, grid.dx), iterations, residual)

    @classmethod
    def zero(cls, grid: Grid) -> "CorrectorField":
        return cls.from_phi(grid, np.zeros(grid.shape))


@dataclass(frozen=True)
class EnergyReport:
    """Both sides of the discrete energy estimate.

    `lhs` is (1/T)<phi^2> + <g.kg>; `rhs` is sqrt(<g.kg> <e.ke>) with face averages;
    `allowance` is the a-posteriori solver error budget.
    """

    massive: float
    gradient_energy: float
    face_energy: float
    cell_energy: float
    lhs: float
    rhs: float
    allowance: float

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + self.allowance

    @property
    def bounded_by_background(self) -> bool:
        """<g.kg> <= <e.ke> on faces, up to the allowance."""
        return self.gradient_energy <= self.face_energy + self.allowance


@dataclass(frozen=True)
class HomogenizedEstimate:
    """Box-averaged flux and the resulting e.Ae entry of one realization."""

    e: Tuple[float, ...]
    flux: np.ndarray
    value: float
    T: float
    n_cells: int
    provenance: str = "box-average"


@dataclass(frozen=True)
class LinearSystem:
    """Assembled operator and right-hand side for one (field, params) pair."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    faces: np.ndarray


def _neighbors(grid: Grid) -> List[np.ndarray]:
    index = np.arange(grid.size).reshape(grid.shape)
    return [np.roll(index, -1, axis=a).ravel() for a in range(grid.d)]


def assemble_system(A: CoefficientField, params: SolverParams) -> LinearSystem:
    """Sparse SPD matrix and right-hand side of the massive corrector equation."""
    grid = A.grid
    if grid.d != len(params.e):
        raise ShapeError(f"direction has {len(params.e)} components, grid is {grid.d}-dimensional")
    faces = face_coefficients(A, params.face_rule)
    inv_dx2 = 1.0 / grid.dx**2
    cells = np.arange(grid.size)
    diag = np.full(grid.size, 1.0 / params.T)
    rows, cols, vals = [], [], []
    rhs = np.zeros(grid.shape)
    for axis, nbr in enumerate(_neighbors(grid)):
        k = faces[axis].ravel() * inv_dx2
        np.add.at(diag, cells, k)
        np.add.at(diag, nbr, k)
        # both orientations receive the same face value
        rows += [cells, nbr]
        cols += [nbr, cells]
        vals += [-k, -k]
        ke = faces[axis] * params.e[axis]
        rhs += (ke - np.roll(ke, 1, axis=axis)) / grid.dx
    rows.append(cells)
    cols.append(cells)
    vals.append(diag)
    matrix = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.size, grid.size),
    ).tocsr()
    return LinearSystem(matrix, rhs.ravel(), faces)


def _check_field(A: CoefficientField) -> None:
    low, _ = A.eigen_range()
    if not low > 0:
        raise MaterialError(f"coefficient field is not elliptic (smallest eigenvalue {low})")


def _cg(matrix: sp.csr_matrix, rhs: np.ndarray, params: SolverParams, cap: int) -> Tuple[np.ndarray, int, float]:
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return np.zeros_like(rhs), 0, 0.0
    inv_diag = 1.0 / matrix.diagonal()
    jacobi = spla.LinearOperator(matrix.shape, matvec=lambda x: inv_diag * x, dtype=float)
    iterations = 0

    def count(_):
        nonlocal iterations
        iterations += 1

    solution, info = spla.cg(
        matrix, rhs, rtol=params.tolerance, atol=0.0, maxiter=cap, M=jacobi, callback=count
    )
    residual = float(np.linalg.norm(rhs - matrix @ solution)) / rhs_norm
    if info != 0 or residual > RESIDUAL_SLACK * params.tolerance:
        raise ConvergenceError(
            f"conjugate gradients stopped after {iterations} iterations "
            f"with relative residual {residual:.3e}",
            residual=residual,
            iterations=iterations,
        )
    return solution, iterations, residual


def window_cells(grid: Grid, centers: np.ndarray, radius: float) -> np.ndarray:
    """Flat boolean mask of the periodic cubes of half-width `radius` around `centers`."""
    centers = np.asarray(centers, dtype=float).reshape(-1, grid.d)
    inside = np.zeros(grid.shape, dtype=bool)
    axis_centers = grid.centers()
    for x in centers:
        per_axis = [np.abs(grid.box.displacement(x[a], axis_centers)) <= radius for a in range(grid.d)]
        inside |= np.logical_and.reduce(np.meshgrid(*per_axis, indexing="ij"))
    return inside.ravel()


def solve_massive(
    A: CoefficientField, params: SolverParams, window: Optional[np.ndarray] = None
) -> CorrectorField:
    """Solve (1/T) phi - div A (grad phi + e) = 0 with periodic boundary conditions.

    With `window`, a flat boolean cell mask, unknowns outside the window are held
    at zero, which is only meaningful when the field is constant outside it.
    """
    _check_field(A)
    grid = A.grid
    system = assemble_system(A, params)
    cap = params.iteration_cap(grid)
    if window is None or window.all():
        phi, iterations, residual = _cg(system.matrix, system.rhs, params, cap)
        unknowns = grid.size
    else:
        inside = np.flatnonzero(window)
        sub = system.matrix[inside][:, inside].tocsr()
        solution, iterations, residual = _cg(sub, system.rhs[inside], params, cap)
        phi = np.zeros(grid.size)
        phi[inside] = solution
        unknowns = inside.size
    corrector = CorrectorField.from_phi(grid, phi, iterations, residual)
    logger.debug(
        "massive solve: %d unknowns, T=%g, %d iterations, residual %.3e",
        unknowns,
        params.T,
        iterations,
        residual,
    )
    if params.check_energy:
        report = energy_check(A, corrector, params, system)
        if not report.holds:
            raise SolverDefectError(f"energy estimate violated: {report}")
    return corrector


def flux_average(A: CoefficientField, corrector: CorrectorField, params: SolverParams) -> np.ndarray:
    """Box average of the face fluxes k (grad phi + e), one component per axis."""
    A.grid.require_same(corrector.grid)
    faces = face_coefficients(A, params.face_rule)
    return np.array(
        [np.mean(faces[a] * (corrector.gradient[a] + params.e[a])) for a in range(A.grid.d)]
    )


def homogenized_estimate(
    A: CoefficientField, corrector: CorrectorField, params: SolverParams
) -> HomogenizedEstimate:
    flux = flux_average(A, corrector, params)
    return HomogenizedEstimate(
        e=params.e,
        flux=flux,
        value=float(flux @ params.direction),
        T=params.T,
        n_cells=A.grid.size,
    )


def homogenized_matrix(A: CoefficientField, params: SolverParams) -> np.ndarray:
    """Full matrix estimate by solving along every coordinate axis; column j is A e_j."""
    d = A.grid.d
    columns = []
    for axis in range(d):
        axis_params = params.with_direction(np.eye(d)[axis])
        columns.append(flux_average(A, solve_massive(A, axis_params), axis_params))
    return np.stack(columns, axis=1)


@dataclass(frozen=True)
class CoefficientBounds:
    """Voigt-Reuss bounds on e.Ae, from cell diagonals and from the assembled faces.

    For every T, `cell_lower <= face_lower <= e.Ae <= face_upper <= cell_upper`.
    `face_upper` is the small-T limit of the flux average; it equals `cell_upper`
    under arithmetic faces and lies below it under harmonic faces wherever
    neighbouring cells differ. Under harmonic faces `face_lower == cell_lower`.
    """

    cell_lower: float
    face_lower: float
    face_upper: float
    cell_upper: float

    def contains(self, value: float, rtol: float = 1e-9) -> bool:
        slack = rtol * max(abs(self.cell_upper), 1.0)
        return self.face_lower - slack <= value <= self.face_upper + slack


def coefficient_bounds(A: CoefficientField, params: SolverParams) -> CoefficientBounds:
    """Harmonic and arithmetic means of the axis diagonals, weighted by e_i^2."""
    faces = face_coefficients(A, params.face_rule)
    weights = np.asarray(params.e) ** 2
    cell_lower = cell_upper = face_lower = face_upper = 0.0
    for axis, w in enumerate(weights):
        if w == 0:
            continue
        diag = A.diagonal(axis)
        cell_lower += w / float(np.mean(1.0 / diag))
        cell_upper += w * float(np.mean(diag))
        face_lower += w / float(np.mean(1.0 / faces[axis]))
        face_upper += w * float(np.mean(faces[axis]))
    return CoefficientBounds(cell_lower, face_lower, face_upper, cell_upper)


def energy_check(
    A: CoefficientField,
    corrector: CorrectorField,
    params: SolverParams,
    system: Optional[LinearSystem] = None,
) -> EnergyReport:
    """Both sides of (1/T)<phi^2> + <g.kg> <= <g.kg>^(1/2) <e.ke>^(1/2)."""
    A.grid.require_same(corrector.grid)
    if system is None:
        system = assemble_system(A, params)
    faces = system.faces
    grad = corrector.gradient
    massive = float(np.mean(corrector.phi**2)) / params.T
    gradient_energy = float(sum(np.mean(faces[a] * grad[a] ** 2) for a in range(A.grid.d)))
    face_energy = float(sum(np.mean(faces[a]) * params.e[a] ** 2 for a in range(A.grid.d)))
    cell_energy = float(np.mean(A.quadratic(params.direction)))
    lhs = massive + gradient_energy
    rhs = float(np.sqrt(gradient_energy * face_energy))
    defect_bound = (
        float(np.linalg.norm(corrector.phi)) * float(np.linalg.norm(system.rhs)) / A.grid.size
    )
    allowance = ENERGY_SLACK_FACTOR * params.tolerance * (face_energy + defect_bound)
    return EnergyReport(massive, gradient_energy, face_energy, cell_energy, lhs, rhs, allowance)


@dataclass(frozen=True)
class LocalityProfile:
    """Radial envelope of the gradient response to a local phase swap."""

    radii: np.ndarray
    profile: np.ndarray
    peak: float
    rate: Optional[float]
    T: float
    site: Tuple[float, ...] = field(default=())


def swap_phase(
    A: CoefficientField, materials: MaterialPair, site: Sequence[float]
) -> CoefficientField:
    """Exchange A1 and A2 on the cells of the unit cube site + [0, 1)^d."""
    grid = A.grid
    site = np.asarray(site, dtype=float)
    offset = [np.mod(grid.centers() - site[a], grid.box.L) < 1.0 for a in range(grid.d)]
    cube = np.logical_and.reduce(np.meshgrid(*offset, indexing="ij"))
    background = materials.background(grid).packed
    a2 = np.broadcast_to(materials.contrast(grid) + background, A.packed.shape)
    is_background = np.all(A.packed == background, axis=-1)
    swapped = np.where(is_background[..., None], a2, background)
    packed = np.where(cube[..., None], swapped, A.packed)
    return CoefficientField(grid, packed, "A")


def locality_probe(
    A: CoefficientField,
    params: SolverParams,
    site: Sequence[float],
    materials: MaterialPair,
    bin_width: Optional[float] = None,
    floor: float = 1e-6,
    min_radius: float = 2.0,
) -> LocalityProfile:
    """Radial profile of |grad phi - grad phi'| after swapping phases on Q(site).

    The decay rate is the negative slope of log(profile) against radius over the
    bins beyond `min_radius` whose value stays above `floor` times the peak.
    """
    grid = A.grid
    if grid.box.L < 10 * np.sqrt(params.T):
        raise GeometryError(f"box side {grid.box.L} is below 10 sqrt(T) = {10 * np.sqrt(params.T)}")
    site = np.asarray(site, dtype=float)
    if site.shape != (grid.d,) or np.any(site < 0) or np.any(site >= grid.box.L):
        raise GeometryError(f"site {site} is not inside the box")

    base = solve_massive(A, params)
    perturbed = solve_massive(swap_phase(A, materials, site), params)
    change = np.sqrt(np.sum((perturbed.gradient - base.gradient) ** 2, axis=0))

    center = site + 0.5
    gaps = [grid.box.displacement(center[a], grid.centers()) for a in range(grid.d)]
    radius = np.sqrt(sum(g**2 for g in np.meshgrid(*gaps, indexing="ij")))
    width = bin_width if bin_width is not None else max(grid.dx, 0.5)
    bins = np.floor(radius / width).astype(np.int64).ravel()
    profile = np.zeros(bins.max() + 1)
    np.maximum.at(profile, bins, change.ravel())
    radii = (np.arange(profile.size) + 0.5) * width
    peak = float(profile.max())

    rate = None
    if peak > 0:
        usable = (radii >= min_radius) & (radii <= grid.box.L / 2) & (profile > floor * peak)
        if np.count_nonzero(usable) >= 3:
            slope = np.polyfit(radii[usable], np.log(profile[usable]), 1)[0]
            rate = float(-slope)
    logger.debug("locality profile at %s, T=%g: peak %.3e, rate %s", site, params.T, peak, rate)
    return LocalityProfile(radii, profile, peak, rate, params.T, tuple(float(s) for s in site))


def write_corrector(path: Union[str, Path], corrector: CorrectorField) -> Path:
    return write_field(path, corrector.phi, "corrector", corrector.grid.box.L)
