"""Cartesian grid, TPFA transmissibilities and pressure-system assembly.

Fields live on the grid as 2D arrays of shape ``(ny, nx)``; row ``j`` is the
y index and column ``i`` the x index, so the flat cell index is
``j * nx + i`` (row-major).  Face arrays follow the same convention:

* ``tx`` has shape ``(ny, nx + 1)``: column ``i`` is the face on the west
  side of cell ``i``; columns 0 and ``nx`` are domain boundary faces.
* ``ty`` has shape ``(ny + 1, nx)``: row ``j`` is the face on the south side
  of cell row ``j``; rows 0 and ``ny`` are boundary faces.

Fluxes are oriented along +x / +y.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Union

import numpy as np
from scipy import sparse
from scipy.linalg import cho_solve_banded, cholesky_banded

SIDES = ("west", "east", "south", "north")

BoundarySpec = Union[float, Mapping[str, Optional[float]]]


class SolverError(RuntimeError):
    """Linear solve failed to reach the requested residual."""

    def __init__(self, message: str, iterations: int = 0, residual: float = float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    lx: float
    ly: float

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def cell_volume(self) -> float:
        # unit thickness
        return self.dx * self.dy

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def index(self, i: int, j: int) -> int:
        if not (0 <= i < self.nx and 0 <= j < self.ny):
            raise IndexError(f"cell ({i}, {j}) outside {self.nx}x{self.ny} grid")
        return j * self.nx + i

    def cell(self, index: int) -> tuple[int, int]:
        if not 0 <= index < self.n_cells:
            raise IndexError(f"flat index {index} outside grid of {self.n_cells} cells")
        j, i = divmod(index, self.nx)
        return i, j

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(x, y)`` center coordinates, each of shape ``(ny, nx)``."""
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy
        return np.meshgrid(x, y)


def build_grid(nx: int, ny: int, lx: float, ly: float) -> Grid:
    if int(nx) != nx or int(ny) != ny:
        raise ValueError("cell counts must be integers")
    if nx < 3 or ny < 3:
        raise ValueError(f"grid needs at least 3 cells per axis, got {nx}x{ny}")
    if not (np.isfinite(lx) and np.isfinite(ly)) or lx <= 0 or ly <= 0:
        raise ValueError(f"domain extents must be positive, got lx={lx}, ly={ly}")
    return Grid(int(nx), int(ny), float(lx), float(ly))


@dataclass(frozen=True)
class Transmissibility:
    """Face transmissibilities (m^3 / (Pa s) per unit mobility-permeability)."""

    tx: np.ndarray
    ty: np.ndarray


@dataclass(frozen=True)
class FluxField:
    """Signed volumetric face fluxes (m^3/s), positive along +x / +y."""

    fx: np.ndarray
    fy: np.ndarray

    def divergence(self) -> np.ndarray:
        """Net outflow per cell."""
        return divergence(self.fx, self.fy)


@dataclass
class LinearSystem:
    """Symmetric 5-point system stored by bands.

    ``diag`` has one entry per cell, ``off_x[k]`` couples flat cells ``k`` and
    ``k + 1`` (zero across row breaks) and ``off_y[k]`` couples ``k`` and
    ``k + nx``.
    """

    diag: np.ndarray
    off_x: np.ndarray
    off_y: np.ndarray
    rhs: np.ndarray
    nx: int

    @property
    def size(self) -> int:
        return self.diag.size

    @property
    def matrix(self) -> sparse.csr_matrix:
        n, nx = self.size, self.nx
        return sparse.diags(
            [self.off_y, self.off_x[: n - 1], self.diag, self.off_x[: n - 1], self.off_y],
            [-nx, -1, 0, 1, nx],
            shape=(n, n),
            format="csr",
        )

    def matvec(self, x: np.ndarray) -> np.ndarray:
        nx = self.nx
        y = self.diag * x
        y[:-1] += self.off_x[:-1] * x[1:]
        y[1:] += self.off_x[:-1] * x[:-1]
        y[:-nx] += self.off_y * x[nx:]
        y[nx:] += self.off_y * x[:-nx]
        return y

    def banded_lower(self) -> np.ndarray:
        n, nx = self.size, self.nx
        ab = np.zeros((nx + 1, n))
        ab[0] = self.diag
        ab[1, : n - 1] = self.off_x[: n - 1]
        ab[nx, : n - nx] = self.off_y
        return ab


def normalize_bc(bc_pressure: BoundarySpec) -> dict[str, Optional[float]]:
    """Expand a boundary spec to ``{side: pressure or None}``.

    A scalar means Dirichlet at that value on every side; ``None`` marks a
    no-flow side.
    """
    if isinstance(bc_pressure, Mapping):
        unknown = set(bc_pressure) - set(SIDES)
        if unknown:
            raise ValueError(f"unknown boundary sides: {sorted(unknown)}")
        out = {side: bc_pressure.get(side) for side in SIDES}
    else:
        out = {side: float(bc_pressure) for side in SIDES}
    for side, value in out.items():
        if value is not None and not np.isfinite(value):
            raise ValueError(f"boundary pressure on {side} must be finite")
    return out


def _check_cellwise(grid: Grid, values: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.size != grid.n_cells:
        raise ValueError(f"{name} has {arr.size} entries, grid has {grid.n_cells} cells")
    return arr.reshape(grid.shape)


def transmissibilities(grid: Grid, perm: np.ndarray, mobility: np.ndarray | float = 1.0) -> Transmissibility:
    """Harmonic-average TPFA transmissibilities of ``perm * mobility``.

    Boundary faces use the one-sided half-cell distance; whether they are
    active is decided at assembly time.
    """
    k = _check_cellwise(grid, perm, "perm")
    lam = np.broadcast_to(np.asarray(mobility, dtype=float), k.shape) if np.ndim(mobility) == 0 else _check_cellwise(grid, mobility, "mobility")
    if not np.all(np.isfinite(k)) or np.any(k <= 0):
        raise ValueError("permeability must be strictly positive and finite")
    if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
        raise ValueError("mobility must be strictly positive and finite")
    return face_transmissibility(grid, k * lam)


def face_transmissibility(grid: Grid, m: np.ndarray) -> Transmissibility:
    """Transmissibilities from the cell product ``m = k * lambda`` (unchecked)."""
    cx = grid.dy / grid.dx
    cy = grid.dx / grid.dy
    tx = np.empty((grid.ny, grid.nx + 1))
    ty = np.empty((grid.ny + 1, grid.nx))
    tx[:, 1:-1] = 2.0 * cx / (1.0 / m[:, :-1] + 1.0 / m[:, 1:])
    tx[:, 0] = 2.0 * cx * m[:, 0]
    tx[:, -1] = 2.0 * cx * m[:, -1]
    ty[1:-1, :] = 2.0 * cy / (1.0 / m[:-1, :] + 1.0 / m[1:, :])
    ty[0, :] = 2.0 * cy * m[0, :]
    ty[-1, :] = 2.0 * cy * m[-1, :]
    return Transmissibility(tx, ty)


def face_transmissibility_vjp(grid: Grid, m: np.ndarray, tx_bar: np.ndarray, ty_bar: np.ndarray) -> np.ndarray:
    """Pull face-transmissibility cotangents back onto the cell products ``m``."""
    cx = grid.dy / grid.dx
    cy = grid.dx / grid.dy
    m_bar = np.zeros_like(m)
    a, b = m[:, :-1], m[:, 1:]
    den = (a + b) ** 2
    m_bar[:, :-1] += tx_bar[:, 1:-1] * 2.0 * cx * b * b / den
    m_bar[:, 1:] += tx_bar[:, 1:-1] * 2.0 * cx * a * a / den
    m_bar[:, 0] += tx_bar[:, 0] * 2.0 * cx
    m_bar[:, -1] += tx_bar[:, -1] * 2.0 * cx
    a, b = m[:-1, :], m[1:, :]
    den = (a + b) ** 2
    m_bar[:-1, :] += ty_bar[1:-1, :] * 2.0 * cy * b * b / den
    m_bar[1:, :] += ty_bar[1:-1, :] * 2.0 * cy * a * a / den
    m_bar[0, :] += ty_bar[0, :] * 2.0 * cy
    m_bar[-1, :] += ty_bar[-1, :] * 2.0 * cy
    return m_bar


def active_transmissibility(trans: Transmissibility, bc: Mapping[str, Optional[float]]) -> Transmissibility:
    """Zero the boundary faces of no-flow sides."""
    tx, ty = trans.tx, trans.ty
    if all(bc[s] is not None for s in SIDES):
        return trans
    tx, ty = tx.copy(), ty.copy()
    if bc["west"] is None:
        tx[:, 0] = 0.0
    if bc["east"] is None:
        tx[:, -1] = 0.0
    if bc["south"] is None:
        ty[0, :] = 0.0
    if bc["north"] is None:
        ty[-1, :] = 0.0
    return Transmissibility(tx, ty)


def pressure_drops(p: np.ndarray, bc: Mapping[str, Optional[float]]) -> tuple[np.ndarray, np.ndarray]:
    """Pressure differences across faces (upstream minus downstream along +x/+y).

    Boundary faces use the Dirichlet ghost value; no-flow faces get zero.
    """
    ny, nx = p.shape
    gx = np.zeros((ny, nx + 1))
    gy = np.zeros((ny + 1, nx))
    gx[:, 1:-1] = p[:, :-1] - p[:, 1:]
    gy[1:-1, :] = p[:-1, :] - p[1:, :]
    if bc["west"] is not None:
        gx[:, 0] = bc["west"] - p[:, 0]
    if bc["east"] is not None:
        gx[:, -1] = p[:, -1] - bc["east"]
    if bc["south"] is not None:
        gy[0, :] = bc["south"] - p[0, :]
    if bc["north"] is not None:
        gy[-1, :] = p[-1, :] - bc["north"]
    return gx, gy


def cell_differences(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Linear part of :func:`pressure_drops`; the transpose of :func:`divergence`."""
    ny, nx = x.shape
    gx = np.empty((ny, nx + 1))
    gy = np.empty((ny + 1, nx))
    gx[:, 1:-1] = x[:, :-1] - x[:, 1:]
    gx[:, 0] = -x[:, 0]
    gx[:, -1] = x[:, -1]
    gy[1:-1, :] = x[:-1, :] - x[1:, :]
    gy[0, :] = -x[0, :]
    gy[-1, :] = x[-1, :]
    return gx, gy


def divergence(fx: np.ndarray, fy: np.ndarray) -> np.ndarray:
    """Net outflow per cell of a face field."""
    return (fx[:, 1:] - fx[:, :-1]) + (fy[1:, :] - fy[:-1, :])


def assemble_from_transmissibility(
    grid: Grid, trans: Transmissibility, sources: np.ndarray, bc: Mapping[str, Optional[float]]
) -> LinearSystem:
    t = active_transmissibility(trans, bc)
    tx, ty = t.tx, t.ty
    diag = (tx[:, :-1] + tx[:, 1:] + ty[:-1, :] + ty[1:, :]).ravel()
    off_x = np.zeros(grid.shape)
    off_x[:, :-1] = -tx[:, 1:-1]
    off_y = -ty[1:-1, :].ravel()
    rhs = np.array(sources, dtype=float).reshape(grid.shape)
    if bc["west"] is not None:
        rhs[:, 0] += tx[:, 0] * bc["west"]
    if bc["east"] is not None:
        rhs[:, -1] += tx[:, -1] * bc["east"]
    if bc["south"] is not None:
        rhs[0, :] += ty[0, :] * bc["south"]
    if bc["north"] is not None:
        rhs[-1, :] += ty[-1, :] * bc["north"]
    return LinearSystem(diag, off_x.ravel(), off_y, rhs.ravel(), grid.nx)


def assemble_pressure_system(
    grid: Grid,
    perm: np.ndarray,
    mobility: np.ndarray | float,
    sources: np.ndarray,
    bc_pressure: BoundarySpec = 0.0,
) -> LinearSystem:
    """Assemble ``-div(K lambda grad p) = q`` with the given boundary pressures."""
    src = _check_cellwise(grid, sources, "sources")
    if not np.all(np.isfinite(src)):
        raise ValueError("sources must be finite")
    trans = transmissibilities(grid, perm, mobility)
    return assemble_from_transmissibility(grid, trans, src, normalize_bc(bc_pressure))


def face_fluxes(trans: Transmissibility, p: np.ndarray, bc: Mapping[str, Optional[float]]) -> FluxField:
    gx, gy = pressure_drops(p, bc)
    return FluxField(trans.tx * gx, trans.ty * gy)


class CholeskyFactor:
    """Banded Cholesky factor of a :class:`LinearSystem` matrix, reusable across right-hand sides."""

    def __init__(self, system: LinearSystem):
        self.nx = system.nx
        try:
            self._cb = cholesky_banded(system.banded_lower(), lower=True)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"matrix is not positive definite: {exc}") from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        return cho_solve_banded((self._cb, True), b)


def _relative_residual(system: LinearSystem, x: np.ndarray, b: np.ndarray) -> float:
    nb = np.linalg.norm(b)
    r = np.linalg.norm(system.matvec(x) - b)
    return r / nb if nb > 0 else r


def pcg(system: LinearSystem, b: np.ndarray, rtol: float = 1e-10, max_iter: Optional[int] = None) -> tuple[np.ndarray, int]:
    """Jacobi-preconditioned conjugate gradient. Returns ``(x, iterations)``."""
    n = system.size
    if max_iter is None:
        max_iter = 10 * n
    x = np.zeros(n)
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return x, 0
    diag = system.diag
    if np.any(diag <= 0):
        raise SolverError("non-positive diagonal; matrix is not SPD", 0, 1.0)
    inv_d = 1.0 / diag
    r = b.copy()
    z = inv_d * r
    d = z.copy()
    rz = r @ z
    res = 1.0
    for it in range(1, max_iter + 1):
        ad = system.matvec(d)
        dad = d @ ad
        if dad <= 0:
            raise SolverError("search direction lost positive curvature", it, res)
        alpha = rz / dad
        x += alpha * d
        r -= alpha * ad
        res = np.linalg.norm(r) / norm_b
        if res <= rtol:
            # recurrence residual drifts; confirm against the true one
            true_res = _relative_residual(system, x, b)
            if true_res <= rtol:
                return x, it
            r = b - system.matvec(x)
        z = inv_d * r
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new
    raise SolverError(
        f"PCG did not converge in {max_iter} iterations (relative residual {res:.3e})", max_iter, res
    )


def solve_linear(
    system: LinearSystem,
    method: str = "cholesky",
    rtol: float = 1e-10,
    rhs: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Solve ``A p = rhs``, returning the flat pressure vector.

    ``method`` is ``"pcg"`` (Jacobi-preconditioned CG, at most ``10 n``
    iterations) or ``"cholesky"`` (banded direct factorization).  Either way
    the result is checked against ``rtol`` on the relative residual.
    """
    b = system.rhs if rhs is None else np.asarray(rhs, dtype=float)
    if method == "pcg":
        x, _ = pcg(system, b, rtol)
        return x
    if method != "cholesky":
        raise ValueError(f"unknown linear solver {method!r}")
    if not np.any(b):
        return np.zeros_like(b)
    x = CholeskyFactor(system).solve(b)
    res = _relative_residual(system, x, b)
    if not res <= rtol:
        raise SolverError(f"direct solve residual {res:.3e} exceeds {rtol:.1e}", 1, res)
    return x
