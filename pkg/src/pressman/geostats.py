"""Log-permeability random fields from a truncated Karhunen-Loeve expansion.

Realizations are ``log10 K = mean + sum_i sqrt(lam_i) xi_i v_i`` where
``(lam_i, v_i)`` are the leading eigenpairs of the dense cell-center
covariance matrix and ``xi_i`` are standard normals.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy import linalg, special
from scipy.spatial.distance import cdist

from .grid import Grid

Seed = Union[int, Sequence[int]]

COVARIANCE_KINDS = ("exponential", "matern")


# log10 variance equal to unit variance of ln K
LOG10_VARIANCE_OF_UNIT_LN = float(1.0 / np.log(10.0) ** 2)


@dataclass(frozen=True)
class GeostatConfig:
    covariance_kind: str = "exponential"
    # 5 cells of the default 24x24 grid on a 1000 m domain
    correlation_length: float = 1000.0 / 24 * 5
    variance: float = LOG10_VARIANCE_OF_UNIT_LN
    mean_log_perm: float = -7.5
    n_modes: int = 200
    matern_smoothness: float = 1.5

    def __post_init__(self):
        if self.covariance_kind not in COVARIANCE_KINDS:
            raise ValueError(f"covariance_kind must be one of {COVARIANCE_KINDS}")
        if not self.correlation_length > 0:
            raise ValueError("correlation_length must be positive")
        if not self.variance >= 0:
            raise ValueError("variance must be non-negative")
        if int(self.n_modes) != self.n_modes or self.n_modes < 1:
            raise ValueError("n_modes must be a positive integer")
        if not self.matern_smoothness > 0:
            raise ValueError("matern_smoothness must be positive")
        if not np.isfinite(self.mean_log_perm):
            raise ValueError("mean_log_perm must be finite")


@dataclass(frozen=True)
class KLBasis:
    eigenvalues: np.ndarray  # (n_modes,), descending
    eigenvectors: np.ndarray  # (n_modes, n_cells)
    shape: tuple[int, int]

    @property
    def n_modes(self) -> int:
        return self.eigenvalues.size

    def pointwise_variance(self) -> np.ndarray:
        """Variance of log10 K captured by the truncated expansion, per cell."""
        return (self.eigenvalues[:, None] * self.eigenvectors**2).sum(axis=0).reshape(self.shape)


def covariance(kind: str, r, correlation_length: float, variance: float, smoothness: float = 1.5):
    """Stationary covariance at separation ``r`` (m)."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("separation distance must be non-negative")
    if kind == "exponential":
        return variance * np.exp(-r / correlation_length)
    if kind == "matern":
        nu = smoothness
        scaled = np.sqrt(2.0 * nu) * r / correlation_length
        with np.errstate(invalid="ignore"):
            c = variance * (2.0 ** (1.0 - nu) / special.gamma(nu)) * scaled**nu * special.kv(nu, scaled)
        # the r -> 0 limit of the Matern form is the variance itself
        return np.where(scaled == 0.0, variance, c)
    raise ValueError(f"unknown covariance kind {kind!r}")


def covariance_matrix(grid: Grid, config: GeostatConfig) -> np.ndarray:
    x, y = grid.cell_centers()
    pts = np.column_stack([x.ravel(), y.ravel()])
    r = cdist(pts, pts)
    return covariance(
        config.covariance_kind, r, config.correlation_length, config.variance, config.matern_smoothness
    )


def build_kl_basis(grid: Grid, config: GeostatConfig) -> KLBasis:
    n = grid.n_cells
    if config.n_modes > n:
        raise ValueError(f"n_modes={config.n_modes} exceeds the {n} grid cells")
    cov = covariance_matrix(grid, config)
    try:
        vals, vecs = linalg.eigh(cov, subset_by_index=[n - config.n_modes, n - 1])
    except linalg.LinAlgError as exc:
        raise RuntimeError(f"covariance eigendecomposition failed: {exc}") from exc
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order].T
    if np.any(vals < -1e-12 * max(1.0, config.variance)):
        raise RuntimeError("covariance matrix has significantly negative eigenvalues")
    vals = np.clip(vals, 0.0, None)
    # fix eigenvector signs so the basis is reproducible across LAPACK builds
    lead = np.argmax(np.abs(vecs), axis=1)
    signs = np.sign(vecs[np.arange(vecs.shape[0]), lead])
    vecs = vecs * signs[:, None]
    return KLBasis(vals, np.ascontiguousarray(vecs), grid.shape)


def sample_log_field(basis: KLBasis, config: GeostatConfig, seed: Seed) -> np.ndarray:
    """log10-permeability realization of shape ``(ny, nx)``."""
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal(basis.n_modes)
    field = config.mean_log_perm + (np.sqrt(basis.eigenvalues) * xi) @ basis.eigenvectors
    return field.reshape(basis.shape)


def sample_field(basis: KLBasis, config: GeostatConfig, seed: Seed) -> np.ndarray:
    """Permeability realization (m^2) of shape ``(ny, nx)``; bitwise reproducible per seed."""
    return 10.0 ** sample_log_field(basis, config, seed)


# --- binary field files -------------------------------------------------------
#
# An ASCII header of "key value" lines terminated by a line "end", followed by
# nx*ny little-endian float64 values in row-major (y-major) order:
#
#     pressman-field 1
#     nx 24
#     ny 24
#     order row-major
#     dtype <f8
#     end

FIELD_MAGIC = "pressman-field 1"


def write_field(path: Union[str, Path], values: np.ndarray) -> None:
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError("field must be a 2D (ny, nx) array")
    ny, nx = values.shape
    header = f"{FIELD_MAGIC}\nnx {nx}\nny {ny}\norder row-major\ndtype <f8\nend\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(values.astype("<f8").tobytes(order="C"))


def read_field(path: Union[str, Path]) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    stream = io.BytesIO(data)
    if stream.readline().decode("ascii").strip() != FIELD_MAGIC:
        raise ValueError(f"{path}: not a pressman field file")
    meta = {}
    while True:
        line = stream.readline()
        if not line:
            raise ValueError(f"{path}: truncated header")
        line = line.decode("ascii").strip()
        if line == "end":
            break
        key, _, value = line.partition(" ")
        meta[key] = value
    if meta.get("order") != "row-major" or meta.get("dtype") != "<f8":
        raise ValueError(f"{path}: unsupported layout {meta}")
    nx, ny = int(meta["nx"]), int(meta["ny"])
    payload = stream.read()
    if len(payload) != 8 * nx * ny:
        raise ValueError(f"{path}: expected {nx * ny} values, found {len(payload) // 8}")
    return np.frombuffer(payload, dtype="<f8").reshape(ny, nx).astype(float)
