"""Dense linear algebra helpers shared by the rest of the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The functions
here validate shape and finiteness, then defer to LAPACK for the heavy lifting.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TextIO

import numpy as np
from scipy import special

SYMMETRY_TOL = 1e-12


class ConvergenceError(ArithmeticError):
    """Raised when an eigenvalue iteration fails to converge."""


class SingularMatrixError(ArithmeticError):
    """Raised when a linear system is singular to working precision."""


@dataclass(frozen=True)
class GershgorinDisk:
    center: float
    radius: float

    def contains(self, z: complex, tol: float = 0.0) -> bool:
        return abs(z - self.center) <= self.radius + tol


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Return ``data`` as a finite 2-D float64 array, checking shape if given."""
    m = np.array(data, dtype=np.float64)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1) if rows == 1 else m.reshape(-1, 1)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got {m.ndim} dimensions")
    if rows is not None and m.shape[0] != rows:
        raise ValueError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ValueError(f"expected {cols} columns, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains NaN or Inf")
    return m


def as_vector(data, size: int | None = None) -> np.ndarray:
    v = np.array(data, dtype=np.float64).reshape(-1)
    if size is not None and v.shape[0] != size:
        raise ValueError(f"expected a vector of length {size}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains NaN or Inf")
    return v


def _square(M) -> np.ndarray:
    M = as_matrix(M)
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    return M


def frobenius_norm(M) -> float:
    M = as_matrix(M)
    return float(np.sqrt(np.sum(M * M)))


def infinity_norm(M) -> float:
    """Maximum absolute row sum."""
    M = as_matrix(M)
    if M.size == 0:
        return 0.0
    return float(np.max(np.sum(np.abs(M), axis=1)))


def is_symmetric(M, tol: float = SYMMETRY_TOL) -> bool:
    M = as_matrix(M)
    if M.shape[0] != M.shape[1]:
        return False
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    return bool(np.max(np.abs(M - M.T), initial=0.0) <= tol * scale)


def spectral_radius(M) -> float:
    """Largest eigenvalue magnitude of a square matrix.

    Symmetric inputs go through the symmetric tridiagonal solver, everything
    else through Hessenberg QR iteration. Complex pairs are handled internally;
    only the modulus is reported.
    """
    M = _square(M)
    if M.shape[0] == 0:
        return 0.0
    try:
        if is_symmetric(M):
            lam = np.linalg.eigvalsh(M)
        else:
            lam = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"eigenvalue iteration did not converge: {exc}") from exc
    return float(np.max(np.abs(lam)))


def eigenvalues_symmetric(M) -> np.ndarray:
    """All eigenvalues of a symmetric matrix, ascending."""
    M = _square(M)
    if not is_symmetric(M):
        raise ValueError("matrix is not symmetric within tolerance")
    try:
        return np.linalg.eigvalsh(M)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(str(exc)) from exc


def gershgorin_disks(M) -> list[GershgorinDisk]:
    M = _square(M)
    diag = np.diag(M)
    off = np.abs(M)
    np.fill_diagonal(off, 0.0)
    return [GershgorinDisk(float(c), float(r)) for c, r in zip(diag, off.sum(axis=1))]


def solve_linear(A, y) -> np.ndarray:
    """Solve ``A x = y`` by LU with partial pivoting."""
    A = _square(A)
    y = as_vector(y, A.shape[0])
    try:
        x = np.linalg.solve(A, y)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(str(exc)) from exc
    # LAPACK only flags exact zero pivots; catch near-singular systems too.
    if np.linalg.cond(A) > 1.0 / np.finfo(np.float64).eps:
        raise SingularMatrixError("matrix is singular to working precision")
    return x


def chi_square_sf(x: float, dof: int) -> float:
    """P(X > x) for a chi-square variable with ``dof`` degrees of freedom."""
    if dof < 1:
        raise ValueError("dof must be >= 1")
    if x <= 0:
        return 1.0
    return float(special.gammaincc(dof / 2.0, x / 2.0))


# -- text format ----------------------------------------------------------

def format_matrix(M) -> str:
    M = as_matrix(M)
    lines = [f"{M.shape[0]} {M.shape[1]}"]
    for row in M:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def parse_matrix(text: str) -> np.ndarray:
    tokens = text.split()
    if len(tokens) < 2:
        raise ValueError("missing 'rows cols' header")
    try:
        rows, cols = int(tokens[0]), int(tokens[1])
    except ValueError as exc:
        raise ValueError(f"bad matrix header: {tokens[:2]}") from exc
    if rows < 0 or cols < 0:
        raise ValueError("negative matrix dimensions")
    values = tokens[2:]
    if len(values) != rows * cols:
        raise ValueError(f"expected {rows * cols} entries, found {len(values)}")
    data = np.array([float(v) for v in values], dtype=np.float64).reshape(rows, cols)
    return as_matrix(data, rows, cols) if data.size else data


def write_matrix(M, fh: TextIO) -> None:
    fh.write(format_matrix(M))


def read_matrix(fh: TextIO | str) -> np.ndarray:
    if isinstance(fh, str):
        with open(fh) as f:
            return parse_matrix(f.read())
    return parse_matrix(fh.read())

