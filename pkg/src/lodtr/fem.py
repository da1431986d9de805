"""Q1 finite elements on structured rectangular grids.

Cellwise constant coefficients are passed as flat arrays in x-fastest cell
order.  Local node order is ``(0,0), (1,0), (0,1), (1,1)``.
"""
import logging
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class EllipticityError(ValueError):
    """A coefficient is not positive where it must be."""


class SolverError(RuntimeError):
    """An iterative solve did not reach its tolerance."""


_GAUSS = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


def _shape_values(x, y):
    return np.array([(1 - x) * (1 - y), x * (1 - y), (1 - x) * y, x * y])


def _shape_gradients(x, y):
    return np.array([[-(1 - y), -(1 - x)], [1 - y, -x], [-y, 1 - x], [y, x]])


@lru_cache(maxsize=None)
def local_matrices():
    """Reference stiffness and mass of the unit square, via 2x2 Gauss quadrature."""
    K = np.zeros((4, 4))
    M = np.zeros((4, 4))
    for gx in _GAUSS:
        for gy in _GAUSS:
            phi = _shape_values(gx, gy)
            dphi = _shape_gradients(gx, gy)
            K += 0.25 * dphi @ dphi.T
            M += 0.25 * np.outer(phi, phi)
    return K, M


@lru_cache(maxsize=32)
def _pattern(nx, ny):
    ey, ex = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    n0 = (ex + ey * (nx + 1)).ravel()
    nodes = np.stack([n0, n0 + 1, n0 + nx + 1, n0 + nx + 2], axis=1)
    rows = np.repeat(nodes, 4, axis=1)
    cols = np.tile(nodes, (1, 4))
    return nodes, rows, cols


def _assemble(nx, ny, local, coef, cells=None):
    nodes, rows, cols = _pattern(nx, ny)
    n = (nx + 1) * (ny + 1)
    data = np.asarray(coef, dtype=float)[:, None] * local.ravel()[None, :]
    r, c = (rows, cols) if cells is None else (rows[cells], cols[cells])
    A = sp.coo_matrix((data.ravel(), (r.ravel(), c.ravel())), shape=(n, n)).tocsr()
    A.sum_duplicates()
    return A


def check_coefficient(coef):
    coef = np.asarray(coef, dtype=float)
    if not np.all(np.isfinite(coef)) or np.any(coef < 0) or not np.any(coef > 0):
        raise EllipticityError("coefficient must be finite, nonnegative and positive somewhere")
    return coef


def assemble_stiffness(nx, ny, coef, h=None, cells=None):
    """Stiffness matrix of ``(A grad u, grad v)`` on an ``nx x ny`` grid.

    Parameters
    ----------
    coef : array_like
        Cell values (length ``nx*ny``, or ``len(cells)`` when ``cells`` is given).
    h : float, optional
        Unused for square cells in 2D; accepted for symmetry with the mass.
    cells : array_like of int, optional
        Restrict assembly to these cells.
    """
    coef = check_coefficient(coef)
    K, _ = local_matrices()
    return _assemble(nx, ny, K, coef, cells)


def assemble_mass(nx, ny, h, coef=None):
    """Mass matrix on an ``nx x ny`` grid of square cells of width ``h``."""
    _, M = local_matrices()
    if coef is None:
        coef = np.ones(nx * ny)
    return _assemble(nx, ny, M * h * h, coef)


def assemble_stiffness_component(mesh, cell_coefficient):
    """Global fine stiffness of one affine component (no boundary treatment)."""
    return assemble_stiffness(mesh.n_h, mesh.n_h, cell_coefficient)


def assemble_load(nx, ny, h, f=1.0):
    """Load vector of a constant source ``f``."""
    return assemble_mass(nx, ny, h) @ np.full((nx + 1) * (ny + 1), float(f))


def restrict(A, free):
    """Restrict a sparse matrix to the free degrees of freedom."""
    return A[free][:, free].tocsc()


def solve_spd(A, b, method="cg", tol=1e-12, maxiter=None, x0=None):
    """Solve an SPD system.

    ``method="cg"`` uses conjugate gradients with a Jacobi preconditioner and
    a relative residual tolerance ``tol``; ``method="direct"`` uses SuperLU.

    Raises
    ------
    SolverError
        If CG stops before reaching ``tol``.
    """
    if method == "direct":
        return spla.splu(sp.csc_matrix(A), permc_spec="MMD_AT_PLUS_A").solve(np.asarray(b, float))
    d = A.diagonal()
    if np.any(d <= 0):
        raise EllipticityError("matrix has a nonpositive diagonal")
    Minv = spla.LinearOperator(A.shape, matvec=lambda x: x / d)
    maxiter = maxiter or 20 * A.shape[0]
    x, info = spla.cg(A, b, x0=x0, rtol=tol, atol=0.0, maxiter=maxiter, M=Minv)
    if info != 0:
        res = np.linalg.norm(b - A @ x) / max(np.linalg.norm(b), 1e-300)
        raise SolverError(f"CG did not converge (info={info}, relative residual {res:.2e})")
    return x


class InnerProduct:
    """Energy inner product ``a_{mu_check}(.,.)`` on the free fine dofs.

    The factorization is computed once and reused for Riesz solves.
    """

    def __init__(self, matrix):
        self.matrix = sp.csc_matrix(matrix)
        self._lu = spla.splu(self.matrix, permc_spec="MMD_AT_PLUS_A")

    def __call__(self, u, v):
        return u @ (self.matrix @ v)

    def norm(self, u):
        return np.sqrt(max(self(u, u), 0.0))

    def riesz(self, functional):
        return self._lu.solve(np.asarray(functional, dtype=float))


def riesz_representative(functional, inner):
    """Riesz representative of a dual vector w.r.t. an :class:`InnerProduct`."""
    return inner.riesz(functional)


def min_theta_coercivity(theta, theta_check, alpha_check):
    """Lower bound ``min_q theta_q / theta_check_q * alpha_check``.

    Valid when every affine component is positive semidefinite.
    """
    theta = np.asarray(theta, float)
    theta_check = np.asarray(theta_check, float)
    if np.any(theta_check <= 0):
        raise EllipticityError("reference coefficients must be positive")
    return float(np.min(theta / theta_check) * alpha_check)
