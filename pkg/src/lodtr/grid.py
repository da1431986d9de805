"""Structured two-level quadrilateral meshes on the unit square.

Node, element and patch numbering is lexicographic with the x index running
fastest.  A fine node ``(ix, iy)`` has index ``ix + iy * (n_h + 1)``; a coarse
element ``(tx, ty)`` has index ``tx + ty * n_H``.
"""
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import fem


class MeshError(ValueError):
    """Raised for inconsistent mesh or patch requests."""


@dataclass(frozen=True)
class MeshHierarchy:
    """A coarse mesh ``T_H`` nested in a fine mesh ``T_h``.

    Parameters
    ----------
    n_H : int
        Coarse elements per direction.
    n_h : int
        Fine elements per direction, a multiple of ``n_H``.
    """
    n_H: int
    n_h: int

    def __post_init__(self):
        if self.n_H < 1 or self.n_h < 1:
            raise MeshError("mesh sizes must be positive")
        if self.n_h % self.n_H:
            raise MeshError(f"n_h={self.n_h} is not a multiple of n_H={self.n_H}")
        if self.n_h < 2 * self.n_H:
            raise MeshError("the fine mesh must refine the coarse one at least twice")

    @property
    def ratio(self):
        return self.n_h // self.n_H

    @property
    def H(self):
        return 1.0 / self.n_H

    @property
    def h(self):
        return 1.0 / self.n_h

    @property
    def n_coarse_nodes(self):
        return (self.n_H + 1) ** 2

    @property
    def n_fine_nodes(self):
        return (self.n_h + 1) ** 2

    @property
    def n_coarse_elements(self):
        return self.n_H ** 2

    @property
    def n_fine_elements(self):
        return self.n_h ** 2

    def coarse_element_index(self, tx, ty):
        return tx + ty * self.n_H

    def coarse_element_coords(self, T):
        return T % self.n_H, T // self.n_H

    def coarse_corners(self, T):
        """Global coarse node indices of the corners of element ``T``."""
        tx, ty = self.coarse_element_coords(T)
        n0 = tx + ty * (self.n_H + 1)
        return np.array([n0, n0 + 1, n0 + self.n_H + 1, n0 + self.n_H + 2])

    def coarse_boundary_mask(self):
        return boundary_mask(self.n_H, self.n_H)

    def fine_boundary_mask(self):
        return boundary_mask(self.n_h, self.n_h)

    def coarse_free(self):
        return np.flatnonzero(~self.coarse_boundary_mask())

    def fine_free(self):
        return np.flatnonzero(~self.fine_boundary_mask())

    def fine_cell_centers(self):
        c = (np.arange(self.n_h) + 0.5) * self.h
        X, Y = np.meshgrid(c, c)
        return X.ravel(), Y.ravel()


def build_meshes(n_H, n_h):
    """Return the nested pair of structured meshes on ``[0, 1]^2``."""
    return MeshHierarchy(int(n_H), int(n_h))


def boundary_mask(nx, ny):
    """Boolean mask of the boundary nodes of an ``nx x ny`` cell grid."""
    m = np.zeros((ny + 1, nx + 1), dtype=bool)
    m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = True
    return m.ravel()


def _interp_1d(n_coarse, ratio):
    rows, cols, vals = [], [], []
    for i in range(n_coarse * ratio + 1):
        c, k = divmod(i, ratio)
        if k == 0:
            rows.append(i); cols.append(c); vals.append(1.0)
        else:
            w = k / ratio
            rows += [i, i]; cols += [c, c + 1]; vals += [1.0 - w, w]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_coarse * ratio + 1, n_coarse + 1))


def prolongation(nx, ny, ratio):
    """Bilinear prolongation from an ``nx x ny`` coarse grid to its refinement."""
    return sp.kron(_interp_1d(ny, ratio), _interp_1d(nx, ratio), format="csr")


@lru_cache(maxsize=None)
def element_projection(ratio):
    """Local L2 projection onto Q1 of one coarse element.

    Returns the ``4 x (ratio+1)^2`` matrix ``M_T^{-1} P_T^T M_{h,T}``.
    """
    P = prolongation(1, 1, ratio).toarray()
    Mh = fem.assemble_mass(ratio, ratio, h=1.0 / ratio).toarray()
    MH = P.T @ Mh @ P
    return np.linalg.solve(MH, P.T @ Mh)


def _element_fine_nodes(tx, ty, ratio, nx_nodes):
    """Indices (in a node grid of width ``nx_nodes``) of the fine nodes of a coarse element."""
    k = np.arange(ratio + 1)
    iy, ix = np.meshgrid(ty * ratio + k, tx * ratio + k, indexing="ij")
    return (ix + iy * nx_nodes).ravel()


def _quasi_interpolation(nx, ny, ratio, counts=None):
    """Averaged elementwise L2 projection on an ``nx x ny`` coarse block.

    ``counts`` holds the number of elements sharing each coarse node; by
    default it is computed from the block itself.
    """
    Pi = element_projection(ratio)
    rows, cols, vals = [], [], []
    nfx = nx * ratio + 1
    for ty in range(ny):
        for tx in range(nx):
            fine = _element_fine_nodes(tx, ty, ratio, nfx)
            n0 = tx + ty * (nx + 1)
            corners = [n0, n0 + 1, n0 + nx + 1, n0 + nx + 2]
            for a, z in enumerate(corners):
                rows.append(np.full(fine.size, z)); cols.append(fine); vals.append(Pi[a])
    rows = np.concatenate(rows); cols = np.concatenate(cols); vals = np.concatenate(vals)
    if counts is None:
        counts = np.bincount(rows, minlength=(nx + 1) * (ny + 1)) / (ratio + 1) ** 2
    vals = vals / counts[rows]
    return sp.csr_matrix((vals, (rows, cols)), shape=((nx + 1) * (ny + 1), nfx * (ny * ratio + 1)))


def _node_counts(mesh):
    """Number of coarse elements sharing each coarse node."""
    c1 = np.full(mesh.n_H + 1, 2.0)
    c1[0] = c1[-1] = 1.0
    return np.outer(c1, c1).ravel()


def interpolation_matrix(mesh):
    """Matrix of the quasi-interpolation ``I_H`` (coarse nodes x fine nodes).

    Rows of Dirichlet boundary nodes are zero.
    """
    IH = _quasi_interpolation(mesh.n_H, mesh.n_H, mesh.ratio, _node_counts(mesh))
    keep = (~mesh.coarse_boundary_mask()).astype(float)
    return (sp.diags(keep) @ IH).tocsr()


@dataclass
class Patch:
    """Element patch ``U_l(T)`` together with its index maps.

    Attributes
    ----------
    T : int
        Central coarse element.
    x0, y0, nx, ny : int
        Patch extent in coarse elements.
    fine_nodes : ndarray
        Global fine indices of all patch nodes (patch-local x-fastest order).
    interior : ndarray
        Patch-local indices of nodes not on the patch boundary.
    coarse_nodes : ndarray
        Global coarse indices of all patch coarse nodes.
    constrained : ndarray
        Patch-local coarse indices of nodes not on the global boundary.
    T_local : int
        Patch-local coarse element index of ``T``.
    """
    T: int
    ell: int
    x0: int
    y0: int
    nx: int
    ny: int
    ratio: int
    fine_nodes: np.ndarray = field(repr=False)
    interior: np.ndarray = field(repr=False)
    coarse_nodes: np.ndarray = field(repr=False)
    constrained: np.ndarray = field(repr=False)
    T_local: int = 0
    boundary_sides: tuple = ()
    n_H: int = 0

    @property
    def n_elements(self):
        return self.nx * self.ny

    @property
    def n_fine_cells(self):
        return self.nx * self.ny * self.ratio ** 2

    @property
    def fine_shape(self):
        return self.nx * self.ratio, self.ny * self.ratio

    @property
    def n_interior(self):
        return self.interior.size

    @property
    def elements(self):
        """Global coarse indices of the patch elements."""
        n_H = self.n_H
        ty, tx = np.meshgrid(np.arange(self.y0, self.y0 + self.ny),
                             np.arange(self.x0, self.x0 + self.nx), indexing="ij")
        return (tx + ty * n_H).ravel()

    @property
    def shape_key(self):
        """Key identifying patches with identical local geometry."""
        return (self.nx, self.ny, self.ratio, self.boundary_sides)

    def fine_cells(self, n_h):
        """Global fine cell indices covered by the patch (patch-local order)."""
        fx, fy = self.fine_shape
        ey, ex = np.meshgrid(np.arange(fy) + self.y0 * self.ratio,
                             np.arange(fx) + self.x0 * self.ratio, indexing="ij")
        return (ex + ey * n_h).ravel()

    def T_corners_local(self):
        """Patch-local coarse node indices of the corners of ``T``."""
        tx, ty = self.T_local % self.nx, self.T_local // self.nx
        n0 = tx + ty * (self.nx + 1)
        return np.array([n0, n0 + 1, n0 + self.nx + 1, n0 + self.nx + 2])

    def T_fine_cells_local(self):
        """Patch-local fine cell indices of the element ``T``."""
        r = self.ratio
        tx, ty = self.T_local % self.nx, self.T_local // self.nx
        fx = self.nx * r
        ey, ex = np.meshgrid(ty * r + np.arange(r), tx * r + np.arange(r), indexing="ij")
        return (ex + ey * fx).ravel()


def build_patch(mesh, T, ell):
    """Return the patch ``U_ell(T)`` clipped to the domain.

    Examples
    --------
    >>> p = build_patch(build_meshes(4, 16), 0, 1)
    >>> p.n_elements
    4
    """
    if not 0 <= T < mesh.n_coarse_elements:
        raise MeshError(f"element {T} out of range")
    if ell < 0:
        raise MeshError("patch size must be non-negative")
    n_H, r = mesh.n_H, mesh.ratio
    tx, ty = mesh.coarse_element_coords(T)
    x0, x1 = max(tx - ell, 0), min(tx + ell + 1, n_H)
    y0, y1 = max(ty - ell, 0), min(ty + ell + 1, n_H)
    nx, ny = x1 - x0, y1 - y0

    fnx, fny = nx * r + 1, ny * r + 1
    iy, ix = np.meshgrid(np.arange(fny) + y0 * r, np.arange(fnx) + x0 * r, indexing="ij")
    fine_nodes = (ix + iy * (mesh.n_h + 1)).ravel()
    interior = np.flatnonzero(~boundary_mask(nx * r, ny * r))

    cy, cx = np.meshgrid(np.arange(y0, y1 + 1), np.arange(x0, x1 + 1), indexing="ij")
    coarse_nodes = (cx + cy * (n_H + 1)).ravel()
    on_bnd = (cx == 0) | (cx == n_H) | (cy == 0) | (cy == n_H)
    constrained = np.flatnonzero(~on_bnd.ravel())

    sides = (x0 == 0, x1 == n_H, y0 == 0, y1 == n_H)
    p = Patch(T=T, ell=ell, x0=x0, y0=y0, nx=nx, ny=ny, ratio=r,
              fine_nodes=fine_nodes, interior=interior, coarse_nodes=coarse_nodes,
              constrained=constrained, T_local=(tx - x0) + (ty - y0) * nx,
              boundary_sides=sides, n_H=n_H)
    return p


def patch_prolongation(patch):
    """Bilinear prolongation from patch coarse nodes to all patch fine nodes."""
    return prolongation(patch.nx, patch.ny, patch.ratio)


def patch_constraints(mesh, patch):
    """Rows of ``I_H`` for the constrained patch coarse nodes, on patch interior dofs.

    A fine function supported in the patch lies in the fine-scale space
    exactly when this matrix annihilates its interior values.
    """
    counts = _node_counts(mesh)[patch.coarse_nodes]
    IH = _quasi_interpolation(patch.nx, patch.ny, patch.ratio, counts)
    return IH[patch.constrained][:, patch.interior].tocsr()


def extend_patch_vector(mesh, patch, w_interior):
    """Zero-extend a patch interior vector (or column block) to the fine mesh."""
    w_interior = np.asarray(w_interior)
    shape = (mesh.n_fine_nodes,) + w_interior.shape[1:]
    out = np.zeros(shape)
    out[patch.fine_nodes[patch.interior]] = w_interior
    return out
