"""Petrov-Galerkin LOD: patch correctors, coarse systems, two-scale operators.

The full-order model of the optimization.  Correctors are computed per coarse
element on its patch by a Schur-complement solve of the saddle-point system

    [K  C^T] [w]   [f]
    [C   0 ] [l] = [0]

where ``C`` holds the rows of ``I_H`` that meet the patch.  All coarse vectors
are indexed by every coarse node and vanish on the Dirichlet boundary.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem, grid
from .counters import EvaluationCounter

log = logging.getLogger(__name__)

PERMC = "MMD_AT_PLUS_A"


class DiscretizationError(RuntimeError):
    """A saddle-point or coarse system could not be solved."""


def _splu(A):
    return spla.splu(sp.csc_matrix(A), permc_spec=PERMC)


class PatchShape:
    """Geometry data shared by all patches with the same local layout.

    Holds the assembly map from cellwise element data to the sparse
    ``(all patch nodes) x (interior nodes)`` stiffness, the patch
    prolongation, the kernel constraints and a lazily built factorization
    of the unit-coefficient inner product used for Riesz solves.
    """

    def __init__(self, mesh, patch):
        self.key = patch.shape_key
        fx, fy = patch.fine_shape
        self.n_nodes = (fx + 1) * (fy + 1)
        self.interior = patch.interior
        self.n_int = patch.interior.size
        self.cell_nodes, rows, cols = fem._pattern(fx, fy)
        self.n_cells = fx * fy

        loc = np.full(self.n_nodes, -1)
        loc[self.interior] = np.arange(self.n_int)
        r, c = rows.ravel(), loc[cols.ravel()]
        keep = np.flatnonzero(c >= 0)
        key = r[keep] * self.n_int + c[keep]
        ukey, pos = np.unique(key, return_inverse=True)
        self.indices = (ukey % self.n_int).astype(np.int32)
        self.indptr = np.searchsorted(ukey // self.n_int, np.arange(self.n_nodes + 1)).astype(np.int32)
        self._assembly = sp.csr_matrix((np.ones(keep.size), (pos, keep)),
                                       shape=(ukey.size, rows.size))
        self.P = grid.patch_prolongation(patch)
        self.C = grid.patch_constraints(mesh, patch)
        self.CT = self.C.T.toarray()
        self._riesz = None

    def stiffness_columns(self, coef):
        """Sparse ``A[:, interior]`` of a cellwise coefficient."""
        K, _ = fem.local_matrices()
        data = self._assembly @ (np.asarray(coef)[:, None] * K.ravel()[None, :]).ravel()
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n_nodes, self.n_int))

    def stiffness(self, coef):
        """Interior stiffness and the column block ``A[:, interior]``."""
        Acol = self.stiffness_columns(coef)
        return Acol[self.interior], Acol

    def _riesz_data(self):
        if self._riesz is None:
            X, _ = self.stiffness(np.ones(self.n_cells))
            lu = _splu(X)
            Y = lu.solve(self.CT)
            S = sla.cho_factor(self.C @ Y)
            self._riesz = (X, lu, Y, S)
        return self._riesz

    @property
    def inner(self):
        """Unit-coefficient interior stiffness (the patch ``H^1`` inner product)."""
        return self._riesz_data()[0]

    def riesz(self, b):
        """Riesz representatives in the patch fine-scale space.

        Solves ``X r + C^T l = b, C r = 0`` for one or several columns ``b``.
        """
        _, lu, Y, S = self._riesz_data()
        r = lu.solve(np.asarray(b, dtype=float))
        return r - Y @ sla.cho_solve(S, self.C @ r)


def constrained_solve(lu, Y, S, C, B):
    """Kernel-constrained solve given a factorization and Schur data."""
    W = lu.solve(B)
    return W - Y @ sla.cho_solve(S, C @ W)


class PatchOperator:
    """Parameter-independent data of one corrector problem.

    Attributes
    ----------
    comps : ndarray
        Global indices of the affine components active on the patch,
        ordered field-major.
    T_comps : ndarray
        Positions in ``comps`` of the two components active on ``T``.
    """

    def __init__(self, problem, patch, shape):
        self.problem = problem
        self.patch = patch
        self.shape = shape
        mesh = problem.mesh
        self.cells = patch.fine_cells(mesh.n_h)
        blocks = problem.cell_block[self.cells]
        self.blocks = np.unique(blocks)
        self.group = np.searchsorted(self.blocks, blocks)
        self.field_values = problem._cell_field[:, self.cells]
        nb = self.blocks.size
        nf = self.field_values.shape[0]
        self.comps = np.concatenate([k * 16 + self.blocks for k in range(nf)])
        self.n_comps = self.comps.size

        nodes = shape.cell_nodes
        rows = (self.group[:, None] * shape.n_nodes + nodes).ravel()
        self._scatter = sp.csr_matrix((np.ones(rows.size), (rows, np.arange(rows.size))),
                                      shape=(nb * shape.n_nodes, rows.size))

        self.corners = patch.T_corners_local()
        tcells = patch.T_fine_cells_local()
        T_block = problem.cell_block[self.cells[tcells[0]]]
        bpos = int(np.searchsorted(self.blocks, T_block))
        self.T_comps = np.array([k * nb + bpos for k in range(nf)])
        K, _ = fem.local_matrices()
        Pc = shape.P[:, self.corners].toarray()
        # a^T_q(lambda_j, .) on all patch nodes, one slab per field
        self._FT = np.zeros((nf, shape.n_nodes, 4))
        for k in range(nf):
            loc = np.einsum("ij,cjk->cik", K, Pc[nodes[tcells]]) * self.field_values[k, tcells, None, None]
            for j in range(4):
                self._FT[k, :, j] = np.bincount(nodes[tcells].ravel(), weights=loc[:, :, j].ravel(),
                                                minlength=shape.n_nodes)
        self.AT = np.einsum("ni,knj->kij", Pc, self._FT)
        self.F = self._FT[:, shape.interior, :]

    @property
    def n_pc(self):
        return self.patch.coarse_nodes.size

    def coefficient(self, mu):
        return self.problem.coefficient(mu, self.cells)

    def T_theta(self, mu):
        """Coefficients of the components active on ``T``."""
        return np.asarray(mu)[self.comps[self.T_comps]]

    def F_mu(self, mu):
        return np.tensordot(self.T_theta(mu), self.F, axes=1)

    def AT_mu(self, mu):
        return np.tensordot(self.T_theta(mu), self.AT, axes=1)

    def apply_components(self, V_int):
        """``A_q[:, interior] @ V`` for every local component.

        Returns an array of shape ``(n_comps, n_nodes, ncol)``.
        """
        V_int = np.asarray(V_int)
        squeeze = V_int.ndim == 1
        if squeeze:
            V_int = V_int[:, None]
        V = np.zeros((self.shape.n_nodes, V_int.shape[1]))
        V[self.shape.interior] = V_int
        out = self.apply_components_full(V)
        return out[:, :, 0] if squeeze else out

    def apply_components_full(self, V):
        """``A_q @ V`` for vectors given on all patch nodes (2-d input)."""
        sh = self.shape
        K, _ = fem.local_matrices()
        loc = np.matmul(K, V[sh.cell_nodes])
        out = []
        for k in range(self.field_values.shape[0]):
            w = (loc * self.field_values[k, :, None, None]).reshape(-1, V.shape[1])
            out.append((self._scatter @ w).reshape(self.blocks.size, sh.n_nodes, -1))
        return np.concatenate(out)

    def component_matrix(self, j):
        """Interior stiffness of local component ``j`` (field-major order)."""
        nb = self.blocks.size
        k, b = divmod(j, nb)
        coef = self.field_values[k] * (self.group == b)
        return self.shape.stiffness(coef)[0]


@dataclass
class CorrectorSet:
    """Correctors of the four shape functions of ``T`` at one parameter.

    Attributes
    ----------
    Q : ndarray
        ``(n_interior, 4)`` corrector values on patch interior dofs.
    kms : ndarray
        ``(n_patch_coarse, 4)`` element contribution to ``K^ms``.
    gtensor : ndarray
        ``(n_comps, 4, n_patch_coarse)`` parameter derivative data.
    Z : ndarray or None
        Patch projections of the patch coarse hats, kept on request.
    W : ndarray or None
        Constrained solves ``K^{-1} X Z`` (unit inner product ``X``), kept with ``Z``.
    """
    T: int
    mu: np.ndarray = field(repr=False)
    Q: np.ndarray = field(repr=False)
    kms: np.ndarray = field(repr=False)
    gtensor: np.ndarray = field(default=None, repr=False)
    Z: np.ndarray = field(default=None, repr=False)
    W: np.ndarray = field(default=None, repr=False)
    residual: float = float("nan")


@dataclass
class TwoScaleVector:
    """Coarse vector plus one fine patch vector per coarse element."""
    u_H: np.ndarray
    parts: list = None

    def __add__(self, other):
        return TwoScaleVector(self.u_H + other.u_H, [a + b for a, b in zip(self.parts, other.parts)])

    def __sub__(self, other):
        return TwoScaleVector(self.u_H - other.u_H, [a - b for a, b in zip(self.parts, other.parts)])

    def __mul__(self, c):
        return TwoScaleVector(c * self.u_H, [c * a for a in self.parts])

    __rmul__ = __mul__


@dataclass
class LodState:
    """FOM quantities at one parameter."""
    mu: np.ndarray
    u_H: np.ndarray
    correctors: list = field(repr=False)
    value: float = None
    p_H: np.ndarray = field(default=None, repr=False)
    gradient: np.ndarray = None


class LodDiscretization:
    """PG-LOD discretization of a :class:`~lodtr.problem.ThermalBlockProblem`.

    Parameters
    ----------
    problem : ThermalBlockProblem
    ell : int
        Patch size (layers).
    rho : float
        Two-scale stabilization, at least 1.
    workers : int
        Size of the thread pool for corrector solves.
    counter : EvaluationCounter, optional
    """

    def __init__(self, problem, ell, rho=1.0, workers=1, counter=None):
        if rho < 1:
            raise ValueError("rho must be at least 1")
        self.problem = problem
        self.mesh = problem.mesh
        self.ell = int(ell)
        self.rho = float(rho)
        self.workers = int(workers)
        self.counter = counter if counter is not None else EvaluationCounter()
        mesh = self.mesh
        self.patches = [grid.build_patch(mesh, T, self.ell) for T in range(mesh.n_coarse_elements)]
        self._shapes = {}
        self._ops = {}
        self.free = mesh.coarse_free()
        n_H = mesh.n_H
        self.coarse_inner = fem.assemble_stiffness(n_H, n_H, np.ones(n_H * n_H)).tocsr()
        self.coarse_mass = fem.assemble_mass(n_H, n_H, mesh.H).tocsr()
        self.load = problem.f * (self.coarse_mass @ np.ones(mesh.n_coarse_nodes))
        self.load[mesh.coarse_boundary_mask()] = 0.0
        self._coarse_inner_lu = _splu(fem.restrict(self.coarse_inner, self.free))
        self._KH = None

    # -- patch data -------------------------------------------------------
    def shape(self, T):
        p = self.patches[T]
        if p.shape_key not in self._shapes:
            self._shapes[p.shape_key] = PatchShape(self.mesh, p)
        return self._shapes[p.shape_key]

    def operator(self, T):
        if T not in self._ops:
            self._ops[T] = PatchOperator(self.problem, self.patches[T], self.shape(T))
        return self._ops[T]

    def map(self, fn, items):
        items = list(items)
        if self.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(self.workers) as ex:
                return list(ex.map(fn, items))
        return [fn(i) for i in items]

    @property
    def elements(self):
        return range(self.mesh.n_coarse_elements)

    # -- coarse data --------------------------------------------------------
    def coarse_stiffness_components(self):
        """``K_{H,q} = P^T A_q P`` for all components."""
        if self._KH is None:
            prob, mesh = self.problem, self.mesh
            P = grid.prolongation(mesh.n_H, mesh.n_H, mesh.ratio)
            self._KH = [(P.T @ fem.assemble_stiffness(mesh.n_h, mesh.n_h, prob.component_cells(q)) @ P).tocsr()
                        for q in range(prob.n_components)]
        return self._KH

    def coarse_stiffness(self, mu):
        th = self.problem.theta(mu)
        KH = self.coarse_stiffness_components()
        return sum(t * K for t, K in zip(th, KH))

    def coarse_riesz(self, r_H):
        out = np.zeros(self.mesh.n_coarse_nodes if r_H.ndim == 1 else (self.mesh.n_coarse_nodes, r_H.shape[1]))
        out[self.free] = self._coarse_inner_lu.solve(np.asarray(r_H[self.free], dtype=float))
        return out

    # -- correctors ---------------------------------------------------------
    def solve_correctors(self, T, mu, keep_z=False, gradient=True, check=False):
        """Correctors ``Q_T(lambda_i)`` and the element contribution to ``K^ms``.

        With ``gradient`` the patch projections ``Z_i`` of the patch coarse
        hats are computed as well; they give the derivative data of the
        discrete functional.  ``check`` records the dual norm of the Galerkin
        orthogonality residual on the patch fine-scale space.
        """
        op = self.operator(T)
        sh = op.shape
        Kint, Kcol = sh.stiffness(op.coefficient(mu))
        try:
            lu = _splu(Kint)
        except RuntimeError as exc:
            raise DiscretizationError(f"patch {T}: singular stiffness") from exc
        Y = lu.solve(sh.CT)
        try:
            S = sla.cho_factor(sh.C @ Y)
        except np.linalg.LinAlgError as exc:
            raise DiscretizationError(f"patch {T}: singular constraint Schur complement") from exc
        F = op.F_mu(mu)
        rhs = [F]
        if gradient:
            rhs.append((Kcol.T @ sh.P).toarray())
        W = constrained_solve(lu, Y, S, sh.C, np.hstack(rhs))
        Q = W[:, :4]
        kms = -(sh.P.T @ (Kcol @ Q))
        kms[op.corners] += op.AT_mu(mu)
        corr = CorrectorSet(T=T, mu=np.array(mu, dtype=float), Q=Q, kms=kms)
        if check:
            corr.residual = self._kernel_residual(sh, F - Kint @ Q)
        if gradient:
            Z = W[:, 4:]
            nq = op.n_comps
            Wq = op.apply_components(Q).transpose(1, 0, 2).reshape(sh.n_nodes, nq * 4)
            g = (Wq[sh.interior].T @ Z - (sh.P.T @ Wq).T).reshape(nq, 4, -1)
            for t, qi in enumerate(op.T_comps):
                g[qi] -= op.F[t].T @ Z
                g[qi][:, op.corners] += op.AT[t]
            corr.gtensor = g
            if keep_z:
                corr.Z = Z
                corr.W = constrained_solve(lu, Y, S, sh.C, sh.inner @ Z)
        self.counter.add("LOD local")
        return corr

    @staticmethod
    def _kernel_residual(sh, res):
        """Dual norm of a residual restricted to the patch fine-scale space."""
        r = sh.riesz(res)
        return float(np.sqrt(max(np.sum(r * (sh.inner @ r)), 0.0)))

    def compute_correctors(self, mu, keep_z=False, gradient=True, check=False):
        return self.map(lambda T: self.solve_correctors(T, mu, keep_z=keep_z, gradient=gradient, check=check),
                        self.elements)

    # -- coarse systems -----------------------------------------------------
    def assemble_ms_system(self, correctors):
        """Sparse ``K^ms`` with ``K^ms_ij = a((1 - Q) phi_j, phi_i)`` and the load."""
        rows, cols, vals = [], [], []
        for c in correctors:
            p = self.patches[c.T]
            corners = self.mesh.coarse_corners(c.T)
            r, cc = np.meshgrid(p.coarse_nodes, corners, indexing="ij")
            rows.append(r.ravel()); cols.append(cc.ravel()); vals.append(c.kms.ravel())
        n = self.mesh.n_coarse_nodes
        K = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        return K, self.load.copy()

    def _coarse_solve(self, K, b, transpose=False, category="LOD coarse"):
        f = self.free
        A = K[f][:, f]
        if transpose:
            A = A.T
        u = np.zeros(self.mesh.n_coarse_nodes)
        try:
            u[f] = spla.spsolve(sp.csc_matrix(A), b[f])
        except RuntimeError as exc:
            raise DiscretizationError("coarse system is singular; increase the patch size") from exc
        if not np.all(np.isfinite(u)):
            raise DiscretizationError("coarse solve produced non-finite values; increase the patch size")
        self.counter.add(category)
        return u

    def solve_primal(self, mu, correctors=None):
        if correctors is None:
            correctors = self.compute_correctors(mu, gradient=False)
        K, b = self.assemble_ms_system(correctors)
        return self._coarse_solve(K, b)

    def solve_dual(self, correctors, rhs):
        """Solve ``(K^ms)^T p = rhs``."""
        K, _ = self.assemble_ms_system(correctors)
        return self._coarse_solve(K, rhs, transpose=True)

    def residual_derivatives(self, correctors, u_H, p_H):
        """``d/dmu_q`` of ``a((1 - Q_mu) u_H, p_H)`` for every component ``q``.

        Exact derivative of the localized PG-LOD bilinear form including the
        parameter dependence of the correctors.
        """
        out = np.zeros(self.problem.n_components)
        for c in correctors:
            op = self.operator(c.T)
            uT = u_H[self.mesh.coarse_corners(c.T)]
            pU = p_H[self.patches[c.T].coarse_nodes]
            out[op.comps] += np.einsum("j,qji,i->q", uT, c.gtensor, pU)
        return out

    def gradient(self, objective, mu, correctors, u_H, p_H):
        """Adjoint gradient ``d_mu J + d_mu r(u_H)[p_H]``."""
        da = self.residual_derivatives(correctors, u_H, p_H)
        return objective.dmu(mu) - self.problem.dtheta(mu).T @ da

    def evaluate(self, objective, mu, gradient=True, keep_z=False):
        """Value (and gradient) of the localized reduced functional at ``mu``."""
        mu = self.problem.check_parameter(mu).copy()
        corr = self.compute_correctors(mu, keep_z=keep_z, gradient=gradient)
        K, b = self.assemble_ms_system(corr)
        u = self._coarse_solve(K, b)
        state = LodState(mu=mu, u_H=u, correctors=corr, value=objective.value(u, mu))
        if gradient:
            state.p_H = self._coarse_solve(K, objective.du(u), transpose=True)
            state.gradient = self.gradient(objective, mu, corr, u, state.p_H)
        return state

    # -- two-scale formulation ---------------------------------------------
    def lift(self, u_H, correctors):
        """Two-scale representation ``(u_H, {Q_T u_H})``."""
        parts = [c.Q @ u_H[self.mesh.coarse_corners(c.T)] for c in correctors]
        return TwoScaleVector(np.array(u_H, dtype=float), parts)

    def lift_dual(self, p_H, correctors):
        """Two-scale adjoint ``(p_H, {rho^{-1/2} z_T})``; needs ``keep_z`` correctors."""
        parts = [c.Z @ p_H[self.patches[c.T].coarse_nodes] / np.sqrt(self.rho) for c in correctors]
        return TwoScaleVector(np.array(p_H, dtype=float), parts)

    def supremizer(self, p_H, correctors):
        """Two-scale ``phi`` with ``B_mu(phi, v) = (p, v)`` for the lifted dual ``p``.

        Needs correctors computed with ``keep_z``.  Adding ``phi`` to a
        minimal-residual trial space makes the derivative of the reduced
        output exact at the parameter of the correctors.
        """
        mesh = self.mesh
        K, _ = self.assemble_ms_system(correctors)
        rhs = np.zeros(mesh.n_coarse_nodes)
        rhs[self.free] = (self.coarse_inner @ p_H)[self.free]
        extra = []
        for c in correctors:
            nodes = self.patches[c.T].coarse_nodes
            w = c.W @ p_H[nodes] / self.rho
            _, Kcol = self.shape(c.T).stiffness(self.operator(c.T).coefficient(c.mu))
            rhs[nodes] += self.shape(c.T).P.T @ (Kcol @ w)
            extra.append(w)
        rhs[~self.free_mask] = 0.0
        phi_H = self._coarse_solve(K, rhs)
        parts = [c.Q @ phi_H[mesh.coarse_corners(c.T)] + w for c, w in zip(correctors, extra)]
        return TwoScaleVector(phi_H, parts)

    def zero_two_scale(self):
        return TwoScaleVector(np.zeros(self.mesh.n_coarse_nodes),
                              [np.zeros(self.shape(T).n_int) for T in self.elements])

    def operator_action(self, mu, v, adjoint=False):
        """Dual vector of ``B_mu(v, .)`` (or ``B_mu(., v)`` with ``adjoint``)."""
        sr = np.sqrt(self.rho)
        mesh = self.mesh
        coarse = self.coarse_stiffness(mu) @ v.u_H
        parts = []
        for T in self.elements:
            op = self.operator(T)
            sh = op.shape
            Kint, Kcol = sh.stiffness(op.coefficient(mu))
            corners = mesh.coarse_corners(T)
            nodes = self.patches[T].coarse_nodes
            F = op.F_mu(mu)
            vT = v.parts[T]
            if not adjoint:
                coarse[nodes] -= sh.P.T @ (Kcol @ vT)
                parts.append(sr * (Kint @ vT - F @ v.u_H[corners]))
            else:
                coarse[corners] -= sr * (F.T @ vT)
                parts.append(sr * (Kint @ vT) - Kcol.T @ (sh.P @ v.u_H[nodes]))
        coarse[~self.free_mask] = 0.0
        return TwoScaleVector(coarse, parts)

    @property
    def free_mask(self):
        m = np.zeros(self.mesh.n_coarse_nodes, dtype=bool)
        m[self.free] = True
        return m

    def residual_functional(self, mu, u, rhs=None, adjoint=False):
        """Dual vector ``F - B_mu(u, .)``; ``rhs`` defaults to the load."""
        Bu = self.operator_action(mu, u, adjoint=adjoint)
        F = self.load if rhs is None else rhs
        return TwoScaleVector(F * self.free_mask - Bu.u_H, [-p for p in Bu.parts])

    def two_scale_residual(self, mu, u, v):
        """``F(v) - B_mu(u, v)``."""
        return self.pair(self.residual_functional(mu, u), v)

    @staticmethod
    def pair(functional, v):
        return float(functional.u_H @ v.u_H + sum(a @ b for a, b in zip(functional.parts, v.parts)))

    def two_scale_norm(self, u):
        """``|||u|||^2 = |u_H|_1^2 + sum_T |u_T|_1^2``."""
        s = u.u_H @ (self.coarse_inner @ u.u_H)
        for T, uT in zip(self.elements, u.parts):
            s += uT @ (self.shape(T).inner @ uT)
        return float(np.sqrt(max(s, 0.0)))

    def riesz(self, functional):
        """Riesz representative in the two-scale inner product."""
        return TwoScaleVector(self.coarse_riesz(functional.u_H),
                              [self.shape(T).riesz(r) for T, r in zip(self.elements, functional.parts)])

    def dual_norm(self, functional):
        return self.two_scale_norm(self.riesz(functional))

    def energy_norm(self, mu, u, correctors, fine_stiffness=None):
        """``|||u|||_mu^2 = |u_H - sum u_T|_a^2 + rho sum_T |Q_T u_H - u_T|_a^2``."""
        mesh = self.mesh
        P = grid.prolongation(mesh.n_H, mesh.n_H, mesh.ratio)
        w = P @ u.u_H
        s = 0.0
        for c, uT in zip(correctors, u.parts):
            p = self.patches[c.T]
            w[p.fine_nodes[p.interior]] -= uT
            op = self.operator(c.T)
            Kint, _ = op.shape.stiffness(op.coefficient(mu))
            d = c.Q @ u.u_H[mesh.coarse_corners(c.T)] - uT
            s += self.rho * d @ (Kint @ d)
        A = fine_stiffness if fine_stiffness is not None else self.problem.fine_stiffness(mu)
        s += w @ (A @ w)
        return float(np.sqrt(max(s, 0.0)))

    def ms_basis(self, correctors):
        """Sparse fine-node matrix of the multiscale functions ``(1 - Q) phi_j``."""
        mesh = self.mesh
        P = grid.prolongation(mesh.n_H, mesh.n_H, mesh.ratio).tocoo()
        rows, cols, vals = [P.row], [P.col], [P.data]
        for c in correctors:
            p = self.patches[c.T]
            fn = p.fine_nodes[p.interior]
            for j, z in enumerate(mesh.coarse_corners(c.T)):
                rows.append(fn); cols.append(np.full(fn.size, z)); vals.append(-c.Q[:, j])
        B = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(mesh.n_fine_nodes, mesh.n_coarse_nodes))
        return B


def solve_correctors(disc, T, mu):
    """Functional form of :meth:`LodDiscretization.solve_correctors`."""
    return disc.solve_correctors(T, mu)


def assemble_ms_system(disc, mu, correctors):
    return disc.assemble_ms_system(correctors)


def solve_pglod_primal(disc, mu):
    """PG-LOD coarse solution and its correctors."""
    corr = disc.compute_correctors(mu)
    return disc.solve_primal(mu, corr), corr


def solve_pglod_dual(disc, objective, mu, u_H, correctors):
    return disc.solve_dual(correctors, objective.du(u_H))


def fom_gradient(disc, objective, mu, u_H, p_H, correctors):
    return disc.gradient(objective, mu, correctors, u_H, p_H)
