"""Stability and continuity constants for the reduced-model error estimators.

Two providers share one interface:

* :class:`SurrogateConstants` evaluates the PG-LOD inf-sup constant once at
  the reference parameter and rescales it with the min-theta factor.
* :class:`ExactConstants` assembles the two-scale system in an explicit basis
  and computes the inf-sup constants by dense singular value decompositions.
  Only feasible on tiny meshes; used to validate the estimators.
"""
import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import grid

SQRT5 = np.sqrt(5.0)


def _free_dense(A, free):
    return np.asarray(A[free][:, free].todense())


def mass_inner_ratio(disc):
    """``lambda_max(M_H, K1_H)``: the largest generalized eigenvalue on free coarse nodes."""
    f = disc.free
    return float(sla.eigh(_free_dense(disc.coarse_mass, f), _free_dense(disc.coarse_inner, f),
                          eigvals_only=True)[-1])


def pglod_infsup(disc, mu, correctors=None):
    """Inf-sup constant of the PG-LOD coarse system and the lifted norm-equivalence constant.

    The trial norm is the energy norm of the multiscale function
    ``(1 - Q) w_H``; the test norm is ``|v_H|_1``.

    Returns
    -------
    gamma : float
    c_eq : float
        ``sup |w_H|_1 / |(1 - Q) w_H|_a``.
    """
    if correctors is None:
        correctors = disc.compute_correctors(mu, gradient=False)
    f = disc.free
    K, _ = disc.assemble_ms_system(correctors)
    Kms = np.asarray(K[f][:, f].todense())
    B = disc.ms_basis(correctors)[:, f]
    G = np.asarray((B.T @ (disc.problem.fine_stiffness(mu) @ B)).todense())
    G = 0.5 * (G + G.T)
    K1 = _free_dense(disc.coarse_inner, f)
    Lt = np.linalg.cholesky(K1)
    Lg = np.linalg.cholesky(G)
    W = sla.solve_triangular(Lt, sla.solve_triangular(Lg, Kms.T, lower=True).T, lower=True)
    gamma = float(np.linalg.svd(W, compute_uv=False)[-1])
    c_eq = float(np.sqrt(sla.eigh(K1, G, eigvals_only=True)[-1]))
    return gamma, c_eq


class SurrogateConstants:
    """Computable surrogates of the estimator constants.

    ``gamma(mu) = gamma(mu_check) * sqrt(alpha_ratio(mu))`` where
    ``alpha_ratio`` is the min-theta factor, and the norm-equivalence
    constant scales with ``alpha_ratio^{-1/2}``.
    """
    kind = "surrogate"

    def __init__(self, disc, objective):
        self.problem = disc.problem
        self.sigma_d = objective.sigma_d
        check = self.problem.mu_check
        self.mu_check = check
        self.gamma_check, self.c_eq_check = pglod_infsup(disc, check)
        self.lam_M = mass_inner_ratio(disc)
        self.alpha_check = self.problem.coefficient(check).min()

    def ratio(self, mu):
        th = self.problem.theta(mu)
        return float(np.min(th / self.problem.theta(self.mu_check)))

    def gamma(self, mu):
        return self.gamma_check * np.sqrt(self.ratio(mu))

    def c_eq(self, mu):
        return self.c_eq_check / np.sqrt(self.ratio(mu))

    def prefactor_pr(self, mu):
        return SQRT5 / self.gamma(mu)

    prefactor_du = prefactor_pr

    def k_mixed(self, mu):
        """Bound of ``k_mu`` with one argument in the energy norm, one in ``|.|_1``."""
        return 0.5 * self.sigma_d * self.lam_M * self.c_eq(mu)

    def k_energy(self, mu):
        """Bound of ``k_mu`` with both arguments in the two-scale energy norm."""
        return 0.5 * self.sigma_d * self.lam_M * self.c_eq(mu) ** 2

    def alpha(self, mu):
        return self.ratio(mu) * self.alpha_check

    def as_dict(self):
        return {"kind": self.kind, "gamma_check": self.gamma_check,
                "c_eq_check": self.c_eq_check, "lam_M": self.lam_M, "alpha_check": self.alpha_check}


class ExplicitTwoScale:
    """The two-scale system in an explicit basis (coarse hats plus kernel bases).

    Patch kernel bases are orthonormal in the patch ``H^1`` inner product,
    so the test Gram matrix is block diagonal with identity patch blocks.
    """

    def __init__(self, disc):
        self.disc = disc
        self.kernels = []
        for T in disc.elements:
            sh = disc.shape(T)
            X = sh.inner.toarray()
            N = sla.null_space(sh.C.toarray())
            L = np.linalg.cholesky(N.T @ X @ N)
            self.kernels.append(sla.solve_triangular(L, N.T, lower=True).T)
        self.sizes = [disc.free.size] + [N.shape[1] for N in self.kernels]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.n = int(self.offsets[-1])
        X = np.zeros((self.n, self.n))
        X[:self.sizes[0], :self.sizes[0]] = _free_dense(disc.coarse_inner, disc.free)
        X[self.sizes[0]:, self.sizes[0]:] = np.eye(self.n - self.sizes[0])
        self.test_gram = X

    def block(self, T):
        return slice(self.offsets[T + 1], self.offsets[T + 2])

    def to_vector(self, v):
        """Coordinates of a :class:`TwoScaleVector` (least squares on the kernel parts)."""
        x = np.zeros(self.n)
        x[:self.sizes[0]] = v.u_H[self.disc.free]
        for T, N in enumerate(self.kernels):
            x[self.block(T)] = np.linalg.lstsq(N, v.parts[T], rcond=None)[0]
        return x

    def system(self, mu, correctors):
        """Matrix ``B[i, j] = B_mu(e_j, e_i)`` and the trial Gram of ``|||.|||_mu``."""
        disc, mesh = self.disc, self.disc.mesh
        f = disc.free
        nH = f.size
        sr = np.sqrt(disc.rho)
        loc = -np.ones(mesh.n_coarse_nodes, dtype=int)
        loc[f] = np.arange(nH)
        B = np.zeros((self.n, self.n))
        B[:nH, :nH] = _free_dense(disc.coarse_stiffness(mu), f)
        Pg = grid.prolongation(mesh.n_H, mesh.n_H, mesh.ratio)
        E = sp.lil_matrix((mesh.n_fine_nodes, self.n))
        E[:, :nH] = Pg[:, f]
        E = E.tocsc()
        blocks = [sp.csc_matrix(Pg[:, f])]
        rho_part = np.zeros((self.n, self.n))
        for T, N in enumerate(self.kernels):
            op = disc.operator(T)
            sh = op.shape
            Kint, Kcol = sh.stiffness(op.coefficient(mu))
            nodes = disc.patches[T].coarse_nodes
            corners = mesh.coarse_corners(T)
            bl = self.block(T)
            rows = loc[nodes]
            m = rows >= 0
            B[rows[m], bl] -= (sh.P.T @ (Kcol @ N))[m]
            cols = loc[corners]
            mc = cols >= 0
            B[bl, cols[mc]] -= sr * (N.T @ op.F_mu(mu))[:, mc]
            B[bl, bl] = sr * (N.T @ (Kint @ N))
            p = disc.patches[T]
            Et = sp.csc_matrix((mesh.n_fine_nodes, N.shape[1]))
            Et = sp.lil_matrix((mesh.n_fine_nodes, N.shape[1]))
            Et[p.fine_nodes[p.interior], :] = -N
            blocks.append(Et.tocsc())
            # Q_T u_H - u_T on the patch
            M = np.zeros((N.shape[0], self.n))
            M[:, cols[mc]] = correctors[T].Q[:, mc]
            M[:, bl] -= N
            rho_part += disc.rho * (M.T @ (Kint @ M))
        Efull = sp.hstack(blocks).tocsc()
        A = np.asarray((Efull.T @ (disc.problem.fine_stiffness(mu) @ Efull)).todense()) + rho_part
        return B, 0.5 * (A + A.T)

    def constants(self, mu, correctors):
        """``beta_pr``, ``beta_du`` and ``c_eq`` at ``mu``."""
        B, A = self.system(mu, correctors)
        Lx = np.linalg.cholesky(self.test_gram)
        La = np.linalg.cholesky(A)

        def smin(M):
            W = sla.solve_triangular(Lx, sla.solve_triangular(La, M.T, lower=True).T, lower=True)
            return float(np.linalg.svd(W, compute_uv=False)[-1])

        nH = self.sizes[0]
        S = np.zeros((self.n, self.n))
        S[:nH, :nH] = self.test_gram[:nH, :nH]
        c_eq = float(np.sqrt(sla.eigh(S, A, eigvals_only=True)[-1]))
        return smin(B), smin(B.T), c_eq


class ExactConstants:
    """Exact estimator constants on tiny meshes (cached per parameter)."""
    kind = "exact"

    def __init__(self, disc, objective):
        self.disc = disc
        self.problem = disc.problem
        self.sigma_d = objective.sigma_d
        self.lam_M = mass_inner_ratio(disc)
        self.explicit = ExplicitTwoScale(disc)
        self._cache = {}

    def _get(self, mu):
        key = np.asarray(mu, float).tobytes()
        if key not in self._cache:
            corr = self.disc.compute_correctors(mu, gradient=False)
            self._cache[key] = self.explicit.constants(mu, corr)
        return self._cache[key]

    def prefactor_pr(self, mu):
        return 1.0 / self._get(mu)[0]

    def prefactor_du(self, mu):
        return 1.0 / self._get(mu)[1]

    def c_eq(self, mu):
        return self._get(mu)[2]

    def k_mixed(self, mu):
        return 0.5 * self.sigma_d * self.lam_M * self.c_eq(mu)

    def k_energy(self, mu):
        return 0.5 * self.sigma_d * self.lam_M * self.c_eq(mu) ** 2

    def alpha(self, mu):
        return self.problem.coefficient(mu).min()

    def as_dict(self):
        return {"kind": self.kind, "lam_M": self.lam_M}
