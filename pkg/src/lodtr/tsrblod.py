"""Two-stage reduced model of the localized PG-LOD.

Stage 1 keeps one reduced corrector space per coarse element with a
residual estimator assembled from Gram data.  Stage 2 projects the two-scale
formulation onto spaces of lifted snapshots by minimizing the residual in the
dual of the two-scale inner product.

Two-scale reduced vectors are stored compactly: a coarse vector plus, for each
coarse element, coefficients with respect to the Stage-1 basis of that element.
Since Stage-1 bases are orthonormal in the patch ``H^1`` inner product, the
two-scale inner product of compact vectors is
``u_H^T K1 v_H + sum_T c_T^T d_T``.
"""
import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .counters import EvaluationCounter
from .lod import TwoScaleVector

log = logging.getLogger(__name__)

GS_TOL = 1e-10
FORMAT_VERSION = 1
# Gram-based residual norms below this fraction of the rhs norm are recomputed
# by explicit Riesz solves (cancellation in ||F||^2 - 2 c.g + c.N c)
EXPLICIT_BELOW = 1e-5


class EstimatorWarning(UserWarning):
    """A Gram-based squared norm came out negative and was clamped."""


def _clamped_sqrt(x, what):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        warnings.warn(f"negative squared {what} {x.min():.3e} clamped to zero", EstimatorWarning,
                      stacklevel=3)
    return np.sqrt(np.maximum(x, 0.0))


def gram_schmidt(V, X, basis=None, tol=GS_TOL):
    """Orthonormalize the columns of ``V`` against ``basis`` in the inner product ``X``.

    Each candidate is orthogonalized twice; it is dropped when its remaining
    norm falls below ``tol`` times its initial norm.

    Parameters
    ----------
    V : ndarray (n, m)
    X : callable or matrix
        Inner product ``X(a, b) -> a^T X b`` for blocks of columns.
    basis : ndarray (n, k), optional

    Returns
    -------
    ndarray (n, m')
        The new orthonormal columns only.
    """
    ip = X if callable(X) else (lambda a, b: a.T @ (X @ b))
    new = []
    cur = np.zeros((V.shape[0], 0)) if basis is None else basis
    for j in range(V.shape[1]):
        v = V[:, j:j + 1].copy()
        n0 = np.sqrt(max(ip(v, v).item(), 0.0))
        if n0 == 0:
            continue
        for _ in range(2):
            if cur.shape[1]:
                v -= cur @ ip(cur, v)
        n1 = np.sqrt(max(ip(v, v).item(), 0.0))
        if n1 <= tol * n0:
            log.debug("snapshot column %d dropped (relative norm %.2e)", j, n1 / n0)
            continue
        v /= n1
        cur = np.hstack([cur, v])
        new.append(v)
    return np.hstack(new) if new else np.zeros((V.shape[0], 0))


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------
class Stage1Model:
    """Reduced corrector space of one coarse element.

    Parameters
    ----------
    disc : LodDiscretization
    T : int
    gram : bool
        Assemble the estimator Gram data while enriching.  Relaxed runs switch
        this off during early iterations and call :meth:`assemble_gram` later.
    """

    def __init__(self, disc, T, gram=True):
        self.disc = disc
        self.T = T
        self.op = disc.operator(T)
        self.sh = self.op.shape
        self.counter = disc.counter
        op, sh = self.op, self.sh
        self.nf = op.F.shape[0]
        self.nq = op.n_comps
        self.basis = np.zeros((sh.n_int, 0))
        self.A_rb = np.zeros((self.nq, 0, 0))
        self.f_rb = np.zeros((self.nf, 0, 4))
        self.PK = np.zeros((self.nq, op.n_pc, 0))
        self.snapshots = []
        prob = disc.problem
        check = prob.mu_check
        self._theta_check = prob.theta(check)[op.comps]
        self._alpha_check = prob.coefficient(check, op.cells).min()
        # shape functionals a^T_t(lambda_j, .), column t * 4 + j
        self._S = op.F.transpose(1, 0, 2).reshape(sh.n_int, self.nf * 4)
        self.G_SS = self._S.T @ sh.riesz(self._S)
        self.gram_ready = False
        if gram:
            self._reset_gram()

    @property
    def size(self):
        return self.basis.shape[1]

    def _reset_gram(self):
        self.G_SB = np.zeros((self.nf * 4, self.nq, 0))
        self.G_BB = np.zeros((self.nq, 0, self.nq, 0))
        self.gram_ready = True

    def alpha(self, mu):
        """Coercivity lower bound of ``A_mu`` on the patch (min-theta)."""
        th = self.disc.problem.theta(mu)[self.op.comps]
        return float(np.min(th / self._theta_check)) * self._alpha_check

    def _functionals(self, V):
        """``(A_q V)`` on interior dofs, shape ``(n_int, nq, m)``."""
        return self.op.apply_components(V)[:, self.sh.interior, :].transpose(1, 0, 2)

    def add_vectors(self, V):
        """Append the novel directions of ``V``; returns the number added."""
        return self._append(gram_schmidt(V, self.sh.inner, self.basis))

    def _append(self, new):
        """Update reduced data for columns already orthonormal to the basis."""
        m = new.shape[1]
        if m == 0:
            return 0
        N = self.size
        AV = self.op.apply_components(new)
        B_new = AV[:, self.sh.interior, :]
        cross = np.einsum("ni,qnm->qim", self.basis, B_new)
        diag = np.einsum("ni,qnm->qim", new, B_new)
        A = np.zeros((self.nq, N + m, N + m))
        A[:, :N, :N] = self.A_rb
        A[:, :N, N:] = cross
        A[:, N:, :N] = cross.transpose(0, 2, 1)
        A[:, N:, N:] = 0.5 * (diag + diag.transpose(0, 2, 1))
        self.A_rb = A
        self.f_rb = np.concatenate([self.f_rb, np.einsum("nm,tnj->tmj", new, self.op.F)], axis=1)
        self.PK = np.concatenate([self.PK, np.stack([self.sh.P.T @ AV[q] for q in range(self.nq)])], axis=2)
        if self.gram_ready:
            Bn = B_new.transpose(1, 0, 2).reshape(self.sh.n_int, -1)
            R = self.sh.riesz(Bn)
            G_nn = (Bn.T @ R).reshape(self.nq, m, self.nq, m)
            G_SB = np.zeros((self.nf * 4, self.nq, N + m))
            G_SB[:, :, :N] = self.G_SB
            G_SB[:, :, N:] = (self._S.T @ R).reshape(-1, self.nq, m)
            G = np.zeros((self.nq, N + m, self.nq, N + m))
            G[:, :N, :, :N] = self.G_BB
            if N:
                Bo = self._functionals(self.basis).reshape(self.sh.n_int, -1)
                G_on = (Bo.T @ R).reshape(self.nq, N, self.nq, m)
                G[:, :N, :, N:] = G_on
                G[:, N:, :, :N] = G_on.transpose(2, 3, 0, 1)
            G[:, N:, :, N:] = G_nn
            self.G_SB, self.G_BB = G_SB, G
        self.basis = np.hstack([self.basis, new])
        return m

    def assemble_gram(self):
        """Estimator Gram data from scratch for the current basis."""
        self._reset_gram()
        N = self.size
        if N:
            B = self._functionals(self.basis).reshape(self.sh.n_int, -1)
            R = self.sh.riesz(B)
            self.G_BB = (B.T @ R).reshape(self.nq, N, self.nq, N)
            self.G_SB = (self._S.T @ R).reshape(-1, self.nq, N)

    def enrich(self, mu, tau=None, correctors=None, p_H=None):
        """Add the exact correctors at ``mu`` unless the estimator is below ``tau``.

        Without Gram data the enrichment is unconditional.  Correctors of a
        preceding full-order evaluation may be passed to avoid a second solve;
        if they carry the hat projections ``Z`` and ``p_H`` is given, the patch
        part of the two-scale dual solution is added as well.
        """
        if tau is not None and self.gram_ready and self.size:
            if self.estimator(mu).max() <= tau:
                return False
        if correctors is None:
            correctors = self.disc.solve_correctors(self.T, mu, gradient=False)
        V = correctors.Q
        if correctors.Z is not None and p_H is not None:
            p_U = p_H[self.op.patch.coarse_nodes]
            extra = [correctors.Z @ p_U]
            if correctors.W is not None:
                extra.append(correctors.W @ p_U)
            V = np.hstack([V] + [v[:, None] for v in extra])
        self.snapshots.append(np.array(mu, dtype=float))
        self.add_vectors(V)
        return True

    def coordinates(self, v):
        """Coefficients of the orthogonal projection of ``v`` onto the basis."""
        return self.basis.T @ (self.sh.inner @ v)

    # -- online -------------------------------------------------------------
    def _theta(self, mu):
        return self.disc.problem.theta(mu)[self.op.comps]

    def reduced_operator(self, mu):
        return np.tensordot(self._theta(mu), self.A_rb, axes=1)

    def solve(self, mu):
        """Reduced corrector coefficients ``(N, 4)`` of the four shape functions."""
        self.counter.add("RBLOD local")
        if self.size == 0:
            return np.zeros((0, 4))
        th = self._theta(mu)
        f = np.tensordot(th[self.op.T_comps], self.f_rb, axes=1)
        return np.linalg.solve(np.tensordot(th, self.A_rb, axes=1), f)

    def element_stiffness(self, mu, C):
        """Element contribution to the reduced ``K^ms`` (patch coarse x corners)."""
        kms = -np.tensordot(self._theta(mu), self.PK, axes=1) @ C
        kms[self.op.corners] += self.op.AT_mu(mu)
        return kms

    def estimator(self, mu, C=None, method="auto"):
        """``alpha^{-1/2}`` times the dual norm of the corrector residuals.

        Parameters
        ----------
        method : {"auto", "gram", "explicit"}
            ``auto`` uses the Gram data unless cancellation makes it unreliable.

        Returns
        -------
        ndarray (4,)
        """
        if C is None:
            C = self.solve(mu)
        if method == "explicit" or not self.gram_ready:
            return self._explicit(mu, C)
        th = self._theta(mu)
        Sc = np.zeros((self.nf, 4, 4))
        for t, qi in enumerate(self.op.T_comps):
            Sc[t] = th[qi] * np.eye(4)
        Sc = Sc.reshape(self.nf * 4, 4)
        Bc = -(th[:, None, None] * C[None]).reshape(-1, 4)
        GSB = self.G_SB.reshape(self.nf * 4, -1)
        GBB = self.G_BB.reshape(Bc.shape[0], Bc.shape[0])
        ss = np.einsum("ij,ik,kj->j", Sc, self.G_SS, Sc)
        sq = ss + 2 * np.einsum("ij,ik,kj->j", Sc, GSB, Bc) + np.einsum("ij,ik,kj->j", Bc, GBB, Bc)
        if method == "auto" and np.any(sq < EXPLICIT_BELOW ** 2 * ss):
            return self._explicit(mu, C)
        return _clamped_sqrt(sq, "local residual norm") / np.sqrt(self.alpha(mu))

    def _explicit(self, mu, C):
        Kint, _ = self.sh.stiffness(self.op.coefficient(mu))
        res = self.op.F_mu(mu) - Kint @ (self.basis @ C)
        r = self.sh.riesz(res)
        return np.sqrt(np.sum(r * (self.sh.inner @ r), axis=0)) / np.sqrt(self.alpha(mu))


def build_stage1(disc, gram=True):
    return [Stage1Model(disc, T, gram=gram) for T in disc.elements]


def stage1_enrich(models, mu, tau=None, state=None):
    """Enrich all Stage-1 models at ``mu``; returns the number actually enriched.

    ``state`` is an optional :class:`~lodtr.lod.LodState` at ``mu`` whose
    correctors (and dual solution) are reused.
    """
    disc = models[0].disc
    if state is None:
        return sum(disc.map(lambda m: m.enrich(mu, tau), models))
    return sum(disc.map(lambda m: m.enrich(mu, tau, state.correctors[m.T], state.p_H), models))


@dataclass
class _RomCorrector:
    T: int
    kms: np.ndarray


class RblodSolver:
    """PG-LOD with Stage-1 reduced correctors."""

    def __init__(self, disc, models):
        self.disc = disc
        self.models = models

    def correctors(self, mu):
        return self.disc.map(lambda m: m.solve(mu), self.models)

    def primal(self, mu, coeffs=None):
        coeffs = self.correctors(mu) if coeffs is None else coeffs
        K, b = self.disc.assemble_ms_system(
            [_RomCorrector(m.T, m.element_stiffness(mu, C)) for m, C in zip(self.models, coeffs)])
        return self.disc._coarse_solve(K, b, category="RBLOD coarse"), K, coeffs

    def snapshot(self, objective, mu):
        """Compact primal and dual two-scale lifts at ``mu``."""
        u_H, K, coeffs = self.primal(mu)
        p_H = self.disc._coarse_solve(K, objective.du(u_H), transpose=True, category="RBLOD coarse")
        sr = np.sqrt(self.disc.rho)
        mesh = self.disc.mesh
        pr, du = [], []
        for m, C in zip(self.models, coeffs):
            pr.append(C @ u_H[mesh.coarse_corners(m.T)])
            if m.size:
                rhs = np.tensordot(m._theta(mu), m.PK, axes=1).T @ p_H[m.op.patch.coarse_nodes]
                du.append(np.linalg.solve(m.reduced_operator(mu), rhs) / sr)
            else:
                du.append(np.zeros(0))
        return (u_H, pr), (p_H, du)


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------
class CompactBasis:
    """Two-scale reduced basis: coarse matrix ``H`` and per-element coefficients."""

    def __init__(self, H, coeffs):
        self.H = H
        self.coeffs = coeffs

    @property
    def size(self):
        return self.H.shape[1]

    @classmethod
    def from_snapshots(cls, snaps, K1):
        n = len(snaps)
        H = np.column_stack([s[0] for s in snaps]) if n else None
        nT = len(snaps[0][1])
        coeffs = [np.column_stack([s[1][T] for s in snaps]) for T in range(nT)]
        sizes = [c.shape[0] for c in coeffs]
        offs = np.concatenate([[0], np.cumsum(sizes)])
        stacked = np.vstack([H] + coeffs)
        nH = H.shape[0]
        X = lambda a, b: a[:nH].T @ (K1 @ b[:nH]) + a[nH:].T @ b[nH:]
        Q = gram_schmidt(stacked, X)
        return cls(Q[:nH], [Q[nH + offs[T]:nH + offs[T + 1]] for T in range(nT)])


class TwoScaleROM:
    """Minimal-residual reduced two-scale primal and dual models.

    Parameters
    ----------
    disc : LodDiscretization
    objective : Objective
    models : list of Stage1Model
    constants : SurrogateConstants or ExactConstants
    """

    def __init__(self, disc, objective, models, constants, counter=None):
        self.disc = disc
        self.objective = objective
        self.models = models
        self.constants = constants
        self.counter = counter if counter is not None else disc.counter
        self.snapshot_mus = []
        self.residual_mode = "auto"
        self.primal = None
        self.dual = None
        self._cache = {}

    # -- build --------------------------------------------------------------
    def build(self, mus, extra=None):
        """Rebuild both reduced spaces from the RBLOD lifts at ``mus``.

        ``extra`` holds further compact primal vectors ``(u_H, coeffs)``;
        coefficient arrays shorter than the current Stage-1 sizes are
        zero padded.
        """
        rb = RblodSolver(self.disc, self.models)
        mus = [np.array(m, dtype=float) for m in mus]
        snaps = [rb.snapshot(self.objective, mu) for mu in mus]
        K1 = self.disc.coarse_inner
        self.snapshot_mus = mus
        primal = [s[0] for s in snaps]
        for u_H, coeffs in extra or ():
            primal.append((u_H, [np.pad(c, (0, m.size - c.size)) for m, c in zip(self.models, coeffs)]))
        pr = CompactBasis.from_snapshots(primal, K1)
        du = CompactBasis.from_snapshots([s[1] for s in snaps], K1)
        if pr.size < len(primal):
            log.info("primal snapshot set rank deficient: %d of %d kept", pr.size, len(primal))
        self._assemble(pr, du)
        self._cache.clear()
        return self

    def _patch_functionals(self, T, basis, adjoint):
        """Interior functional data ``D_T`` of the component actions, ``(n_int, nq, n)``."""
        m = self.models[T]
        op, sh = m.op, m.sh
        sr = np.sqrt(self.disc.rho)
        mesh = self.disc.mesh
        C = basis.coeffs[T]
        V = m.basis @ C
        AV = op.apply_components(V)
        D = sr * AV[:, sh.interior, :]
        coarse = []
        corners = mesh.coarse_corners(T)
        nodes = op.patch.coarse_nodes
        if not adjoint:
            for t, qi in enumerate(op.T_comps):
                D[qi] -= sr * (op.F[t] @ basis.H[corners])
            for q in range(m.nq):
                coarse.append((op.comps[q], nodes, -(sh.P.T @ AV[q])))
        else:
            W = op.apply_components_full(sh.P @ basis.H[nodes])
            D -= W[:, sh.interior, :]
            for t, qi in enumerate(op.T_comps):
                coarse.append((op.comps[qi], corners, -sr * (op.F[t].T @ V)))
        return D.transpose(1, 0, 2), V, coarse

    def _gram(self, basis, adjoint, other=None):
        disc = self.disc
        nP = disc.problem.n_components
        n = basis.size
        nc = disc.mesh.n_coarse_nodes
        KH = disc.coarse_stiffness_components()
        DH = np.zeros((nc, nP, n))
        for q in range(nP):
            DH[:, q, :] = KH[q] @ basis.H
        G = np.zeros((nP, nP, n, n))
        pairing = np.zeros((nP, n, other.size)) if other is not None else None

        def patch(T):
            D, V, coarse = self._patch_functionals(T, basis, adjoint)
            sh = self.models[T].sh
            Df = D.reshape(sh.n_int, -1)
            GT = (Df.T @ sh.riesz(Df)).reshape(len(self.models[T].op.comps), n, -1, n)
            P = None
            if other is not None:
                P = np.einsum("iqk,il->qkl", D, self.models[T].basis @ other.coeffs[T])
            return GT, coarse, P

        for T, (GT, coarse, P) in enumerate(disc.map(patch, disc.elements)):
            comps = self.models[T].op.comps
            G[np.ix_(comps, comps)] += GT.transpose(0, 2, 1, 3)
            for q, rows, vals in coarse:
                DH[rows, q, :] += vals
            if P is not None:
                pairing[comps] += P
        DH[~disc.free_mask] = 0.0
        R = disc.coarse_riesz(DH.reshape(nc, -1)).reshape(nc, nP, n)
        G += np.einsum("iqk,ipl->qpkl", DH, R)
        if other is not None:
            pairing += np.einsum("iqk,il->qkl", DH, other.H)
        return DH, G, pairing

    def _assemble(self, pr, du):
        disc, obj = self.disc, self.objective
        DH, G, pairing = self._gram(pr, adjoint=False, other=du)
        Rload = disc.coarse_riesz(disc.load)
        self.primal = {
            "basis": pr, "G": G, "g": np.einsum("iqk,i->qk", DH, Rload),
            "FF": float(disc.load @ Rload), "pairing": pairing,
        }
        DHd, Gd, _ = self._gram(du, adjoint=True)
        MPhi = obj.sigma_d * (obj.mass @ pr.H)
        Md = obj.sigma_d * (obj.mass @ obj.u_d)
        MPhi[~disc.free_mask] = 0.0
        Md[~disc.free_mask] = 0.0
        RPhi = disc.coarse_riesz(MPhi)
        Rd = disc.coarse_riesz(Md)
        self.dual = {
            "basis": du, "G": Gd,
            "gM": np.einsum("iqk,ij->qkj", DHd, RPhi), "gd": np.einsum("iqk,i->qk", DHd, Rd),
            "FF_MM": MPhi.T @ RPhi, "FF_Md": MPhi.T @ Rd, "FF_dd": float(Md @ Rd),
        }

    # -- online -------------------------------------------------------------
    @property
    def size(self):
        return (self.primal["basis"].size, self.dual["basis"].size)

    @staticmethod
    def _normal(G, th):
        N = np.einsum("q,p,qpkl->kl", th, th, G)
        return 0.5 * (N + N.T)

    def _solve(self, N, g, what):
        if N.shape[0] == 0:
            return np.zeros(0)
        try:
            return sla.cho_solve(sla.cho_factor(N), g)
        except np.linalg.LinAlgError:
            warnings.warn(f"{what} normal equations not positive definite; using least squares",
                          EstimatorWarning, stacklevel=3)
            return np.linalg.lstsq(N, g, rcond=1e-12)[0]

    def _key(self, mu):
        return np.asarray(mu, dtype=float).tobytes()

    def solve_primal(self, mu):
        """Reduced coefficients and coarse part of the primal solution."""
        th = self.disc.problem.theta(mu)
        N = self._normal(self.primal["G"], th)
        g = th @ self.primal["g"]
        c = self._solve(N, g, "primal")
        self.counter.add("TSRBLOD")
        return c, self.primal["basis"].H @ c, N, g

    def dual_rhs(self, mu, c):
        th = self.disc.problem.theta(mu)
        return th @ (self.dual["gM"] @ c - self.dual["gd"])

    def solve_dual(self, mu, c):
        th = self.disc.problem.theta(mu)
        N = self._normal(self.dual["G"], th)
        d = self._solve(N, self.dual_rhs(mu, c), "dual")
        self.counter.add("TSRBLOD")
        return d, self.dual["basis"].H @ d, N

    def evaluate(self, mu, gradient=True, estimate=True):
        """All reduced quantities at ``mu`` as a dict (cached)."""
        mu = np.array(mu, dtype=float)
        key = self._key(mu)
        hit = self._cache.get(key)
        if hit is not None and ("gradient" in hit or not gradient) and ("delta_J" in hit or not estimate):
            return hit
        if hit is None:
            c, u_H, N, g = self.solve_primal(mu)
            hit = {"mu": mu, "c": c, "u_H": u_H, "N": N, "g": g,
                   "value": self.objective.value(u_H, mu)}
        if gradient and "gradient" not in hit:
            hit["gradient"] = self._gradient(mu, hit)
        if estimate and "delta_J" not in hit:
            self._estimate(mu, hit)
        self._cache[key] = hit
        if len(self._cache) > 64:
            self._cache.pop(next(iter(self._cache)))
        return hit

    def _ensure_dual(self, mu, hit):
        if "d" not in hit:
            hit["d"], hit["p_H"], hit["Ndu"] = self.solve_dual(mu, hit["c"])

    def value(self, mu):
        return self.evaluate(mu, gradient=False, estimate=False)["value"]

    def gradient(self, mu):
        return self.evaluate(mu, estimate=False)["gradient"]

    def _gradient(self, mu, hit):
        """Exact derivative of the minimal-residual reduced functional."""
        prob = self.disc.problem
        th = prob.theta(mu)
        c = hit["c"]
        G = self.primal["G"]
        rhs = self.primal["basis"].H.T @ self.objective.du(hit["u_H"])
        lam = self._solve(hit["N"], rhs, "primal adjoint")
        M = np.einsum("k,qpkl,l->qp", lam, G, c)
        d_theta = self.primal["g"] @ lam - M @ th - M.T @ th
        return self.objective.dmu(mu) + prob.dtheta(mu).T @ d_theta

    def lagrangian_gradient(self, mu):
        """``d_mu J + d_mu r(u_rb)[p_rb]`` from the reduced primal and dual solutions."""
        hit = self.evaluate(mu, gradient=False, estimate=False)
        self._ensure_dual(mu, hit)
        da = np.einsum("k,qkl,l->q", hit["c"], self.primal["pairing"], hit["d"])
        return self.objective.dmu(mu) - self.disc.problem.dtheta(mu).T @ da

    # -- residuals and estimators -------------------------------------------
    def to_two_scale(self, basis, c):
        # Stage-1 bases only grow by appending columns, so older coefficients use a prefix
        parts = [m.basis[:, :C.shape[0]] @ (C @ c) for m, C in zip(self.models, basis.coeffs)]
        return TwoScaleVector(basis.H @ c, parts)

    def primal_residual_norm(self, mu, hit=None, method=None):
        hit = hit if hit is not None else self.evaluate(mu, gradient=False, estimate=False)
        method = method or self.residual_mode
        c = hit["c"]
        FF = self.primal["FF"]
        sq = FF - 2 * c @ hit["g"] + c @ hit["N"] @ c
        if method == "gram" or (method == "auto" and sq > EXPLICIT_BELOW ** 2 * FF):
            return float(_clamped_sqrt(sq, "primal residual norm"))
        u = self.to_two_scale(self.primal["basis"], c)
        return self.disc.dual_norm(self.disc.residual_functional(mu, u))

    def dual_residual_norm(self, mu, hit=None, method=None):
        hit = hit if hit is not None else self.evaluate(mu, gradient=False, estimate=False)
        self._ensure_dual(mu, hit)
        method = method or self.residual_mode
        c, d = hit["c"], hit["d"]
        D = self.dual
        FF = c @ D["FF_MM"] @ c - 2 * c @ D["FF_Md"] + D["FF_dd"]
        g = self.dual_rhs(mu, c)
        sq = FF - 2 * d @ g + d @ hit["Ndu"] @ d
        if method == "gram" or (method == "auto" and sq > EXPLICIT_BELOW ** 2 * FF):
            return float(_clamped_sqrt(sq, "dual residual norm"))
        p = self.to_two_scale(D["basis"], d)
        rhs = self.objective.du(hit["u_H"])
        return self.disc.dual_norm(self.disc.residual_functional(mu, p, rhs=rhs, adjoint=True))

    def _estimate(self, mu, hit):
        k = self.constants
        r_pr = self.primal_residual_norm(mu, hit)
        r_du = self.dual_residual_norm(mu, hit)
        d_pr = k.prefactor_pr(mu) * r_pr
        d_du = k.prefactor_du(mu) * (2 * k.k_mixed(mu) * d_pr + r_du)
        p_H = hit["p_H"]
        p_norm = float(np.sqrt(max(p_H @ (self.disc.coarse_inner @ p_H), 0.0)))
        trunc = d_pr * r_du + p_norm / np.sqrt(k.alpha(mu)) * d_pr
        hit.update(res_pr=r_pr, res_du=r_du, delta_pr=d_pr, delta_du=d_du, delta_trunc=trunc,
                   delta_J=d_pr * r_du + d_pr ** 2 * k.k_energy(mu) + trunc)

    def delta_pr(self, mu):
        return self.evaluate(mu, gradient=False)["delta_pr"]

    def delta_du(self, mu):
        return self.evaluate(mu, gradient=False)["delta_du"]

    def delta_J(self, mu):
        return self.evaluate(mu, gradient=False)["delta_J"]

    def primal_two_scale(self, mu):
        return self.to_two_scale(self.primal["basis"], self.evaluate(mu, gradient=False, estimate=False)["c"])

    def dual_two_scale(self, mu):
        hit = self.evaluate(mu, gradient=False, estimate=False)
        self._ensure_dual(mu, hit)
        return self.to_two_scale(self.dual["basis"], hit["d"])

    # -- persistence --------------------------------------------------------
    def save(self, path):
        """Write the reduced model to an ``.npz`` archive."""
        arrays = {"version": np.array(FORMAT_VERSION), "snapshot_mus": np.array(self.snapshot_mus),
                  "rho": np.array(self.disc.rho)}
        for name, space in (("pr", self.primal), ("du", self.dual)):
            for k, v in space.items():
                if k == "basis":
                    arrays[f"{name}_H"] = v.H
                    for T, C in enumerate(v.coeffs):
                        arrays[f"{name}_C{T}"] = C
                elif v is not None:
                    arrays[f"{name}_{k}"] = np.asarray(v)
        for m in self.models:
            arrays[f"psi{m.T}"] = m.basis
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path, disc, objective, constants=None, counter=None):
        """Reload a model written by :meth:`save`; Stage-1 bases are restored too.

        The Stage-1 reduced operators are rebuilt from the stored bases so that
        explicit residual evaluation keeps working.
        """
        z = np.load(path)
        if int(z["version"]) != FORMAT_VERSION:
            raise ValueError(f"unsupported reduced-model format {int(z['version'])}")
        models = build_stage1(disc, gram=False)
        for m in models:
            m._append(z[f"psi{m.T}"])
        rom = cls(disc, objective, models, constants, counter)
        rom.snapshot_mus = list(z["snapshot_mus"])
        nT = len(models)
        spaces = {}
        for name in ("pr", "du"):
            basis = CompactBasis(z[f"{name}_H"], [z[f"{name}_C{T}"] for T in range(nT)])
            d = {"basis": basis}
            for k in z.files:
                if k.startswith(name + "_") and not (k == f"{name}_H" or k[len(name) + 1:].startswith("C")
                                                      and k[len(name) + 2:].isdigit()):
                    v = z[k]
                    d[k[len(name) + 1:]] = float(v) if v.ndim == 0 else v
            spaces[name] = d
        rom.primal, rom.dual = spaces["pr"], spaces["du"]
        return rom
