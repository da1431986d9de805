import numpy as np
import pytest

from lodtr import fem, grid, lod, problem as pb
from lodtr.models import fem_state

from conftest import random_mus


def _constant_problem(n_H, n_h):
    mesh = grid.build_meshes(n_H, n_h)
    lower, upper = pb.parameter_box()
    return pb.ThermalBlockProblem(mesh, [np.ones(n_h * n_h)] * 2, lower, upper)


def _fine_error(prob, ell, mu):
    disc = lod.LodDiscretization(prob, ell)
    corr = disc.compute_correctors(mu, gradient=False)
    u_ms = disc.ms_basis(corr) @ disc.solve_primal(mu, corr)
    e = fem_state(prob, mu) - u_ms
    n = prob.mesh.n_h
    return np.sqrt(e @ (fem.assemble_stiffness(n, n, np.ones(n * n)) @ e))


def test_corrector_kernel_and_orthogonality(tiny):
    prob, _, _, disc = tiny
    mesh = prob.mesh
    IH = grid.interpolation_matrix(mesh)
    for mu in random_mus(prob, 2, 0):
        for c in disc.compute_correctors(mu, check=True):
            p = disc.patches[c.T]
            full = np.zeros((mesh.n_fine_nodes, 4))
            full[p.fine_nodes[p.interior]] = c.Q
            assert np.abs(IH @ full).max() <= 1e-10
            assert c.residual <= 1e-10


def test_orthogonality_against_kernel_vectors(tiny):
    prob, _, _, disc = tiny
    mu = random_mus(prob, 1, 1)[0]
    rng = np.random.default_rng(2)
    for T in (0, 5, 10):
        c = disc.solve_correctors(T, mu)
        op = disc.operator(T)
        sh = op.shape
        Kint, _ = sh.stiffness(op.coefficient(mu))
        w = sh.riesz(rng.standard_normal((sh.n_int, 6)))   # kernel vectors
        assert np.abs(sh.C @ w).max() <= 1e-12
        res = (op.F_mu(mu) - Kint @ c.Q).T @ w
        assert np.abs(res).max() <= 1e-10 * np.abs(op.F_mu(mu)).max() * np.abs(w).max() * sh.n_int


def test_scaling_invariance(tiny):
    prob, _, _, disc = tiny
    mu = random_mus(prob, 1, 3)[0]
    q1 = disc.solve_correctors(6, mu).Q
    q2 = disc.solve_correctors(6, 2 * mu).Q
    assert np.allclose(q1, q2, atol=1e-12)
    u1, u2 = disc.solve_primal(mu), disc.solve_primal(2 * mu)
    assert np.allclose(u2, 0.5 * u1, atol=1e-12)


@pytest.mark.xfail(strict=True, reason="element correctors of coarse hats do not vanish for the "
                   "averaged L2 quasi-interpolation; see decisions ledger")
def test_constant_coefficient_saturated():
    prob = _constant_problem(4, 16)
    disc = lod.LodDiscretization(prob, 4)
    mu = np.ones(32)
    corr = disc.compute_correctors(mu)
    assert max(np.abs(c.Q).max() for c in corr) <= 1e-10
    K, _ = disc.assemble_ms_system(corr)
    K_H = fem.assemble_stiffness(4, 4, 2 * np.ones(16))
    f = disc.free
    assert abs(K[f][:, f] - K_H[f][:, f]).max() <= 1e-10


def test_saturated_ms_system_is_symmetric():
    # with full patches the PG-LOD coincides with the Galerkin LOD
    prob = pb.build_benchmark(4, 16, 4, 4, 4, seed=3)[0]
    disc = lod.LodDiscretization(prob, 4)
    K, _ = disc.assemble_ms_system(disc.compute_correctors(random_mus(prob, 1, 20)[0], gradient=False))
    Kf = K[disc.free][:, disc.free].toarray()
    assert np.abs(Kf - Kf.T).max() <= 1e-10 * np.abs(Kf).max()
    assert np.linalg.eigvalsh(0.5 * (Kf + Kf.T)).min() > 0


def test_ms_system_matches_fine_assembly(tiny, caplog):
    prob, _, _, disc = tiny
    mu = random_mus(prob, 1, 4)[0]
    corr = disc.compute_correctors(mu, gradient=False)
    K, _ = disc.assemble_ms_system(corr)
    mesh = prob.mesh
    P = grid.prolongation(mesh.n_H, mesh.n_H, mesh.ratio)
    oracle = P.T @ (prob.fine_stiffness(mu) @ disc.ms_basis(corr))
    f = disc.free
    diff = (K - oracle)[f][:, f]
    assert abs(diff).max() <= 1e-10 * abs(K).max()
    Kf = K[f][:, f].toarray()
    asym = np.abs(Kf - Kf.T).max() / np.abs(Kf).max()
    assert asym > 1e-6  # Petrov-Galerkin: generally non-symmetric


def test_pg_consistency_saturated():
    prob, _, _, _ = pb.build_benchmark(4, 16, 4, 4, 4, seed=0)
    disc = lod.LodDiscretization(prob, 4)
    mu = random_mus(prob, 1, 5)[0]
    corr = disc.compute_correctors(mu, gradient=False)
    u_H = disc.solve_primal(mu, corr)
    mesh = prob.mesh
    P = grid.prolongation(mesh.n_H, mesh.n_H, mesh.ratio)
    r = P.T @ (prob.fine_load() - prob.fine_stiffness(mu) @ (disc.ms_basis(corr) @ u_H))
    # the load of the PG-LOD is the coarse load; compare the coarse residual on free hats
    r_coarse = disc.load - P.T @ (prob.fine_stiffness(mu) @ (disc.ms_basis(corr) @ u_H))
    assert np.abs(r_coarse[disc.free]).max() <= 1e-9
    assert np.allclose(P.T @ prob.fine_load(), disc.load + (P.T @ prob.fine_load()) * mesh.coarse_boundary_mask())
    assert np.abs(r[disc.free]).max() <= 1e-9


def test_saturated_fine_error_scales_with_H():
    mu = np.full(32, 2.0)
    errs = []
    fields = pb.build_benchmark(4, 32, 1, 4, 8, seed=0)[0].fields
    for n_H in (2, 4, 8):
        prob = pb.ThermalBlockProblem(grid.build_meshes(n_H, 32), fields, *pb.parameter_box())
        errs.append(_fine_error(prob, n_H, mu))
    # the error is O(H): halving H must shrink it clearly
    assert errs[1] <= 0.75 * errs[0] and errs[2] <= 0.75 * errs[1]


def test_fine_error_decreases_with_ell():
    prob = pb.build_benchmark(8, 64, 1, 8, 16, seed=0)[0]
    mu = random_mus(prob, 1, 6)[0]
    errs = [_fine_error(prob, ell, mu) for ell in (1, 2, 3, 4)]
    assert all(b <= a * (1 + 1e-6) for a, b in zip(errs, errs[1:]))


def test_dual_properties(tiny):
    prob, obj, _, disc = tiny
    mu = obj.mu_d
    corr = disc.compute_correctors(mu)
    assert not np.any(disc.solve_dual(corr, obj.du(obj.u_d)))
    mu = random_mus(prob, 1, 7)[0]
    corr = disc.compute_correctors(mu)
    u_H = disc.solve_primal(mu, corr)
    p = lod.solve_pglod_dual(disc, obj, mu, u_H, corr)
    assert np.allclose(disc.solve_dual(corr, 3.0 * obj.du(u_H)), 3.0 * p)
    K, _ = disc.assemble_ms_system(corr)
    rng = np.random.default_rng(8)
    for _ in range(20):
        v = rng.standard_normal(u_H.size) * disc.free_mask
        assert obj.du(u_H) @ v == pytest.approx(p @ (K @ v), rel=1e-9, abs=1e-12)


def test_gradient_central_differences(tiny):
    prob, obj, _, disc = tiny
    rng = np.random.default_rng(9)
    for mu in random_mus(prob, 5, 10):
        g = disc.evaluate(obj, mu).gradient
        d = rng.standard_normal(mu.size)
        h = 1e-6
        fd = (disc.evaluate(obj, mu + h * d, gradient=False).value
              - disc.evaluate(obj, mu - h * d, gradient=False).value) / (2 * h)
        assert abs(fd - g @ d) <= 1e-4 * abs(fd)


def test_gradient_zero_at_unconstrained_minimiser_of_coarse_problem():
    # f non-parametric: d_mu J is the Tikhonov part only, the rest comes from the residual
    prob, obj, _, _ = pb.build_benchmark(preset="tiny", seed=0)
    disc = lod.LodDiscretization(prob, 1)
    mu = random_mus(prob, 1, 11)[0]
    st = disc.evaluate(obj, mu)
    da = disc.residual_derivatives(st.correctors, st.u_H, st.p_H)
    assert np.allclose(st.gradient, obj.dmu(mu) - da)


def test_counters(tiny):
    prob, obj, _, _ = tiny
    disc = lod.LodDiscretization(prob, 1)
    disc.evaluate(obj, random_mus(prob, 1, 12)[0])
    c = disc.counter.as_dict()
    assert c["LOD local"] == prob.mesh.n_coarse_elements and c["LOD coarse"] == 2
    assert disc.counter.total == sum(c.values())


def test_two_scale_exactness(tiny):
    prob, obj, _, disc = tiny
    rng = np.random.default_rng(13)
    for mu in random_mus(prob, 3, 14):
        corr = disc.compute_correctors(mu, gradient=False)
        u = disc.lift(disc.solve_primal(mu, corr), corr)
        res = disc.residual_functional(mu, u)
        assert disc.dual_norm(res) <= 1e-9
        v = disc.zero_two_scale()
        v.u_H = rng.standard_normal(v.u_H.size) * disc.free_mask
        v.parts = [disc.shape(T).riesz(rng.standard_normal(p.size)) for T, p in enumerate(v.parts)]
        assert abs(disc.two_scale_residual(mu, u, v)) <= 1e-9


def test_two_scale_norm_and_structure(tiny):
    prob, _, _, disc = tiny
    z = disc.zero_two_scale()
    assert disc.two_scale_norm(z) == 0.0
    mu = random_mus(prob, 1, 15)[0]
    rng = np.random.default_rng(16)
    u = disc.zero_two_scale()
    u.u_H = rng.standard_normal(u.u_H.size) * disc.free_mask
    u.parts = [disc.shape(T).riesz(rng.standard_normal(p.size)) for T, p in enumerate(u.parts)]
    v = disc.zero_two_scale()
    v.parts = [disc.shape(T).riesz(rng.standard_normal(p.size)) for T, p in enumerate(v.parts)]
    # purely fine test function: only the corrector rows of the residual act
    r = disc.residual_functional(mu, u)
    assert disc.pair(r, v) == pytest.approx(sum(a @ b for a, b in zip(r.parts, v.parts)))


def test_dual_lift_solves_flipped_adjoint(tiny):
    prob, obj, _, disc = tiny
    mu = random_mus(prob, 1, 17)[0]
    st = disc.evaluate(obj, mu, keep_z=True)
    p = disc.lift_dual(st.p_H, st.correctors)
    rhs = obj.du(st.u_H) * disc.free_mask
    res = disc.residual_functional(mu, p, rhs=rhs, adjoint=True)
    assert disc.dual_norm(res) <= 1e-9 * max(1.0, disc.dual_norm(disc.residual_functional(mu, disc.zero_two_scale(), rhs=rhs, adjoint=True)))


def test_supremizer_equation(tiny):
    prob, obj, _, disc = tiny
    mu = random_mus(prob, 1, 18)[0]
    st = disc.evaluate(obj, mu, keep_z=True)
    p = disc.lift_dual(st.p_H, st.correctors)
    phi = disc.supremizer(st.p_H, st.correctors)
    Bphi = disc.operator_action(mu, phi)
    Xp = lod.TwoScaleVector((disc.coarse_inner @ p.u_H) * disc.free_mask,
                            [disc.shape(T).inner @ q for T, q in zip(disc.elements, p.parts)])
    assert disc.dual_norm(Xp - Bphi) <= 1e-10 * disc.dual_norm(Xp)


def test_rejects_small_rho(tiny):
    with pytest.raises(ValueError):
        lod.LodDiscretization(tiny[0], 1, rho=0.5)
