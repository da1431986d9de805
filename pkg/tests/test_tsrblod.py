import numpy as np
import pytest

from lodtr import lod, optim, tsrblod
from lodtr.stability import ExactConstants

from conftest import random_mus


def _energy(disc, T, mu, v):
    op = disc.operator(T)
    Kint, _ = op.shape.stiffness(op.coefficient(mu))
    return np.sqrt(np.einsum("ij,ij->j", v, Kint @ v))


@pytest.fixture(scope="module")
def stage1(tiny):
    prob, obj, _, disc = tiny
    mus = random_mus(prob, 3, 100)
    models = tsrblod.build_stage1(disc)
    for mu in mus:
        tsrblod.stage1_enrich(models, mu, None, disc.evaluate(obj, mu, keep_z=True))
    return models, mus


@pytest.fixture(scope="module")
def rom(tiny, tiny_constants, stage1):
    prob, obj, _, disc = tiny
    models, mus = stage1
    return tsrblod.TwoScaleROM(disc, obj, models, tiny_constants).build(mus)


# -- Stage 1 ----------------------------------------------------------------
def test_basis_orthonormal_and_in_kernel(stage1):
    for m in stage1[0]:
        G = m.basis.T @ (m.sh.inner @ m.basis)
        assert np.abs(G - np.eye(m.size)).max() <= 1e-10
        assert np.abs(m.sh.C @ m.basis).max() <= 1e-10


def test_snapshot_estimator_vanishes(stage1):
    models, mus = stage1
    for m in models:
        for mu in mus:
            assert m.estimator(mu).max() <= 1e-10


def test_enrichment_gate(tiny):
    prob, _, _, disc = tiny
    mu = random_mus(prob, 1, 101)[0]
    m = tsrblod.Stage1Model(disc, 5)
    assert m.enrich(mu, tau=1e-3)
    n = m.size
    assert not m.enrich(mu, tau=1e-3) and m.size == n


def test_empty_basis_estimator_is_riesz_norm(tiny):
    prob, _, _, disc = tiny
    mu = random_mus(prob, 1, 102)[0]
    m = tsrblod.Stage1Model(disc, 6)
    op, sh = m.op, m.sh
    r = sh.riesz(op.F_mu(mu))
    expect = np.sqrt(np.einsum("ij,ij->j", r, sh.inner @ r)) / np.sqrt(m.alpha(mu))
    assert np.allclose(m.estimator(mu), expect, rtol=1e-12)


def test_stage1_rigor(tiny, stage1):
    prob, _, _, disc = tiny
    models, _ = stage1
    rng = np.random.default_rng(103)
    for mu in random_mus(prob, 10, 104):
        T = int(rng.integers(len(models)))
        m = models[T]
        C = m.solve(mu)
        err = _energy(disc, T, mu, disc.solve_correctors(T, mu, gradient=False).Q - m.basis @ C)
        assert np.all(m.estimator(mu, C) >= err)


def test_stage1_gram_matches_explicit(tiny, stage1):
    prob = tiny[0]
    for mu in random_mus(prob, 3, 105):
        for m in stage1[0][:6]:
            g, e = m.estimator(mu, method="gram"), m.estimator(mu, method="explicit")
            assert np.allclose(g, e, rtol=1e-8)


def test_full_basis_reproduces_exact_corrector(tiny):
    prob, _, _, disc = tiny
    import scipy.linalg as sla
    m = tsrblod.Stage1Model(disc, 0, gram=False)
    N = sla.null_space(m.sh.C.toarray())
    m.add_vectors(N)
    mu = random_mus(prob, 1, 106)[0]
    Q = disc.solve_correctors(0, mu, gradient=False).Q
    assert np.abs(m.basis @ m.solve(mu) - Q).max() <= 1e-9


def test_rblod_counters(tiny, stage1):
    prob, obj, _, disc = tiny
    before = disc.counter["RBLOD local"]
    tsrblod.RblodSolver(disc, stage1[0]).primal(prob.mu_check)
    assert disc.counter["RBLOD local"] - before == len(stage1[0])


# -- Stage 2 ----------------------------------------------------------------
def test_single_snapshot_rom(tiny, tiny_constants):
    prob, obj, _, disc = tiny
    mu = random_mus(prob, 1, 107)[0]
    models = tsrblod.build_stage1(disc)
    tsrblod.stage1_enrich(models, mu, None, disc.evaluate(obj, mu, keep_z=True))
    r = tsrblod.TwoScaleROM(disc, obj, models, tiny_constants).build([mu])
    assert r.size[0] == 1
    J = disc.evaluate(obj, mu, gradient=False).value
    assert abs(r.value(mu) - J) <= 1e-8 * J
    assert r.delta_pr(mu) <= 1e-8


def test_snapshot_reproduction(tiny, rom, stage1):
    prob, obj, _, disc = tiny
    rb = tsrblod.RblodSolver(disc, stage1[0])
    for mu in stage1[1]:
        h = rom.evaluate(mu)
        J = disc.evaluate(obj, mu, gradient=False).value
        assert abs(h["value"] - J) <= 1e-8 * J
        u = rom.primal_two_scale(mu)
        assert h["delta_pr"] <= 1e-8 * disc.two_scale_norm(u)
        (u_H, _), (p_H, _) = rb.snapshot(obj, mu)
        assert np.allclose(h["u_H"], u_H, atol=1e-8)
        assert np.allclose(rom.dual_two_scale(mu).u_H, p_H, atol=1e-8)


def test_min_res_optimality(tiny, rom):
    prob, _, _, disc = tiny
    mu = random_mus(prob, 1, 108)[0]
    r_opt = rom.primal_residual_norm(mu, method="explicit")
    c = rom.evaluate(mu, gradient=False, estimate=False)["c"]
    rng = np.random.default_rng(109)
    basis = rom.primal["basis"]
    for _ in range(100):
        cand = c + 0.1 * rng.standard_normal(c.size) * np.abs(c).max()
        v = rom.to_two_scale(basis, cand)
        assert r_opt <= disc.dual_norm(disc.residual_functional(mu, v)) * (1 + 1e-10)


def test_residual_gram_matches_explicit(tiny, rom):
    prob = tiny[0]
    for mu in random_mus(prob, 3, 110):
        for f in (rom.primal_residual_norm, rom.dual_residual_norm):
            assert f(mu, method="gram") == pytest.approx(f(mu, method="explicit"), rel=1e-8)


def test_monotone_improvement(tiny, tiny_constants, stage1):
    prob, obj, _, disc = tiny
    models, mus = stage1
    r1 = tsrblod.TwoScaleROM(disc, obj, models, tiny_constants).build(mus[:2])
    r2 = tsrblod.TwoScaleROM(disc, obj, models, tiny_constants).build(mus)
    for mu in mus[:2]:
        assert r2.delta_pr(mu) <= r1.delta_pr(mu) + 1e-12


def test_estimators_bound_exact_errors(tiny, rom):
    """With exactly computed inf-sup constants the bounds are rigorous."""
    prob, obj, _, disc = tiny
    exact = ExactConstants(disc, obj)
    rom_x = tsrblod.TwoScaleROM(disc, obj, rom.models, exact)
    rom_x.primal, rom_x.dual = rom.primal, rom.dual
    for mu in random_mus(prob, 4, 111):
        st = disc.evaluate(obj, mu, keep_z=True)
        h = rom_x.evaluate(mu, gradient=False)
        e_pr = disc.energy_norm(mu, disc.lift(st.u_H, st.correctors) - rom_x.primal_two_scale(mu), st.correctors)
        p_exact = disc.lift_dual(disc.solve_dual(st.correctors, obj.du(h["u_H"])), st.correctors)
        # dual error against the exact dual with the reduced primal data
        e_du = disc.energy_norm(mu, p_exact - rom_x.dual_two_scale(mu), st.correctors)
        assert h["delta_pr"] >= e_pr
        assert h["delta_du"] >= e_du
        assert h["delta_J"] >= abs(st.value - h["value"])


def test_estimator_formulas(tiny, rom, tiny_constants):
    prob = tiny[0]
    k = tiny_constants
    mu = random_mus(prob, 1, 112)[0]
    h = rom.evaluate(mu)
    assert h["delta_pr"] == pytest.approx(k.prefactor_pr(mu) * h["res_pr"])
    assert h["delta_du"] == pytest.approx(k.prefactor_du(mu) * (2 * k.k_mixed(mu) * h["delta_pr"] + h["res_du"]))
    assert h["delta_J"] == pytest.approx(h["delta_pr"] * h["res_du"] + h["delta_pr"] ** 2 * k.k_energy(mu)
                                         + h["delta_trunc"])


def test_rom_gradient_matches_fd(tiny, rom):
    prob = tiny[0]
    mu = random_mus(prob, 1, 113)[0]
    g = rom.gradient(mu)
    d = np.random.default_rng(114).standard_normal(mu.size)
    h = 1e-6
    fd = (rom.value(mu + h * d) - rom.value(mu - h * d)) / (2 * h)
    assert abs(fd - g @ d) <= 1e-5 * abs(fd)


def test_lagrangian_gradient_at_snapshot(tiny, rom, stage1):
    prob, obj, _, disc = tiny
    for mu in stage1[1]:
        g = disc.evaluate(obj, mu).gradient
        assert np.abs(rom.lagrangian_gradient(mu) - g).max() <= 1e-6 * np.abs(g).max()


def test_supremizer_makes_gradient_exact_at_snapshot(tiny, tiny_constants):
    prob, obj, mu0, disc = tiny
    driver = optim.TRDriver(disc, obj)
    models = tsrblod.build_stage1(disc)
    mu = random_mus(prob, 1, 115)[0]
    driver._enrich(models, mu, driver.fom(mu), True, None)
    r = tsrblod.TwoScaleROM(disc, obj, models, tiny_constants)
    g = driver.fom(mu).gradient
    r.build([mu])
    plain = np.abs(r.gradient(mu) - g).max()
    r.build([mu], extra=list(driver._extra.values()))
    assert np.abs(r.gradient(mu) - g).max() <= 1e-6 * np.abs(g).max() < plain


def test_functional_estimator_surrogate(tiny, rom):
    prob, obj, _, disc = tiny
    for mu in random_mus(prob, 10, 116):
        J = disc.evaluate(obj, mu, gradient=False).value
        assert abs(J - rom.value(mu)) <= rom.delta_J(mu)


def test_save_load_roundtrip(tiny, rom, tiny_constants, tmp_path):
    prob, obj, _, disc = tiny
    path = tmp_path / "rom.npz"
    rom.save(path)
    r2 = tsrblod.TwoScaleROM.load(path, disc, obj, tiny_constants)
    for mu in random_mus(prob, 3, 117):
        assert abs(r2.value(mu) - rom.value(mu)) <= 1e-12
        assert r2.delta_J(mu) == pytest.approx(rom.delta_J(mu), rel=1e-8)


def test_load_rejects_other_versions(tiny, rom, tiny_constants, tmp_path):
    prob, obj, _, disc = tiny
    path = tmp_path / "rom.npz"
    rom.save(path)
    data = dict(np.load(path))
    data["version"] = np.array(99)
    np.savez(path, **data)
    with pytest.raises(ValueError, match="format"):
        tsrblod.TwoScaleROM.load(path, disc, obj, tiny_constants)


def test_gram_schmidt_drops_dependent():
    rng = np.random.default_rng(118)
    X = np.eye(5)
    V = rng.standard_normal((5, 2))
    Q = tsrblod.gram_schmidt(np.column_stack([V, V @ np.array([1.0, 2.0])]), X)
    assert Q.shape[1] == 2
    assert np.allclose(Q.T @ Q, np.eye(2))
