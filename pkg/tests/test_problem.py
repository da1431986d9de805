import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lodtr import grid, problem as pb


@pytest.fixture(scope="module")
def bench():
    return pb.build_benchmark(preset="tiny", seed=0)


def _coarse_l2_sq(n, e):
    """int (e_H)^2 over the unit square, 2x2 Gauss per coarse cell (exact for Q1 products)."""
    h = 1.0 / n
    E = e.reshape(n + 1, n + 1)
    g = 0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)
    s = 0.0
    for ey in range(n):
        for ex in range(n):
            for y in g:
                for x in g:
                    val = (E[ey, ex] * (1 - x) * (1 - y) + E[ey, ex + 1] * x * (1 - y)
                           + E[ey + 1, ex] * (1 - x) * y + E[ey + 1, ex + 1] * x * y)
                    s += 0.25 * h * h * val ** 2
    return s


def test_unit_parameter_coefficient_range(bench):
    prob = bench[0]
    c = prob.coefficient(np.ones(32))
    assert c.min() >= 1.8 and c.max() <= 2.2
    assert np.allclose(c, prob.fields[0] + prob.fields[1])


def test_determinism():
    a = pb.build_benchmark(preset="tiny", seed=11)
    b = pb.build_benchmark(preset="tiny", seed=11)
    for fa, fb in zip(a[0].fields, b[0].fields):
        assert np.array_equal(fa, fb)
    assert np.array_equal(a[2], b[2]) and np.array_equal(a[1].u_d, b[1].u_d)


def test_block_lookup(bench):
    prob = bench[0]
    n = prob.mesh.n_h
    rng = np.random.default_rng(0)
    mu = rng.uniform(prob.lower, prob.upper)
    c = prob.coefficient(mu)
    for ex, ey in [(0, 0), (n - 1, 0), (n // 2, n - 1), (3 * n // 8, 5 * n // 8)]:
        cell = ex + ey * n
        bx, by = ex * 4 // n, ey * 4 // n
        xi = bx + 4 * by
        expect = mu[xi] * prob.fields[0][cell] + mu[16 + xi] * prob.fields[1][cell]
        assert c[cell] == pytest.approx(expect, rel=1e-15)


def test_field_values_and_positivity(bench):
    prob = bench[0]
    for f in prob.fields:
        assert f.min() >= 0.9 and f.max() <= 1.1
    assert prob.coefficient(prob.lower).min() >= 0.9 * 2 * prob.lower.min() - 1e-12


def test_component_support_disjoint(bench):
    prob = bench[0]
    for k in range(2):
        supp = np.stack([prob.component_cells(k * 16 + xi) > 0 for xi in range(16)])
        assert np.all(supp.sum(axis=0) == 1)


def test_mu_d_pattern(bench):
    mu_d = bench[1].mu_d
    assert np.all(mu_d[np.array([3, 4, 6, 7, 8, 9, 11, 14]) - 1] == 4.0)
    assert np.all(mu_d[np.array([28, 29, 30, 31]) - 1] == 1.2)


def test_resolution_errors():
    with pytest.raises(pb.ConfigError):
        pb.build_benchmark(4, 16, 1, 8, 8)
    with pytest.raises(pb.ConfigError):
        pb.build_benchmark(4, 18, 1, 4, 4)
    with pytest.raises(pb.ConfigError):
        pb.build_benchmark(preset="huge")


def test_objective_values(bench):
    _, obj, _, _ = bench
    assert obj.value(obj.u_d, obj.mu_d) == 1.0
    mu = obj.mu_d + 0.5
    assert obj.value(obj.u_d, mu) == pytest.approx(1 + 0.5 * np.sum(obj.sigma * 0.25))
    rng = np.random.default_rng(1)
    n = int(np.sqrt(obj.u_d.size)) - 1
    u = rng.standard_normal(obj.u_d.size)
    quad = 0.5 * obj.sigma_d * _coarse_l2_sq(n, u - obj.u_d) + 0.5 * np.sum(obj.sigma * (mu - obj.mu_d) ** 2) + 1
    assert obj.value(u, mu) == pytest.approx(quad, rel=1e-12)


def test_desired_state_value_one():
    prob, obj, _, _ = pb.build_benchmark(preset="tiny", seed=2)
    from lodtr.models import FemModel
    assert FemModel(prob, obj).value(obj.mu_d) == pytest.approx(1.0, abs=1e-13)


def test_objective_du(bench):
    _, obj, _, _ = bench
    assert not np.any(obj.du(obj.u_d))
    rng = np.random.default_rng(2)
    e = rng.standard_normal(obj.u_d.size)
    assert np.allclose(obj.du(obj.u_d + 2 * e), 2 * obj.du(obj.u_d + e))
    u, v = obj.u_d + e, rng.standard_normal(e.size)
    eps = 1e-5
    fd = (obj.value(u + eps * v, obj.mu_d) - obj.value(u - eps * v, obj.mu_d)) / (2 * eps)
    assert fd == pytest.approx(obj.du(u) @ v, rel=1e-7)


def test_objective_dmu(bench):
    _, obj, _, _ = bench
    assert not np.any(obj.dmu(obj.mu_d))
    mu = obj.mu_d.copy()
    mu[5] += 1
    assert obj.dmu(mu)[5] == pytest.approx(obj.sigma[5]) and np.count_nonzero(obj.dmu(mu)) == 1
    rng = np.random.default_rng(3)
    mu = rng.uniform(1, 4, 32)
    u = rng.standard_normal(obj.u_d.size)
    for i in (0, 17, 31):
        d = np.zeros(32)
        d[i] = 1e-4
        fd = (obj.value(u, mu + d) - obj.value(u, mu - d)) / 2e-4
        assert abs(fd - obj.dmu(mu)[i]) <= 1e-8


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_coarse_functional_property(seed):
    prob, obj, _, _ = pb.build_benchmark(preset="tiny", seed=0)
    mesh = prob.mesh
    IH = grid.interpolation_matrix(mesh)
    P = grid.prolongation(mesh.n_H, mesh.n_H, mesh.ratio)
    rng = np.random.default_rng(seed)
    u_H = rng.standard_normal(mesh.n_coarse_nodes) * ~mesh.coarse_boundary_mask()
    v = rng.standard_normal(mesh.n_fine_nodes) * ~mesh.fine_boundary_mask()
    v -= P @ (IH @ v)
    mu = rng.uniform(prob.lower, prob.upper)
    assert obj.value(IH @ (P @ u_H + v), mu) == pytest.approx(obj.value(u_H, mu), rel=1e-13)


def test_mass_symmetric_psd(bench):
    M = bench[1].mass.toarray()
    assert np.allclose(M, M.T)
    assert np.linalg.eigvalsh(M).min() > -1e-14
