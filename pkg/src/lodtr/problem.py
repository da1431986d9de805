"""Parameterized thermal-block benchmark and the quadratic objective."""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import stats

from . import fem, grid

N_BLOCKS = 4  # blocks per direction

PRESETS = {
    # name: (n_H, n_h, ell, N1, N2)
    "tiny": (4, 16, 1, 4, 4),
    "small": (4, 32, 1, 8, 8),
    "desk": (8, 160, 2, 20, 40),
    "large": (20, 1200, 3, 150, 300),
}

# one-based indices of the desired parameter set to the bounds
_DESIRED_UPPER = (3, 4, 6, 7, 8, 9, 11, 14)
_DESIRED_SECOND = (28, 29, 30, 31)


class ConfigError(ValueError):
    """Invalid benchmark configuration."""


def parameter_box(n_params=2 * N_BLOCKS ** 2):
    """Bounds of the admissible set: 24 entries in [1, 4], the last 8 in [1, 1.2]."""
    lower = np.ones(n_params)
    upper = np.full(n_params, 4.0)
    upper[24:] = 1.2
    return lower, upper


@dataclass
class ThermalBlockProblem:
    """Two multiscale fields restricted to a 4x4 block partition.

    Component ``q = k * 16 + xi`` has coefficient ``A^k`` on block ``xi`` and
    zero elsewhere, where ``xi = bx + 4 * by`` and ``theta_q(mu) = mu_q``.

    Attributes
    ----------
    mesh : grid.MeshHierarchy
    fields : list of ndarray
        Fine-cell values of ``A^1`` and ``A^2``.
    lower, upper : ndarray
        Parameter box.
    f : float
        Constant source term.
    """
    mesh: grid.MeshHierarchy
    fields: list = field(repr=False)
    lower: np.ndarray = field(repr=False)
    upper: np.ndarray = field(repr=False)
    f: float = 10.0

    def __post_init__(self):
        n_h = self.mesh.n_h
        ey, ex = np.divmod(np.arange(n_h * n_h), n_h)
        self.cell_block = (ex * N_BLOCKS // n_h) + N_BLOCKS * (ey * N_BLOCKS // n_h)
        self._cell_field = np.stack(self.fields)
        self._stiffness = None

    @property
    def n_params(self):
        return len(self.fields) * N_BLOCKS ** 2

    @property
    def n_components(self):
        return self.n_params

    def theta(self, mu):
        return np.asarray(mu, dtype=float)

    def dtheta(self, mu):
        """Jacobian ``d theta_q / d mu_p`` (the identity for this benchmark)."""
        return np.eye(self.n_params)

    def component_field_block(self, q):
        return divmod(q, N_BLOCKS ** 2)

    def component_cells(self, q, cells=None):
        """Cell values of ``A_q`` on ``cells`` (all fine cells by default)."""
        k, xi = self.component_field_block(q)
        cells = slice(None) if cells is None else cells
        return self._cell_field[k, cells] * (self.cell_block[cells] == xi)

    def components_on(self, cells):
        """Sorted component indices whose support meets ``cells``."""
        blocks = np.unique(self.cell_block[cells])
        return np.concatenate([k * N_BLOCKS ** 2 + blocks for k in range(len(self.fields))])

    def coefficient(self, mu, cells=None):
        """Cell values of ``A_mu`` on ``cells``."""
        mu = self.check_parameter(mu)
        cells = slice(None) if cells is None else cells
        blk = self.cell_block[cells]
        out = np.zeros(blk.shape)
        for k in range(len(self.fields)):
            out += mu[k * N_BLOCKS ** 2 + blk] * self._cell_field[k, cells]
        return out

    def check_parameter(self, mu):
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (self.n_params,):
            raise ConfigError(f"parameter must have shape ({self.n_params},)")
        return mu

    def in_box(self, mu, tol=0.0):
        return bool(np.all(mu >= self.lower - tol) and np.all(mu <= self.upper + tol))

    @property
    def mu_check(self):
        """Reference parameter, the center of the box."""
        return 0.5 * (self.lower + self.upper)

    def coercivity(self, mu):
        """Lower bound of ``A_mu``: min-theta times the ess-inf of ``A_mu_check``."""
        check = self.mu_check
        return fem.min_theta_coercivity(self.theta(mu), self.theta(check),
                                        self.coefficient(check).min())

    def fine_stiffness(self, mu):
        n = self.mesh.n_h
        return fem.assemble_stiffness(n, n, self.coefficient(mu))

    def fine_load(self):
        n = self.mesh.n_h
        return fem.assemble_load(n, n, self.mesh.h, self.f)

    def energy_derivatives(self, u, p):
        """Values ``a_q(u, p)`` for all components, from fine nodal vectors."""
        n = self.mesh.n_h
        nodes, _, _ = fem._pattern(n, n)
        K, _ = fem.local_matrices()
        e = np.einsum("ci,ij,cj->c", u[nodes], K, p[nodes])
        out = np.empty(self.n_params)
        for k in range(len(self.fields)):
            out[k * N_BLOCKS ** 2:(k + 1) * N_BLOCKS ** 2] = np.bincount(
                self.cell_block, weights=e * self._cell_field[k], minlength=N_BLOCKS ** 2)
        return out


@dataclass
class Objective:
    """``J(u_H, mu) = sigma_d/2 |u_H - u_d|_M^2 + 1/2 sum sigma_i (mu_i - mu_d_i)^2 + 1``.

    ``M`` is the coarse mass matrix on the whole domain; coarse vectors are
    indexed by all coarse nodes and vanish on the boundary.
    """
    mass: sp.spmatrix = field(repr=False)
    u_d: np.ndarray = field(repr=False)
    mu_d: np.ndarray = field(repr=False)
    sigma_d: float = 100.0
    sigma: np.ndarray = field(default=None, repr=False)
    constant: float = 1.0

    def __post_init__(self):
        if self.sigma is None:
            self.sigma = np.full(self.mu_d.size, 1e-3)
        self.sigma = np.broadcast_to(np.asarray(self.sigma, float), self.mu_d.shape).copy()

    def value(self, u_H, mu):
        e = u_H - self.u_d
        dm = np.asarray(mu) - self.mu_d
        return float(0.5 * self.sigma_d * e @ (self.mass @ e)
                     + 0.5 * np.sum(self.sigma * dm * dm) + self.constant)

    def du(self, u_H):
        """Dual right-hand side ``sigma_d M (u_H - u_d)``."""
        return self.sigma_d * (self.mass @ (u_H - self.u_d))

    def dmu(self, mu):
        return self.sigma * (np.asarray(mu) - self.mu_d)


def draw_fields(n_fields_cells, rng, distribution="uniform"):
    """Random coefficient values in [0.9, 1.1]."""
    if distribution == "uniform":
        return rng.uniform(0.9, 1.1, size=n_fields_cells)
    if distribution == "truncnorm":
        return stats.truncnorm.rvs(-2.0, 2.0, loc=1.0, scale=0.05, size=n_fields_cells,
                                   random_state=rng)
    raise ConfigError(f"unknown distribution {distribution!r}")


def _expand_field(values, n_h):
    N = values.shape[0]
    idx = np.arange(n_h) * N // n_h
    return values[np.ix_(idx, idx)].ravel()


def validate_sizes(n_H, n_h, ell, N1, N2):
    if n_h % n_H:
        raise ConfigError(f"n_h={n_h} must be a multiple of n_H={n_H}")
    if n_H % N_BLOCKS or n_h % N_BLOCKS:
        raise ConfigError("mesh sizes must align with the 4x4 block partition")
    for N in (N1, N2):
        if n_h % N or n_h // N < 4:
            raise ConfigError(f"fine mesh must resolve each of the {N}x{N} field cells by >= 4x4 fine cells")
    if ell < 1:
        raise ConfigError("patch size must be at least 1")


def build_benchmark(n_H=8, n_h=160, ell=2, N1=20, N2=40, seed=0, distribution="uniform",
                    sigma_d=100.0, sigma=1e-3, f=10.0, desired="fem", preset=None):
    """Assemble the thermal-block problem, objective and initial guess.

    Parameters
    ----------
    preset : str, optional
        One of ``PRESETS``; overrides the mesh and field sizes.
    desired : {"fem", "lod"}
        Discretization used for the desired state ``u_d = I_H u(mu_d)``.

    Returns
    -------
    problem : ThermalBlockProblem
    objective : Objective
    mu0 : ndarray
    ell : int
    """
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        n_H, n_h, ell, N1, N2 = PRESETS[preset]
    validate_sizes(n_H, n_h, ell, N1, N2)
    mesh = grid.build_meshes(n_H, n_h)
    rng = np.random.Generator(np.random.Philox(seed))
    fields = [_expand_field(draw_fields((N, N), rng, distribution).reshape(N, N), n_h)
              for N in (N1, N2)]
    lower, upper = parameter_box()
    problem = ThermalBlockProblem(mesh, fields, lower, upper, f=f)

    mu_d = rng.uniform(lower, upper)
    mu_d[np.array(_DESIRED_UPPER) - 1] = 4.0
    mu_d[np.array(_DESIRED_SECOND) - 1] = 1.2
    mu0 = rng.uniform(lower, upper)

    mass = fem.assemble_mass(n_H, n_H, mesh.H).tocsr()
    if desired == "fem":
        from .models import fem_state
        u_d = grid.interpolation_matrix(mesh) @ fem_state(problem, mu_d)
    elif desired == "lod":
        from .lod import LodDiscretization
        u_d = LodDiscretization(problem, ell).solve_primal(mu_d)
    else:
        raise ConfigError(f"unknown desired-state discretization {desired!r}")
    objective = Objective(mass, u_d, mu_d, sigma_d=sigma_d, sigma=sigma)
    return problem, objective, mu0, ell
