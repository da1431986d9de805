"""Full-order models exposing the value/gradient surface used by the optimizers."""
from collections import OrderedDict

import numpy as np

from . import fem, grid
from .counters import EvaluationCounter
from .lod import LodDiscretization


def fem_state(problem, mu, method="cg", tol=1e-12, counter=None):
    """Fine FEM solution (all fine nodes, zero on the boundary)."""
    mesh = problem.mesh
    free = mesh.fine_free()
    A = fem.restrict(problem.fine_stiffness(mu), free)
    u = np.zeros(mesh.n_fine_nodes)
    u[free] = fem.solve_spd(A, problem.fine_load()[free], method=method, tol=tol)
    if counter is not None:
        counter.add("FEM")
    return u


class _Cache:
    def __init__(self, size=8):
        self.size = size
        self.data = OrderedDict()

    def get(self, mu):
        return self.data.get(np.asarray(mu, float).tobytes())

    def put(self, mu, value):
        self.data[np.asarray(mu, float).tobytes()] = value
        while len(self.data) > self.size:
            self.data.popitem(last=False)


class FemModel:
    """Reduced functional ``mu -> J(I_H u_h(mu), mu)`` with a fine FEM state."""

    def __init__(self, problem, objective, counter=None, method="cg", tol=1e-12):
        self.problem = problem
        self.objective = objective
        self.counter = counter if counter is not None else EvaluationCounter()
        self.method = method
        self.tol = tol
        self.IH = grid.interpolation_matrix(problem.mesh)
        self._cache = _Cache()
        self.lower, self.upper = problem.lower, problem.upper

    def _solve(self, A, b):
        mesh = self.problem.mesh
        free = mesh.fine_free()
        u = np.zeros(mesh.n_fine_nodes)
        u[free] = fem.solve_spd(A, b[free], method=self.method, tol=self.tol)
        self.counter.add("FEM")
        return u

    def evaluate(self, mu, gradient=True):
        mu = np.array(mu, dtype=float)
        hit = self._cache.get(mu)
        if hit is not None and (hit.get("gradient") is not None or not gradient):
            return hit
        mesh = self.problem.mesh
        A = fem.restrict(self.problem.fine_stiffness(mu), mesh.fine_free())
        if hit is None:
            u = self._solve(A, self.problem.fine_load())
            uH = self.IH @ u
            hit = {"u": u, "u_H": uH, "value": self.objective.value(uH, mu), "gradient": None}
        if gradient:
            p = self._solve(A, self.IH.T @ self.objective.du(hit["u_H"]))
            hit["gradient"] = self.objective.dmu(mu) - self.problem.energy_derivatives(hit["u"], p)
        self._cache.put(mu, hit)
        return hit

    def value(self, mu):
        return self.evaluate(mu, gradient=False)["value"]

    def gradient(self, mu):
        return self.evaluate(mu)["gradient"]


class LodModel:
    """Localized reduced functional of the PG-LOD."""

    def __init__(self, disc, objective):
        self.disc = disc
        self.objective = objective
        self.problem = disc.problem
        self.counter = disc.counter
        self.lower, self.upper = self.problem.lower, self.problem.upper
        self._cache = _Cache(size=4)

    @classmethod
    def build(cls, problem, objective, ell, **kw):
        return cls(LodDiscretization(problem, ell, **kw), objective)

    def evaluate(self, mu, gradient=True):
        mu = np.array(mu, dtype=float)
        hit = self._cache.get(mu)
        if hit is not None and (hit.gradient is not None or not gradient):
            return hit
        state = self.disc.evaluate(self.objective, mu, gradient=gradient)
        self._cache.put(mu, state)
        return state

    def value(self, mu):
        return self.evaluate(mu, gradient=False).value

    def gradient(self, mu):
        return self.evaluate(mu).gradient
