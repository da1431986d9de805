"""Patch correctors on a small thermal-block problem and the effect of the patch size.

Run with ``python demos/correctors_and_decay.py``.
"""
import numpy as np

from lodtr import harness, lod, problem as pb

prob, obj, mu0, ell = pb.build_benchmark(preset="small", seed=0)
disc = lod.LodDiscretization(prob, ell)

corr = disc.compute_correctors(mu0, gradient=False, check=True)
print(f"{len(corr)} elements, worst patch orthogonality residual "
      f"{max(c.residual for c in corr):.2e}")

state = disc.evaluate(obj, mu0)
print(f"J_loc(mu0) = {state.value:.10f}, |grad| = {np.linalg.norm(state.gradient):.3e}")

cfg = harness.ExperimentConfig(n_H=8, n_h=64, N1=8, N2=16)
print("\n ell   energy error   |J_loc - J_h|")
for row in harness.gap_study(cfg, [1, 2, 3, harness.saturated_ell(cfg)]):
    print(f"{row['ell']:>4}   {row['energy_error']:.4e}     {row['gap']:.3e}")
