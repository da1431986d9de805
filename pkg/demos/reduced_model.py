"""Build a two-stage reduced model from a few snapshots and compare it with the PG-LOD.

Run with ``python demos/reduced_model.py``.
"""
import numpy as np

from lodtr import lod, problem as pb, tsrblod
from lodtr.stability import SurrogateConstants

prob, obj, mu0, ell = pb.build_benchmark(preset="small", seed=0)
disc = lod.LodDiscretization(prob, ell)
rng = np.random.default_rng(4)
snapshots = [rng.uniform(prob.lower, prob.upper) for _ in range(3)]

models = tsrblod.build_stage1(disc)
for mu in snapshots:
    tsrblod.stage1_enrich(models, mu, None, disc.evaluate(obj, mu, keep_z=True))
rom = tsrblod.TwoScaleROM(disc, obj, models, SurrogateConstants(disc, obj)).build(snapshots)
print("local basis sizes:", sorted({m.size for m in models}), " two-scale sizes:", rom.size)

print("\n      J_h          |J_h - J_r|    Delta_J   effectivity")
for mu in snapshots[:1] + [rng.uniform(prob.lower, prob.upper) for _ in range(5)]:
    J = disc.evaluate(obj, mu, gradient=False).value
    h = rom.evaluate(mu, gradient=False)
    err = abs(J - h["value"])
    eff = h["delta_J"] / err if err else float("inf")
    print(f"{J:.10f}   {err:.3e}   {h['delta_J']:.3e}   {eff:.3g}")
