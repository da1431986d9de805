"""Compare BFGS on the full-order models with the two trust-region variants.

Run with ``python demos/compare_methods.py [preset]`` (default ``small``).
"""
import sys

from lodtr import harness

preset = sys.argv[1] if len(sys.argv) > 1 else "small"
report = harness.run(harness.ExperimentConfig.from_preset(preset))
print(harness.format_table(report))
for m in report.methods:
    print(f"{m.method:>12}: {m.reason}, rejections {m.rejections}, J = {m.value:.12f}")
