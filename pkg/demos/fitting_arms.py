"""
Fitting templates with and without the rules
============================================

Spheres are fitted to the overlapping phantom under two objectives: a plain
Chamfer fit to the reference surfaces, and the rule-aware occupancy loss.
The violation rate is tracked on the critical points of the label grid.
Takes about a minute.
"""

import numpy as np

from relmesh.deform import run_arm
from relmesh.synth import cardiac_preset, generate

spec, rules = cardiac_preset(overlap_mm=2.0)
grid = generate(spec)

results = {}
for arm in ("chamfer", "mie"):
    meshes, trace, report = run_arm(grid, rules, arm, seed=1, iterations=300)
    results[arm] = report
    vr = trace.column("vr")
    print(f"{arm:8s} VR every 50 iterations:", np.round(vr[::50], 3).tolist())

print()
print(results["mie"].to_csv())

# the rule-aware arm drives VR well below its starting value, the Chamfer
# arm only follows the reference surfaces, which themselves overlap
for arm, rep in results.items():
    print(f"{arm:8s} VR {rep.metadata['vr_initial']:.3f} -> {rep.total['vr']:.3f}   "
          f"mean DSC {np.mean([rep.rows[k]['dsc'] for k in rep.rows]):.3f}")
