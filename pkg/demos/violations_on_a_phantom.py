"""
Where do the rules break?
=========================

A three-structure phantom: a ventricle (1) inside a muscle shell (3), and a
crescent (2) wrapped around the shell.  The rules say 1 sits inside 3, and 1
and 2 as well as 2 and 3 never touch.  We push structure 1 two millimetres
into structure 2 and collect the voxels that violate the rules.
"""

import numpy as np

from relmesh.relations import critical_points, violation_map
from relmesh.synth import cardiac_preset, generate

clean_spec, rules = cardiac_preset()
clean = generate(clean_spec)
print("voxels per label:", np.bincount(clean.labels.ravel()).tolist())
print("critical points on the clean phantom:", len(critical_points(clean, rules)))

spec, _ = cardiac_preset(overlap_mm=2.0)
grid = generate(spec)
pts = critical_points(grid, rules)
for i, r in enumerate(rules):
    kind = "inside" if r.is_inclusion else "apart from"
    print(f"rule {i}: {r.subject} {kind} {r.object} -> {len(pts.for_rule(i))} critical points")

# the critical points are voxel centers in world coordinates
print("bounding box of the overlap:", pts.positions.min(0), pts.positions.max(0))

# a leak through the shell is an inclusion violation instead
leak_spec, _ = cardiac_preset(leakage_mm=2.0)
leak = generate(leak_spec)
print("leak voxels:", int(violation_map(leak, rules[0]).sum()))

# read literally, inclusion flags every subject voxel away from the object,
# so a ventricle filling the shell's cavity is flagged almost everywhere; the
# default only counts voxels touching background that is open to the outside
print("literal reading:", int(violation_map(leak, rules[0], enclosed_exterior=False).sum()))
