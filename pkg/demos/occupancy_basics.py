"""
Inside or outside: the dipole occupancy field
=============================================

A closed triangle mesh is turned into a smooth field that is close to 1
inside and close to 0 outside.  Every vertex contributes a dipole weighted
by its area normal.
"""

import numpy as np

from relmesh.occupancy import occupancy, occupancy_gradient, occupancy_score
from relmesh.synth import icosphere

# a unit sphere with 642 vertices
sphere = icosphere(3)
print("vertices:", sphere.n_vertices, "volume:", round(sphere.volume(), 4))

# walk from the center outwards along a direction that avoids the vertices
r = np.linspace(0.0, 2.0, 9)
line = r[:, None] * np.array([0.6, 0.8, 0.0])
for ri, o, s in zip(r, occupancy(sphere, line), occupancy_score(sphere, line)):
    print(f"r = {ri:4.2f}   occupancy {o:6.3f}   score {s:5.3f}")

# the score is a sigmoid of (occupancy - 0.5), so it is 0.5 near the surface
# and saturates a little way off it

# within about one edge length of a vertex the dipole sum is not bounded
# by [0, 1]; this walk along x passes right by one
spike = np.array([[0.96, 0, 0], [1.02, 0, 0]])
print("next to a vertex:", np.round(occupancy(sphere, spike), 3))

# flipping the faces flips the sign of the field
flipped = sphere.__class__(sphere.vertices, sphere.faces[:, ::-1])
print("center, flipped mesh:", occupancy(flipped, [[0, 0, 0]])[0])

# derivatives with respect to the vertices are analytic; contracting the
# jacobian with the vertex positions gives the rate of change under scaling
q = [[0.63, 0.84, 0.0]]
jac = occupancy_gradient(sphere, q)
print("jacobian shape:", jac.shape)
rate = np.einsum("pvk,vk->p", jac, sphere.vertices)[0]
h = 1e-6
fd = (occupancy(sphere.with_vertices(sphere.vertices * (1 + h)), q)[0]
      - occupancy(sphere.with_vertices(sphere.vertices * (1 - h)), q)[0]) / (2 * h)
print(f"growing the sphere raises occupancy just outside it: {rate:.4f} (finite difference {fd:.4f})")
