"""Differentiable occupancy of points with respect to a closed triangle mesh.

The occupancy is the generalized winding number evaluated with one dipole per
vertex::

    O(p) = 1/(4 pi) * sum_v a_v . (v - p) / |v - p|^3

where ``a_v`` is the area-weighted vertex normal.  For a consistently
oriented closed mesh this is ~1 inside, ~0 outside and ~0.5 on the surface.
Gradients with respect to vertex positions are analytic, including the
dependence of ``a_v`` on the incident faces.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np

from .core import TriMesh

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba = None
else:
    # kernels may be entered from several Python threads at once (ablation runs)
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "threadsafe"
    warnings.filterwarnings("ignore", message="The TBB threading layer", category=numba.NumbaWarning)

FOUR_PI = 4.0 * np.pi
# points per chunk scale with 1 / n_vertices to bound temporaries
_CHUNK_ELEMS = 1 << 21


@dataclass(frozen=True)
class OccupancyConfig:
    epsilon: float = 1e-9
    sharpness: float = 10.0
    threshold: float = 0.5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.sharpness > 0:
            raise ValueError("sharpness must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")


DEFAULT = OccupancyConfig()


def vertex_area_normals(mesh: TriMesh) -> np.ndarray:
    """Per-vertex area vectors: one third of each incident face's area normal."""
    fn = mesh.face_normals() / 3.0
    a = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(a, mesh.faces[:, k], fn)
    return a


def _check_points(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(p)):
        raise ValueError("query points must be finite")
    return p


def _chunks(n_points: int, n_vertices: int):
    step = max(1, _CHUNK_ELEMS // max(n_vertices, 1))
    for s in range(0, n_points, step):
        yield slice(s, min(s + step, n_points))


def _kernel(verts, pts, eps):
    d = verts[None, :, :] - pts[:, None, :]
    r = np.sqrt(np.einsum("cvk,cvk->cv", d, d))
    clamped = r < eps
    r = np.maximum(r, eps)
    return d, r, clamped


def occupancy(mesh: TriMesh, points, cfg: OccupancyConfig = DEFAULT) -> np.ndarray:
    """Raw winding-number occupancy of each query point."""
    pts = _check_points(points)
    if len(mesh.vertices) == 0:
        raise ValueError("mesh has no vertices")
    a = vertex_area_normals(mesh)
    if _jit_occ is not None:
        return _jit_occ(mesh.vertices, a, pts, cfg.epsilon) / FOUR_PI
    return _numpy_occupancy(mesh.vertices, a, pts, cfg.epsilon)


def _numpy_occupancy(verts, a, pts, eps):
    out = np.empty(len(pts))
    for sl in _chunks(len(pts), len(verts)):
        d, r, _ = _kernel(verts, pts[sl], eps)
        out[sl] = (np.einsum("cvk,vk->cv", d, a) / r**3).sum(axis=1)
    return out / FOUR_PI


def score_from_occupancy(occ: np.ndarray, cfg: OccupancyConfig = DEFAULT) -> np.ndarray:
    """Centered sigmoid ``sigma(k * (O - 0.5))``."""
    x = cfg.sharpness * (np.asarray(occ, dtype=np.float64) - 0.5)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def occupancy_score(mesh: TriMesh, points, cfg: OccupancyConfig = DEFAULT) -> np.ndarray:
    return score_from_occupancy(occupancy(mesh, points, cfg), cfg)


def occupancy_vjp(mesh: TriMesh, points, weights, cfg: OccupancyConfig = DEFAULT) -> np.ndarray:
    """Gradient of ``sum_p weights[p] * O(p)`` with respect to the vertices.

    This is the workhorse for the losses; it never materialises the
    per-point Jacobian.
    """
    pts = _check_points(points)
    w = np.asarray(weights, dtype=np.float64).reshape(len(pts))
    verts = mesh.vertices
    a = vertex_area_normals(mesh)
    if _jit_vjp is not None:
        g_kern, g_area = _jit_vjp(verts, a, pts, w, cfg.epsilon)
        return (g_kern + _area_chain(mesh, g_area)) / FOUR_PI
    g_area = np.zeros_like(verts)
    g_kern = np.zeros_like(verts)
    for sl in _chunks(len(pts), len(verts)):
        d, r, clamped = _kernel(verts, pts[sl], cfg.epsilon)
        inv3 = r**-3
        ad = np.einsum("cvk,vk->cv", d, a)
        wi3 = w[sl, None] * inv3
        g_area += np.einsum("cv,cvk->vk", wi3, d)
        inv5 = np.where(clamped, 0.0, inv3 / (r * r))
        g_kern += a * wi3.sum(axis=0)[:, None]
        g_kern -= 3.0 * np.einsum("cv,cvk->vk", w[sl, None] * ad * inv5, d)
    return (g_kern + _area_chain(mesh, g_area)) / FOUR_PI


def _area_chain(mesh: TriMesh, g_area: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the vertex area normals back onto the vertices."""
    v = mesh.vertices
    f = mesh.faces
    # a_v = sum over incident faces of (e1 x e2) / 6
    G = (g_area[f[:, 0]] + g_area[f[:, 1]] + g_area[f[:, 2]]) / 6.0
    vi, vj, vk = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    out = np.zeros_like(v)
    np.add.at(out, f[:, 0], np.cross(vj - vk, G))
    np.add.at(out, f[:, 1], np.cross(vk - vi, G))
    np.add.at(out, f[:, 2], np.cross(vi - vj, G))
    return out


def occupancy_gradient(mesh: TriMesh, points, cfg: OccupancyConfig = DEFAULT,
                       return_clamped: bool = False):
    """Full Jacobian ``dO(p)/dv`` with shape ``(n_points, n_vertices, 3)``.

    Contributions of vertices closer than ``cfg.epsilon`` to a point are
    clamped; their count is returned when ``return_clamped`` is set.
    Memory grows as points x vertices, so use :func:`occupancy_vjp` inside
    optimisation loops.
    """
    pts = _check_points(points)
    verts = mesh.vertices
    f = mesh.faces
    a = vertex_area_normals(mesh)
    d, r, clamped = _kernel(verts, pts, cfg.epsilon)
    inv3 = r**-3
    inv5 = np.where(clamped, 0.0, inv3 / (r * r))
    ad = np.einsum("pvk,vk->pv", d, a)
    jac = a[None] * inv3[..., None] - 3.0 * (ad * inv5)[..., None] * d

    h = d * inv3[..., None]
    G = (h[:, f[:, 0]] + h[:, f[:, 1]] + h[:, f[:, 2]]) / 6.0
    vi, vj, vk = verts[f[:, 0]], verts[f[:, 1]], verts[f[:, 2]]
    for col, edge in ((0, vj - vk), (1, vk - vi), (2, vi - vj)):
        contrib = np.cross(np.broadcast_to(edge, G.shape), G)
        np.add.at(jac, (slice(None), f[:, col]), contrib)
    jac /= FOUR_PI
    if return_clamped:
        return jac, int(np.count_nonzero(clamped))
    return jac


def occupancy_point_gradient(mesh: TriMesh, points, cfg: OccupancyConfig = DEFAULT) -> np.ndarray:
    """``dO/dp`` for each query point, shape ``(n_points, 3)``."""
    pts = _check_points(points)
    verts = mesh.vertices
    a = vertex_area_normals(mesh)
    out = np.empty_like(pts)
    for sl in _chunks(len(pts), len(verts)):
        d, r, clamped = _kernel(verts, pts[sl], cfg.epsilon)
        inv3 = r**-3
        inv5 = np.where(clamped, 0.0, inv3 / (r * r))
        ad = np.einsum("cvk,vk->cv", d, a)
        dk = a[None] * inv3[..., None] - 3.0 * (ad * inv5)[..., None] * d
        out[sl] = -dk.sum(axis=1)
    return out / FOUR_PI


def _jit_kernels():
    if numba is None:
        return None, None

    @numba.njit(cache=True, fastmath=False, parallel=True)
    def occ(verts, a, pts, eps):
        out = np.zeros(pts.shape[0])
        for p in numba.prange(pts.shape[0]):
            acc = 0.0
            for v in range(verts.shape[0]):
                dx = verts[v, 0] - pts[p, 0]
                dy = verts[v, 1] - pts[p, 1]
                dz = verts[v, 2] - pts[p, 2]
                r = max(np.sqrt(dx * dx + dy * dy + dz * dz), eps)
                acc += (a[v, 0] * dx + a[v, 1] * dy + a[v, 2] * dz) / (r * r * r)
            out[p] = acc
        return out

    @numba.njit(cache=True, fastmath=False, parallel=True)
    def vjp(verts, a, pts, w, eps):
        nv = verts.shape[0]
        g_kern = np.zeros((nv, 3))
        g_area = np.zeros((nv, 3))
        for v in numba.prange(nv):
            s0 = s1 = s2 = 0.0
            k0 = k1 = k2 = 0.0
            for p in range(pts.shape[0]):
                dx = verts[v, 0] - pts[p, 0]
                dy = verts[v, 1] - pts[p, 1]
                dz = verts[v, 2] - pts[p, 2]
                r = np.sqrt(dx * dx + dy * dy + dz * dz)
                clamped = r < eps
                if clamped:
                    r = eps
                wi3 = w[p] / (r * r * r)
                s0 += wi3 * dx
                s1 += wi3 * dy
                s2 += wi3 * dz
                k0 += wi3 * a[v, 0]
                k1 += wi3 * a[v, 1]
                k2 += wi3 * a[v, 2]
                if not clamped:
                    c = 3.0 * wi3 * (a[v, 0] * dx + a[v, 1] * dy + a[v, 2] * dz) / (r * r)
                    k0 -= c * dx
                    k1 -= c * dy
                    k2 -= c * dz
            g_area[v, 0], g_area[v, 1], g_area[v, 2] = s0, s1, s2
            g_kern[v, 0], g_kern[v, 1], g_kern[v, 2] = k0, k1, k2
        return g_kern, g_area

    return occ, vjp


_jit_occ, _jit_vjp = _jit_kernels()


def set_threads(count: int) -> int:
    """Cap the worker threads of the compiled kernels; returns the count in effect."""
    if numba is None:
        return 1
    count = max(1, min(int(count), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(count)
    return count
