"""Independent reference implementations used by the tests.

Nothing here imports the code under test beyond plain data containers, so a
bug in the library cannot leak into its own oracle.
"""

from collections import deque
from itertools import product

import numpy as np

FACE_OFFSETS = [(0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def ray_parity_inside(vertices, faces, points, direction=(0.5773, 0.5774, 0.5775), chunk=2000):
    """Inside test by counting ray/triangle crossings (Moller-Trumbore)."""
    v = np.asarray(vertices, float)
    f = np.asarray(faces)
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    e1, e2 = b - a, c - a
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    h = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, h)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    pts = np.asarray(points, float)
    out = np.zeros(len(pts), bool)
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        sv = p[:, None, :] - a[None]
        u = np.einsum("pfk,fk->pf", sv, h) * inv
        q = np.cross(sv, e1[None])
        w = (q @ d) * inv
        t = np.einsum("pfk,fk->pf", q, e2) * inv
        hit = ok & (u >= 0) & (w >= 0) & (u + w <= 1) & (t > 0)
        out[s:s + chunk] = hit.sum(axis=1) % 2 == 1
    return out


def brute_dilate(mask):
    """6-neighbourhood dilation with the center, outside the grid is empty."""
    nx, ny, nz = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for i, j, k in product(range(nx), range(ny), range(nz)):
        for di, dj, dk in FACE_OFFSETS:
            a, b, c = i + di, j + dj, k + dk
            if 0 <= a < nx and 0 <= b < ny and 0 <= c < nz and mask[a, b, c]:
                out[i, j, k] = True
                break
    return out


def brute_open_background(free):
    """Cells of ``free`` reachable by face steps from beyond the grid (BFS)."""
    nx, ny, nz = free.shape
    seen = np.zeros_like(free, dtype=bool)
    todo = deque()
    for i, j, k in product(range(nx), range(ny), range(nz)):
        border = i in (0, nx - 1) or j in (0, ny - 1) or k in (0, nz - 1)
        if border and free[i, j, k]:
            seen[i, j, k] = True
            todo.append((i, j, k))
    while todo:
        i, j, k = todo.popleft()
        for di, dj, dk in FACE_OFFSETS[1:]:
            a, b, c = i + di, j + dj, k + dk
            if 0 <= a < nx and 0 <= b < ny and 0 <= c < nz and free[a, b, c] and not seen[a, b, c]:
                seen[a, b, c] = True
                todo.append((a, b, c))
    return seen


def brute_violation(labels, subject, obj, inclusion, enclosed=True):
    """Per-voxel scan of the rule violation map."""
    subj = labels == subject
    near = brute_dilate(labels == obj)
    if not inclusion:
        return subj & near
    out = subj & ~near
    if not enclosed:
        return out
    free = (labels == 0) & ~near
    opened = brute_open_background(free)
    nx, ny, nz = labels.shape
    touch = np.zeros_like(out)
    for i, j, k in product(range(nx), range(ny), range(nz)):
        for di, dj, dk in FACE_OFFSETS:
            a, b, c = i + di, j + dj, k + dk
            inside = 0 <= a < nx and 0 <= b < ny and 0 <= c < nz
            # beyond the grid counts as open background
            if not inside or opened[a, b, c]:
                touch[i, j, k] = True
                break
    return out & touch


def brute_chamfer(p, q):
    d = np.array([[np.sum((x - y) ** 2) for y in q] for x in p])
    return d.min(axis=1).mean() + d.min(axis=0).mean()


def brute_hausdorff(p, q):
    d = np.sqrt(np.array([[np.sum((x - y) ** 2) for y in q] for x in p]))
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def central_difference(fn, x, index, h):
    """d fn / d x[index] for one coordinate of a float array."""
    xp, xm = x.copy(), x.copy()
    xp[index] += h
    xm[index] -= h
    return (fn(xp) - fn(xm)) / (2.0 * h)


def rel_error(a, b, floor=1e-12):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
