"""Shared domain types: triangle meshes, label grids, rules and point batches."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

BACKGROUND = 0
INCLUSION = 1
EXCLUSION = 0

AREA_TOL = 1e-12
DET_TOL = 1e-12


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle surface for a single structure.

    Faces are counter-clockwise when seen from outside, so that face normals
    ``(b - a) x (c - a)`` point outward.
    """

    vertices: np.ndarray
    faces: np.ndarray
    structure_label: int = 0

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        object.__setattr__(self, "structure_label", int(self.structure_label))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return TriMesh(vertices, self.faces, self.structure_label)

    def face_normals(self) -> np.ndarray:
        """Area-weighted face normals, ``0.5 * (e1 x e2)`` (length = face area)."""
        v = self.vertices
        f = self.faces
        return 0.5 * np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])

    def face_areas(self) -> np.ndarray:
        return np.linalg.norm(self.face_normals(), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def volume(self) -> float:
        """Signed enclosed volume (positive for outward orientation)."""
        v = self.vertices
        f = self.faces
        return float(np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6.0)

    def bbox_diagonal(self) -> float:
        if not len(self.vertices):
            return 0.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def sample_surface(self, count: int, rng: np.random.Generator):
        """Area-weighted uniform samples on the surface.

        Returns ``(points, face_index, barycentric)`` so that callers can push
        gradients from the samples back onto the vertices.
        """
        areas = self.face_areas()
        total = areas.sum()
        if total <= 0:
            raise ValueError("cannot sample a mesh with zero area")
        fi = rng.choice(len(areas), size=count, p=areas / total)
        r1 = np.sqrt(rng.random(count))
        r2 = rng.random(count)
        bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
        tri = self.vertices[self.faces[fi]]
        pts = np.einsum("nk,nkd->nd", bary, tri)
        return pts, fi, bary


class MeshReport(NamedTuple):
    watertight: bool
    degenerate_faces: int
    boundary_edges: int


def validate_mesh(mesh: TriMesh) -> MeshReport:
    """Check closedness, orientation consistency and degenerate faces.

    A mesh is watertight when every undirected edge is used by exactly two
    faces which traverse it in opposite directions.
    """
    f = mesh.faces
    if not len(f):
        return MeshReport(False, 0, 0)
    same = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
    degenerate = int(np.count_nonzero(same | (mesh.face_areas() <= AREA_TOL)))

    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    undirected, inverse, counts = np.unique(
        np.sort(directed, axis=1), axis=0, return_inverse=True, return_counts=True
    )
    boundary = int(np.count_nonzero(counts == 1))
    # +1 when the directed edge runs low->high, -1 otherwise; a consistently
    # oriented closed surface cancels on every edge.
    sign = np.where(directed[:, 0] < directed[:, 1], 1, -1)
    balance = np.zeros(len(undirected), dtype=np.int64)
    np.add.at(balance, inverse.ravel(), sign)
    watertight = bool(np.all(counts == 2) and np.all(balance == 0) and degenerate == 0)
    return MeshReport(watertight, degenerate, boundary)


@dataclass(frozen=True, eq=False)
class LabelGrid:
    """Dense voxel volume of structure labels with a voxel-to-world affine.

    ``labels`` has shape ``(nx, ny, nz)`` and is indexed ``labels[i, j, k]``;
    serialization flattens it x-fastest (Fortran order).
    """

    labels: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise ValueError("labels must be a 3D array")
        if lab.dtype != np.uint8:
            if lab.size and (lab.min() < 0 or lab.max() > 255):
                raise ValueError("labels must fit in uint8")
            lab = lab.astype(np.uint8)
        aff = np.array(self.affine, dtype=np.float64)
        if aff.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        if not np.array_equal(aff[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("affine last row must be (0, 0, 0, 1)")
        if abs(np.linalg.det(aff[:3, :3])) <= DET_TOL:
            raise ValueError("affine is singular")
        object.__setattr__(self, "labels", _frozen(np.array(lab, copy=True)))
        object.__setattr__(self, "affine", _frozen(aff))

    @classmethod
    def from_flat(cls, dims, data, affine=None) -> "LabelGrid":
        dims = tuple(int(d) for d in dims)
        data = np.asarray(data, dtype=np.uint8)
        if data.size != int(np.prod(dims, dtype=np.int64)):
            raise ValueError(f"expected {np.prod(dims)} labels, got {data.size}")
        return cls(data.reshape(dims, order="F"), np.eye(4) if affine is None else affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    def flat(self) -> np.ndarray:
        return self.labels.ravel(order="F")

    @property
    def spacing(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    @property
    def voxel_volume(self) -> float:
        return float(abs(np.linalg.det(self.affine[:3, :3])))

    def present_labels(self) -> list[int]:
        return [int(v) for v in np.unique(self.labels) if v != BACKGROUND]

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label

    def centers(self, ijk: np.ndarray | None = None) -> np.ndarray:
        """World positions of voxel centers; all voxels (x-fastest) by default."""
        if ijk is None:
            ijk = np.argwhere(np.ones(self.dims[::-1], dtype=bool))[:, ::-1]
        return voxel_to_world(self, ijk)


def voxel_to_world(grid: LabelGrid, ijk) -> np.ndarray:
    """Map voxel indices to world coordinates of the voxel *centers*.

    Accepts a single ``(3,)`` index or an ``(N, 3)`` array.
    """
    idx = np.asarray(ijk)
    single = idx.ndim == 1
    idx = np.atleast_2d(idx)
    if idx.shape[-1] != 3:
        raise ValueError("voxel indices must have 3 components")
    dims = np.array(grid.dims)
    if np.any(idx < 0) or np.any(idx >= dims):
        raise IndexError("voxel index outside grid")
    h = idx.astype(np.float64) + 0.5
    out = h @ grid.affine[:3, :3].T + grid.affine[:3, 3]
    return out[0] if single else out


def world_to_voxel(grid: LabelGrid, xyz, as_int: bool = True) -> np.ndarray:
    """Inverse of :func:`voxel_to_world`; rounds to the containing voxel."""
    p = np.asarray(xyz, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    h = np.linalg.solve(grid.affine[:3, :3], (p - grid.affine[:3, 3]).T).T - 0.5
    if as_int:
        h = np.rint(h).astype(np.int64)
    return h[0] if single else h


class Rule(NamedTuple):
    subject: int
    object: int
    relation: int  # 1 = subject enclosed by object, 0 = disjoint

    @property
    def is_inclusion(self) -> bool:
        return self.relation == INCLUSION


@dataclass(frozen=True)
class RuleSet:
    rules: tuple[Rule, ...] = ()

    def __post_init__(self):
        rules = tuple(Rule(int(a), int(b), int(t)) for a, b, t in self.rules)
        seen = set()
        for r in rules:
            if r.relation not in (INCLUSION, EXCLUSION):
                raise ValueError(f"relation must be 0 or 1, got {r.relation}")
            if r.subject == r.object:
                raise ValueError(f"rule relates label {r.subject} to itself")
            if (r.subject, r.object) in seen:
                raise ValueError(f"duplicate rule for pair ({r.subject}, {r.object})")
            seen.add((r.subject, r.object))
        object.__setattr__(self, "rules", rules)

    def __len__(self):
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)

    def __getitem__(self, i) -> Rule:
        return self.rules[i]

    def labels(self) -> list[int]:
        return sorted({lab for r in self.rules for lab in (r.subject, r.object)})


@dataclass(frozen=True, eq=False)
class CriticalPointSet:
    """World-space violation points.

    ``source_label`` is the object label of the rule that produced the point
    (the label Algorithm-style filters match on); ``grid_label`` is the label
    of the voxel itself.
    """

    positions: np.ndarray
    source_label: np.ndarray
    rule_index: np.ndarray
    grid_label: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(pos)
        src = np.asarray(self.source_label, dtype=np.int64).reshape(n)
        rule = np.asarray(self.rule_index, dtype=np.int64).reshape(n)
        grid = src if self.grid_label is None else self.grid_label
        grid = np.asarray(grid, dtype=np.int64).reshape(n)
        if not np.all(np.isfinite(pos)):
            raise ValueError("critical point positions must be finite")
        if n and rule.min() < 0:
            raise ValueError("negative rule index")
        for name, arr in (("positions", pos), ("source_label", src),
                          ("rule_index", rule), ("grid_label", grid)):
            object.__setattr__(self, name, _frozen(arr))

    @classmethod
    def empty(cls) -> "CriticalPointSet":
        return cls(np.zeros((0, 3)), [], [], [])

    def __len__(self):
        return len(self.positions)

    def check_rules(self, rules: RuleSet) -> None:
        if len(self) and self.rule_index.max() >= len(rules):
            raise ValueError("critical point refers to a rule that does not exist")

    def for_rule(self, index: int) -> np.ndarray:
        return self.positions[self.rule_index == index]


@dataclass(frozen=True, eq=False)
class QueryBatch:
    """Labeled sample points; ``target`` is the ground-truth occupancy."""

    points: np.ndarray
    labels: np.ndarray
    is_critical: np.ndarray | None = None
    target: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(pts)
        lab = np.asarray(self.labels, dtype=np.int64).reshape(n)
        crit = np.zeros(n, bool) if self.is_critical is None else np.asarray(self.is_critical, bool).reshape(n)
        tgt = np.zeros(n, np.int8) if self.target is None else np.asarray(self.target).reshape(n)
        if not np.all(np.isin(tgt, (0, 1))):
            raise ValueError("targets must be 0 or 1")
        for name, arr in (("points", pts), ("labels", lab), ("is_critical", crit),
                          ("target", tgt.astype(np.int8))):
            object.__setattr__(self, name, _frozen(arr))

    def __len__(self):
        return len(self.points)

    def for_label(self, label: int) -> "QueryBatch":
        """Same points with targets set to 1 for ``label`` and 0 elsewhere."""
        return QueryBatch(self.points, self.labels, self.is_critical,
                          (self.labels == label).astype(np.int8))

    @classmethod
    def concat(cls, batches: Iterable["QueryBatch"]) -> "QueryBatch":
        batches = list(batches)
        return cls(np.concatenate([b.points for b in batches]),
                   np.concatenate([b.labels for b in batches]),
                   np.concatenate([b.is_critical for b in batches]),
                   np.concatenate([b.target for b in batches]))
