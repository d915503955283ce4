"""Synthetic multi-structure label phantoms with controllable violations."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import EXCLUSION, INCLUSION, LabelGrid, RuleSet, TriMesh

LV, RV, MYO = 1, 2, 3
INJECTION_TYPES = ("overlap", "leakage", "gap")

_ICO_T = (1.0 + 5.0**0.5) / 2.0
_ICO_VERTS = np.array([
    [-1, _ICO_T, 0], [1, _ICO_T, 0], [-1, -_ICO_T, 0], [1, -_ICO_T, 0],
    [0, -1, _ICO_T], [0, 1, _ICO_T], [0, -1, -_ICO_T], [0, 1, -_ICO_T],
    [_ICO_T, 0, -1], [_ICO_T, 0, 1], [-_ICO_T, 0, -1], [-_ICO_T, 0, 1],
], dtype=np.float64)
_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.int64)


def icosphere(subdiv: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0), label: int = 0) -> TriMesh:
    """Subdivided icosahedron with every vertex at exactly ``radius``.

    Has ``10 * 4**subdiv + 2`` vertices and outward (counter-clockwise) faces.
    """
    if not 0 <= subdiv <= 6:
        raise ValueError("subdiv must be in [0, 6]")
    verts = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
    faces = _ICO_FACES
    for _ in range(subdiv):
        e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        inv = inv.ravel()
        mids = verts[uniq[:, 0]] + verts[uniq[:, 1]]
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        base = len(verts)
        nf = len(faces)
        ab, bc, ca = (base + inv[:nf], base + inv[nf:2 * nf], base + inv[2 * nf:])
        a, b, c = faces.T
        faces = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
        ])
        verts = np.concatenate([verts, mids])
    return TriMesh(verts * float(radius) + np.asarray(center, dtype=np.float64), faces, label)


@dataclass(frozen=True)
class Primitive:
    """Solid or hollow ellipsoid. A sphere is an ellipsoid with equal radii.

    ``inner_radii`` carves out a cavity centered on ``inner_center`` (the
    primitive's own center by default); an offset cavity that pokes through
    the outer surface yields a crescent.
    """

    label: int
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    inner_radii: tuple[float, float, float] | None = None
    name: str = ""
    inner_center: tuple[float, float, float] | None = None

    def __post_init__(self):
        r = _triple(self.radii)
        if min(r) <= 0:
            raise ValueError("radii must be positive")
        object.__setattr__(self, "radii", r)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if self.inner_radii is not None:
            ri = _triple(self.inner_radii)
            if min(ri) <= 0:
                raise ValueError("inner radii must be positive")
            if self.inner_center is None and any(a >= b for a, b in zip(ri, r)):
                raise ValueError("a centered cavity must be smaller than the outer radii")
            object.__setattr__(self, "inner_radii", ri)
        if self.inner_center is not None:
            if self.inner_radii is None:
                raise ValueError("inner_center needs inner_radii")
            object.__setattr__(self, "inner_center", tuple(float(c) for c in self.inner_center))
        if not 1 <= int(self.label) <= 255:
            raise ValueError("labels must be in 1..255")

    def contains(self, pts: np.ndarray) -> np.ndarray:
        rel = pts - np.asarray(self.center)
        inside = ((rel / self.radii) ** 2).sum(axis=-1) <= 1.0
        if self.inner_radii is not None:
            if self.inner_center is not None:
                rel = pts - np.asarray(self.inner_center)
            inside &= ((rel / self.inner_radii) ** 2).sum(axis=-1) > 1.0
        return inside

    def extent_along(self, direction: np.ndarray) -> float:
        """Distance from the center to the outer surface along a unit direction."""
        return float(1.0 / np.sqrt(((direction / self.radii) ** 2).sum()))

    def material_span(self, origin: np.ndarray, direction: np.ndarray, step: float = 1e-3):
        """First and last ray parameter ``t >= 0`` inside the primitive's material."""
        reach = np.linalg.norm(origin - np.asarray(self.center)) + max(self.radii)
        t = np.arange(0.0, reach + step, step)
        hit = np.flatnonzero(self.contains(origin + t[:, None] * direction))
        if not len(hit):
            return None
        return float(t[hit[0]]), float(t[hit[-1]])


@dataclass(frozen=True)
class Injection:
    """Geometric corruption of one primitive relative to another.

    ``overlap``: move ``subject`` toward ``object`` until it penetrates the
    object's outer surface by ``magnitude`` mm.  ``leakage``: move it until it
    protrudes past the object's far outer surface by ``magnitude`` mm.
    ``gap``: move it ``magnitude`` mm away from the object.  A magnitude of
    zero leaves the phantom untouched.
    """

    kind: str
    magnitude: float
    subject: int
    object: int
    direction: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.kind not in INJECTION_TYPES:
            raise ValueError(f"unknown injection type {self.kind!r}")
        if self.magnitude < 0:
            raise ValueError("injection magnitude must be >= 0")
        if self.subject == self.object:
            raise ValueError("injection needs two distinct labels")


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    voxel_size: float = 1.0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    primitives: tuple[Primitive, ...] = ()
    injections: tuple[Injection, ...] = ()
    jitter: float = 0.0

    def __post_init__(self):
        labels = [p.label for p in self.primitives]
        if len(set(labels)) != len(labels):
            raise ValueError("primitive labels must be distinct")
        if self.voxel_size <= 0:
            raise ValueError("voxel size must be positive")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def affine(self) -> np.ndarray:
        aff = np.eye(4)
        aff[:3, :3] *= self.voxel_size
        aff[:3, 3] = self.origin
        return aff

    def with_injections(self, *injections: Injection) -> "PhantomSpec":
        return replace(self, injections=tuple(self.injections) + tuple(injections))

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomSpec":
        prims = tuple(
            Primitive(label=int(p["label"]), center=tuple(p["center"]),
                      radii=p["radii"], inner_radii=p.get("inner_radii"),
                      name=p.get("name", ""),
                      inner_center=tuple(p["inner_center"]) if p.get("inner_center") else None)
            for p in data.get("primitives", ())
        )
        injections = tuple(
            Injection(kind=i["type"], magnitude=float(i["magnitude"]),
                      subject=int(i["pair"][0]), object=int(i["pair"][1]),
                      direction=tuple(i["direction"]) if i.get("direction") else None)
            for i in data.get("injections", ())
        )
        return cls(dims=tuple(data["dims"]), voxel_size=float(data.get("voxel_size", 1.0)),
                   origin=tuple(data.get("origin", (0.0, 0.0, 0.0))), primitives=prims,
                   injections=injections, jitter=float(data.get("jitter", 0.0)))

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "voxel_size": self.voxel_size,
            "origin": list(self.origin),
            "jitter": self.jitter,
            "primitives": [
                {"name": p.name, "label": p.label, "center": list(p.center), "radii": list(p.radii),
                 **({"inner_radii": list(p.inner_radii)} if p.inner_radii else {}),
                 **({"inner_center": list(p.inner_center)} if p.inner_center else {})}
                for p in self.primitives
            ],
            "injections": [
                {"type": i.kind, "magnitude": i.magnitude, "pair": [i.subject, i.object],
                 **({"direction": list(i.direction)} if i.direction else {})}
                for i in self.injections
            ],
        }


def _triple(r) -> tuple[float, float, float]:
    r = np.broadcast_to(np.asarray(r, dtype=np.float64), (3,))
    return tuple(float(x) for x in r)


def _injected(prims: list[Primitive], inj: Injection) -> list[Primitive]:
    if inj.magnitude == 0:
        return prims
    by_label = {p.label: i for i, p in enumerate(prims)}
    try:
        si, oi = by_label[inj.subject], by_label[inj.object]
    except KeyError as exc:
        raise ValueError(f"injection refers to missing label {exc.args[0]}") from None
    sub, obj = prims[si], prims[oi]
    cs, co = np.asarray(sub.center), np.asarray(obj.center)
    if inj.direction is not None:
        d = np.asarray(inj.direction, dtype=np.float64)
    else:
        d = co - cs
        if inj.kind == "gap":
            d = -d
    if np.linalg.norm(d) < 1e-12:
        d = np.array([1.0, 0.0, 0.0])
    d = d / np.linalg.norm(d)

    if inj.kind == "gap":
        shift = inj.magnitude
    else:
        span = obj.material_span(cs, d)
        if span is None:
            raise ValueError("injection direction misses the object primitive")
        t = span[0] if inj.kind == "overlap" else span[1]
        shift = t - sub.extent_along(d) + inj.magnitude
    moved = replace(sub, center=tuple(cs + shift * d))
    out = [p for i, p in enumerate(prims) if i != si]
    # the corrupted primitive is rasterized last so it overwrites its neighbours
    out.append(moved)
    return out


def resolved_primitives(spec: PhantomSpec, seed: int = 0) -> list[Primitive]:
    """Primitives in rasterization order after jitter and injections."""
    prims = list(spec.primitives)
    if spec.jitter > 0:
        rng = np.random.default_rng(seed)
        prims = [
            replace(p, radii=tuple(np.asarray(p.radii) + rng.uniform(-spec.jitter, spec.jitter, 3)))
            for p in prims
        ]
    for inj in spec.injections:
        prims = _injected(prims, inj)
    return prims


def generate(spec: PhantomSpec, seed: int = 0) -> LabelGrid:
    """Rasterize the phantom; the last primitive containing a voxel center wins.

    The seed only drives the optional radius jitter, so a spec with
    ``jitter == 0`` yields the same grid for every seed.
    """
    prims = resolved_primitives(spec, seed)
    lo = np.asarray(spec.origin, dtype=np.float64)
    hi = lo + spec.voxel_size * np.asarray(spec.dims)
    for p in prims:
        c, r = np.asarray(p.center), np.asarray(p.radii)
        if np.any(c - r < lo) or np.any(c + r > hi):
            raise ValueError(f"primitive {p.name or p.label} does not fit inside the grid")
    axes = [lo[k] + spec.voxel_size * (np.arange(spec.dims[k]) + 0.5) for k in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    labels = np.zeros(spec.dims, dtype=np.uint8)
    for p in prims:
        labels[p.contains(pts)] = p.label
    return LabelGrid(labels, spec.affine)


def cardiac_preset(overlap_mm: float = 0.0, leakage_mm: float = 0.0) -> tuple[PhantomSpec, RuleSet]:
    """Three-structure heart-like phantom and its anatomical rules.

    LV (1) is a sphere filling the cavity of the myocardium shell (3).  RV (2)
    is an ellipsoidal crescent wrapped around the shell's +x side, kept
    from it (1.2 mm).  Rules: LV inside myocardium, LV disjoint from RV, RV disjoint
    from myocardium.
    """
    spec = PhantomSpec(
        dims=(56, 44, 44),
        voxel_size=1.0,
        primitives=(
            Primitive(MYO, (19.0, 22.0, 22.0), 13.0, inner_radii=9.0, name="Myo"),
            Primitive(LV, (19.0, 22.0, 22.0), 9.0, name="LV"),
            Primitive(RV, (33.0, 22.0, 22.0), (15.0, 17.0, 16.0), inner_radii=14.2,
                      inner_center=(19.0, 22.0, 22.0), name="RV"),
        ),
    )
    injections = []
    if overlap_mm > 0:
        injections.append(Injection("overlap", overlap_mm, LV, RV))
    if leakage_mm > 0:
        injections.append(Injection("leakage", leakage_mm, LV, MYO, direction=(0.0, 0.0, 1.0)))
    rules = RuleSet(((LV, MYO, INCLUSION), (LV, RV, EXCLUSION), (RV, MYO, EXCLUSION)))
    return spec.with_injections(*injections), rules


def load_spec(path) -> tuple[PhantomSpec, RuleSet | None]:
    """Read a phantom description from JSON.

    Either a full spec (``dims``, ``primitives``, optional ``injections``,
    ``rules``) or ``{"preset": "cardiac", "overlap_mm": ..., "leakage_mm": ...}``.
    """
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError("phantom spec must be a JSON object")
    if data.get("preset") is not None:
        if data["preset"] != "cardiac":
            raise ValueError(f"unknown preset {data['preset']!r}")
        spec, rules = cardiac_preset(float(data.get("overlap_mm", 0.0)), float(data.get("leakage_mm", 0.0)))
        extra = PhantomSpec.from_dict({"dims": spec.dims, **data}).injections if data.get("injections") else ()
        return spec.with_injections(*extra), rules
    spec = PhantomSpec.from_dict(data)
    rules = None
    if "rules" in data:
        from .io import rules_from_records
        rules = rules_from_records(data["rules"])
    return spec, rules
