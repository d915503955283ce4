"""File formats (OFF/OBJ meshes, LGRID label grids, JSON rules, CSV tables)
and marching-cubes extraction of reference surfaces."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from skimage import measure

from .core import EXCLUSION, INCLUSION, CriticalPointSet, LabelGrid, RuleSet, TriMesh

GRID_MAGIC = "LGRID 1"
MAX_VOXELS = 2**32 - 1
RELATIONS = {"inclusion": INCLUSION, "exclusion": EXCLUSION}


class ParseError(ValueError):
    def __init__(self, msg, line: int | None = None, path=None):
        where = f"{path}:" if path else ""
        where += f"line {line}: " if line is not None else ""
        super().__init__(where + msg)
        self.line = line


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# -- meshes -----------------------------------------------------------------

def write_mesh(path, mesh: TriMesh) -> None:
    path = Path(path)
    v, f = mesh.vertices, mesh.faces
    if path.suffix.lower() == ".obj":
        lines = [f"# label {mesh.structure_label}"]
        lines += [f"v {_fmt(a)} {_fmt(b)} {_fmt(c)}" for a, b, c in v]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in f]
    else:
        lines = ["OFF", f"# label {mesh.structure_label}", f"{len(v)} {len(f)} 0"]
        lines += [f"{_fmt(a)} {_fmt(b)} {_fmt(c)}" for a, b, c in v]
        lines += [f"3 {a} {b} {c}" for a, b, c in f]
    path.write_text("\n".join(lines) + "\n")


def read_mesh(path, label: int | None = None) -> TriMesh:
    """Read an ASCII OFF or OBJ (``v``/``f`` records only) triangle mesh.

    The structure label is taken from a ``# label N`` comment unless given.
    """
    path = Path(path)
    text = path.read_text()
    reader = _read_obj if path.suffix.lower() == ".obj" else _read_off
    verts, faces, found = reader(text.splitlines(), path)
    if label is None:
        label = found if found is not None else 0
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3), label)


def _label_comment(line: str):
    parts = line.lstrip("#").split()
    if len(parts) == 2 and parts[0] == "label":
        try:
            return int(parts[1])
        except ValueError:
            return None
    return None


def _floats(tokens, lineno, path):
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise ParseError("expected numbers", lineno, path) from None
    if not all(np.isfinite(vals)):
        raise ParseError("non-finite coordinate", lineno, path)
    return vals


def _read_off(lines, path):
    label = None
    body = []
    for no, raw in enumerate(lines, 1):
        s = raw.strip()
        if s.startswith("#"):
            label = _label_comment(s) if label is None else label
            continue
        if s:
            body.append((no, s.split("#")[0].split()))
    if not body or body[0][1] != ["OFF"]:
        raise ParseError("missing OFF header", body[0][0] if body else 1, path)
    if len(body) < 2 or len(body[1][1]) < 2:
        raise ParseError("missing element counts", body[1][0] if len(body) > 1 else None, path)
    no, counts = body[1]
    try:
        nv, nf = int(counts[0]), int(counts[1])
    except ValueError:
        raise ParseError("bad element counts", no, path) from None
    if nv < 0 or nf < 0 or len(body) < 2 + nv + nf:
        raise ParseError("file ends before all elements were read", body[-1][0], path)
    verts = []
    for no, tok in body[2:2 + nv]:
        if len(tok) != 3:
            raise ParseError("vertex needs 3 coordinates", no, path)
        verts.append(_floats(tok, no, path))
    faces = []
    for no, tok in body[2 + nv:2 + nv + nf]:
        try:
            idx = [int(t) for t in tok]
        except ValueError:
            raise ParseError("bad face record", no, path) from None
        if not idx or idx[0] != 3 or len(idx) != 4:
            raise ParseError("triangles only", no, path)
        if min(idx[1:]) < 0 or max(idx[1:]) >= nv:
            raise ParseError("face index out of range", no, path)
        faces.append(idx[1:])
    if len(body) > 2 + nv + nf:
        raise ParseError("trailing data after faces", body[2 + nv + nf][0], path)
    return verts, faces, label


def _read_obj(lines, path):
    label = None
    verts, faces, face_lines = [], [], []
    for no, raw in enumerate(lines, 1):
        s = raw.strip()
        if not s:
            continue
        if s.startswith("#"):
            label = _label_comment(s) if label is None else label
            continue
        tok = s.split()
        if tok[0] == "v":
            if len(tok) != 4:
                raise ParseError("vertex needs 3 coordinates", no, path)
            verts.append(_floats(tok[1:], no, path))
        elif tok[0] == "f":
            if len(tok) != 4:
                raise ParseError("triangles only", no, path)
            try:
                idx = [int(t.split("/")[0]) for t in tok[1:]]
            except ValueError:
                raise ParseError("bad face record", no, path) from None
            faces.append(idx)
            face_lines.append(no)
        else:
            raise ParseError(f"unsupported record {tok[0]!r}", no, path)
    out = []
    for no, idx in zip(face_lines, faces):
        idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
        if min(idx) < 0 or max(idx) >= len(verts):
            raise ParseError("face index out of range", no, path)
        out.append(idx)
    return verts, out, label


# -- label grids --------------------------------------------------------------

def write_grid(path, grid: LabelGrid) -> None:
    header = [GRID_MAGIC, "dims {} {} {}".format(*grid.dims), "affine"]
    header += [" ".join(_fmt(x) for x in row) for row in grid.affine]
    header += ["dtype u8", "data"]
    payload = grid.flat().astype("<u1").tobytes()
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + payload)


def read_grid(path) -> LabelGrid:
    """Read an ``LGRID 1`` file: ASCII header then raw x-fastest uint8 payload."""
    raw = Path(path).read_bytes()
    pos = 0
    lines = []
    for _ in range(9):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise ParseError("truncated header", len(lines) + 1, path)
        try:
            lines.append(raw[pos:end].decode("ascii").strip())
        except UnicodeDecodeError:
            raise ParseError("header is not ASCII", len(lines) + 1, path) from None
        pos = end + 1
    if lines[0] != GRID_MAGIC:
        raise ParseError(f"bad magic {lines[0]!r}", 1, path)
    dims = lines[1].split()
    if len(dims) != 4 or dims[0] != "dims":
        raise ParseError("expected 'dims nx ny nz'", 2, path)
    try:
        nx, ny, nz = (int(d) for d in dims[1:])
    except ValueError:
        raise ParseError("dims must be integers", 2, path) from None
    if min(nx, ny, nz) <= 0:
        raise ParseError("dims must be positive", 2, path)
    count = nx * ny * nz
    if count > MAX_VOXELS:
        raise ParseError(f"dims product {count} exceeds the 32-bit voxel limit", 2, path)
    if lines[2] != "affine":
        raise ParseError("expected 'affine'", 3, path)
    rows = []
    for i in range(4):
        tok = lines[3 + i].split()
        if len(tok) != 4:
            raise ParseError("affine rows need 4 values", 4 + i, path)
        rows.append(_floats(tok, 4 + i, path))
    if lines[7] != "dtype u8":
        raise ParseError("only 'dtype u8' is supported", 8, path)
    if lines[8] != "data":
        raise ParseError("expected 'data'", 9, path)
    payload = raw[pos:]
    if len(payload) != count:
        raise ParseError(f"payload size mismatch: expected {count} bytes, found {len(payload)}", None, path)
    try:
        return LabelGrid.from_flat((nx, ny, nz), np.frombuffer(payload, dtype="<u1"), np.array(rows))
    except ValueError as exc:
        raise ParseError(str(exc), None, path) from None


# -- rules ----------------------------------------------------------------------

def rules_from_records(records) -> RuleSet:
    if not isinstance(records, list):
        raise ValueError("rules must be a JSON list")
    out = []
    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or not {"subject", "object", "relation"} <= rec.keys():
            raise ValueError(f"rule {i} needs subject, object and relation")
        rel = rec["relation"]
        if rel not in RELATIONS:
            raise ValueError(f"rule {i}: unknown relation {rel!r}")
        try:
            out.append((int(rec["subject"]), int(rec["object"]), RELATIONS[rel]))
        except (TypeError, ValueError):
            raise ValueError(f"rule {i}: labels must be integers") from None
    return RuleSet(tuple(out))


def read_rules(path) -> RuleSet:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno, path) from None
    if isinstance(data, dict) and "rules" in data:
        data = data["rules"]
    return rules_from_records(data)


def write_rules(path, rules: RuleSet) -> None:
    names = {v: k for k, v in RELATIONS.items()}
    recs = [{"subject": r.subject, "object": r.object, "relation": names[r.relation]} for r in rules]
    Path(path).write_text(json.dumps(recs, indent=2) + "\n")


# -- tables ------------------------------------------------------------------------

def write_points_csv(path, p_vio: CriticalPointSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "z", "label", "rule"])
        for (x, y, z), lab, r in zip(p_vio.positions, p_vio.source_label, p_vio.rule_index):
            w.writerow([_fmt(x), _fmt(y), _fmt(z), int(lab), int(r)])


def read_points_csv(path) -> CriticalPointSet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return CriticalPointSet.empty()
    pos = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows])
    return CriticalPointSet(pos, [int(r["label"]) for r in rows], [int(r["rule"]) for r in rows])


# -- marching cubes -------------------------------------------------------------------

def marching_cubes(grid: LabelGrid, label: int) -> TriMesh:
    """Surface of one label's binary mask, in world coordinates.

    The mask is zero-padded by one voxel so that structures touching the grid
    boundary still close.  On a binary field the 0.5 isolevel places every
    vertex at an edge midpoint.  Faces are oriented outward.
    """
    mask = grid.labels == label
    if not mask.any():
        raise ValueError(f"label {label} is absent from the grid")
    padded = np.pad(mask, 1).astype(np.float32)
    verts, faces, _, _ = measure.marching_cubes(padded, level=0.5, method="lewiner",
                                                allow_degenerate=False)
    verts = verts.astype(np.float64) - 1.0 + 0.5  # padded index -> voxel-center frame
    world = verts @ grid.affine[:3, :3].T + grid.affine[:3, 3]
    mesh = TriMesh(world, faces, label)
    if mesh.volume() < 0:
        mesh = TriMesh(world, faces[:, ::-1], label)
    return mesh
