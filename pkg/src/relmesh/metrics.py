"""Evaluation measures: overlap, surface distances, smoothness and rule violations."""

from __future__ import annotations

import csv
import io as _io
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.spatial import cKDTree

from .core import CriticalPointSet, LabelGrid, RuleSet, TriMesh
from .losses import chamfer
from .occupancy import DEFAULT, OccupancyConfig, occupancy, occupancy_score

CSV_HEADER = ("structure", "dsc", "cd", "hd", "lse", "vr", "svr", "seed")


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice coefficient of two boolean grids; 1.0 when both are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"grid shapes differ: {pred.shape} vs {gt.shape}")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(pred & gt)) / denom


def voxelize(mesh: TriMesh, grid: LabelGrid, cfg: OccupancyConfig = DEFAULT, margin: int = 2) -> np.ndarray:
    """Voxels whose center has occupancy above the threshold.

    Only voxels within ``margin`` voxels of the mesh bounding box are
    evaluated; the rest are outside.
    """
    inv = np.linalg.inv(grid.affine)
    corners = mesh.vertices @ inv[:3, :3].T + inv[:3, 3] - 0.5
    lo = np.maximum(np.floor(corners.min(0)).astype(int) - margin, 0)
    hi = np.minimum(np.ceil(corners.max(0)).astype(int) + margin + 1, grid.dims)
    out = np.zeros(grid.dims, dtype=bool)
    if np.any(hi <= lo):
        return out
    axes = [np.arange(lo[k], hi[k]) for k in range(3)]
    ijk = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    occ = occupancy(mesh, grid.centers(ijk), cfg)
    out[tuple(ijk.T)] = occ > cfg.threshold
    return out


def hausdorff(p, q) -> float:
    """Symmetric Hausdorff distance between two point sets."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    if not len(p) or not len(q):
        raise ValueError("Hausdorff distance of an empty point set")
    return float(max(cKDTree(q).query(p)[0].max(), cKDTree(p).query(q)[0].max()))


def cotangent_laplacian(mesh: TriMesh) -> np.ndarray:
    """Per-vertex ``v_i - sum_j w_ij v_j / sum_j w_ij`` with cotangent weights.

    Requires a closed mesh: every edge must have two opposite angles.
    """
    v, f = mesh.vertices, mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    _, counts = np.unique(np.sort(e, axis=1), axis=0, return_counts=True)
    if np.any(counts != 2):
        raise ValueError("cotangent Laplacian needs every edge shared by two faces")
    n = len(v)
    W = np.zeros(n)
    acc = np.zeros_like(v)
    for k in range(3):
        o, a, b = f[:, k], f[:, (k + 1) % 3], f[:, (k + 2) % 3]
        ua, ub = v[a] - v[o], v[b] - v[o]
        cross = np.linalg.norm(np.cross(ua, ub), axis=1)
        cot = np.einsum("ij,ij->i", ua, ub) / np.maximum(cross, 1e-300)
        w = 0.5 * cot  # half of each opposite angle's cotangent
        for s, t in ((a, b), (b, a)):
            np.add.at(W, s, w)
            np.add.at(acc, s, w[:, None] * v[t])
    with np.errstate(divide="ignore", invalid="ignore"):
        avg = acc / W[:, None]
    return v - avg


def lse(mesh: TriMesh) -> float:
    """Mean squared cotangent-Laplacian displacement over vertices."""
    lap = cotangent_laplacian(mesh)
    return float(np.einsum("ij,ij->", lap, lap) / len(lap))


def rule_scores(mesh: TriMesh, points, cfg: OccupancyConfig = DEFAULT) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not len(pts):
        return np.zeros(0)
    return occupancy_score(mesh, pts, cfg)


def _violation_scores(meshes, p_vio: CriticalPointSet, rules: RuleSet, cfg):
    """Per-rule violation scores (score for exclusion, 1 - score for inclusion)."""
    p_vio.check_rules(rules)
    out = []
    for i, r in enumerate(rules):
        pts = p_vio.for_rule(i)
        if not len(pts):
            out.append(np.zeros(0))
            continue
        if r.subject not in meshes:
            raise ValueError(f"no mesh for rule subject label {r.subject}")
        s = rule_scores(meshes[r.subject], pts, cfg)
        out.append(1.0 - s if r.is_inclusion else s)
    return out


def per_rule_vr(meshes, p_vio, rules, cfg: OccupancyConfig = DEFAULT) -> np.ndarray:
    return np.array([np.mean(v > 0.5) if len(v) else 0.0
                     for v in _violation_scores(meshes, p_vio, rules, cfg)])


def per_rule_svr(meshes, p_vio, rules, cfg: OccupancyConfig = DEFAULT) -> np.ndarray:
    return np.array([np.mean(v) if len(v) else 0.0
                     for v in _violation_scores(meshes, p_vio, rules, cfg)])


def vr(meshes: Mapping[int, TriMesh], p_vio: CriticalPointSet, rules: RuleSet,
       cfg: OccupancyConfig = DEFAULT) -> float:
    """Violation rate: per-rule fraction of contradicting critical points, summed."""
    return float(per_rule_vr(meshes, p_vio, rules, cfg).sum())


def svr(meshes: Mapping[int, TriMesh], p_vio: CriticalPointSet, rules: RuleSet,
        cfg: OccupancyConfig = DEFAULT) -> float:
    """Severity-weighted violation: per-rule mean violation score, summed."""
    return float(per_rule_svr(meshes, p_vio, rules, cfg).sum())


@dataclass
class MetricReport:
    """Per-structure metric rows plus a summed row.

    ``rows`` maps a structure name to a dict with keys ``dsc, cd, hd, lse,
    vr, svr``; VR/SVR of a structure collect the rules it is the subject of.
    """

    rows: dict[str, dict[str, float]]
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def total(self) -> dict[str, float]:
        keys = ("dsc", "cd", "hd", "lse", "vr", "svr")
        return {k: float(sum(r[k] for r in self.rows.values())) for k in keys}

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for name, row in list(self.rows.items()) + [("Sum", self.total)]:
            w.writerow([name] + [repr(float(row[k])) for k in CSV_HEADER[1:-1]] + [self.seed])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "sum": self.total, "seed": self.seed,
                           "metadata": self.metadata}, indent=2, sort_keys=True)


def evaluate(meshes: Mapping[int, TriMesh], grid: LabelGrid, rules: RuleSet, p_vio: CriticalPointSet,
             references: Mapping[int, np.ndarray], cfg: OccupancyConfig = DEFAULT, seed: int = 0,
             surface_samples: int = 5000, names: Mapping[int, str] | None = None) -> MetricReport:
    """Full report of every mesh against the label grid and reference surfaces."""
    rng = np.random.default_rng(seed)
    vr_rule = per_rule_vr(meshes, p_vio, rules, cfg)
    svr_rule = per_rule_svr(meshes, p_vio, rules, cfg)
    rows = {}
    for lab in sorted(meshes):
        mesh = meshes[lab]
        if lab not in references:
            raise ValueError(f"no reference surface for label {lab}")
        pts, _, _ = mesh.sample_surface(surface_samples, rng)
        ref = references[lab]
        own = [i for i, r in enumerate(rules) if r.subject == lab]
        rows[(names or {}).get(lab, str(lab))] = {
            "dsc": dsc(voxelize(mesh, grid, cfg), grid.labels == lab),
            "cd": chamfer(pts, ref),
            "hd": hausdorff(pts, ref),
            "lse": lse(mesh),
            "vr": float(vr_rule[own].sum()) if own else 0.0,
            "svr": float(svr_rule[own].sum()) if own else 0.0,
        }
    meta = {
        "surface_samples": surface_samples,
        "critical_points": len(p_vio),
        "threshold": cfg.threshold,
        "sharpness": cfg.sharpness,
        "vr_per_rule": vr_rule.tolist(),
        "svr_per_rule": svr_rule.tolist(),
        "vr_rule_mean": float(vr_rule.mean()) if len(rules) else 0.0,
        "svr_rule_mean": float(svr_rule.mean()) if len(rules) else 0.0,
    }
    return MetricReport(rows, seed, meta)
