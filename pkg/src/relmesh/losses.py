"""Training objectives with analytic vertex gradients.

Every loss returns a :class:`LossValue` holding the scalar, one ``(V, 3)``
gradient per structure label and a component breakdown.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .core import CriticalPointSet, QueryBatch, RuleSet, TriMesh
from .occupancy import DEFAULT, OccupancyConfig, occupancy_vjp
from .relations import RuleSamplePools, assemble_rule_pools
from .sampling import SamplingConfig, ScoredSample, rng_stream, split_and_score

CLAMP = 1e-7
NO_RULE = -1


@dataclass(frozen=True)
class LossWeights:
    lambda_chamfer: float = 0.0
    lambda_occ: float = 0.0
    lambda_mie: float = 1.0

    def __post_init__(self):
        for name in ("lambda_chamfer", "lambda_occ", "lambda_mie"):
            w = getattr(self, name)
            if not np.isfinite(w) or w < 0:
                raise ValueError(f"{name} must be finite and >= 0")


@dataclass
class LossValue:
    value: float
    grads: dict[int, np.ndarray] = field(default_factory=dict)
    components: dict[str, float] = field(default_factory=dict)

    def add_grad(self, label: int, g: np.ndarray, scale: float = 1.0) -> None:
        if label in self.grads:
            self.grads[label] = self.grads[label] + scale * g
        else:
            self.grads[label] = scale * g


def _bce_parts(scores, targets):
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"length mismatch: {s.shape} scores vs {t.shape} targets")
    if not s.size:
        raise ValueError("binary cross-entropy of an empty batch")
    c = np.clip(s, CLAMP, 1.0 - CLAMP)
    value = -np.mean(t * np.log(c) + (1.0 - t) * np.log(1.0 - c))
    inside = (s > CLAMP) & (s < 1.0 - CLAMP)
    grad = np.where(inside, (c - t) / (c * (1.0 - c)), 0.0) / s.size
    return float(value), grad


def bce(scores, targets) -> float:
    """Mean binary cross-entropy with scores clamped to [1e-7, 1 - 1e-7]."""
    return _bce_parts(scores, targets)[0]


def _scored_bce(mesh: TriMesh, samples: list[ScoredSample], occ_cfg: OccupancyConfig):
    """BCE over the concatenated samples and its gradient on ``mesh``."""
    scores = np.concatenate([s.scores() for s in samples])
    targets = np.concatenate([s.targets() for s in samples])
    value, dl_ds = _bce_parts(scores, targets)
    # d score / d O for the centered sigmoid
    dl_do = dl_ds * occ_cfg.sharpness * scores * (1.0 - scores)
    pts = np.concatenate([s.points() for s in samples])
    return value, occupancy_vjp(mesh, pts, dl_do, occ_cfg)


def _score_pools(mesh, pools: RuleSamplePools, cfg, occ_cfg, key) -> ScoredSample:
    return split_and_score(mesh, pools.positives, pools.negatives, cfg, occ_cfg,
                           rng=rng_stream(cfg.seed, *key),
                           crit_plus=pools.positive_critical, crit_minus=pools.negative_critical)


def occ_loss(mesh: TriMesh, query: QueryBatch, cfg: SamplingConfig,
             occ_cfg: OccupancyConfig = DEFAULT, iteration: int = 0) -> LossValue:
    """Occupancy BCE of one structure against the labels of ``query``.

    Points carrying the mesh's label are targets 1, all others 0.  Points
    flagged critical in ``query`` feed the ``rho`` share of the budget.
    """
    if not len(query):
        raise ValueError("query batch is empty")
    label = mesh.structure_label
    pools = RuleSamplePools.base(query, label)
    sample = _score_pools(mesh, pools, cfg, occ_cfg, (iteration, label, NO_RULE))
    value, grad = _scored_bce(mesh, [sample], occ_cfg)
    return LossValue(value, {label: grad}, {"occ": value})


def mie_loss(meshes: Mapping[int, TriMesh], query: QueryBatch, p_vio: CriticalPointSet,
             rules: RuleSet, cfg: SamplingConfig, occ_cfg: OccupancyConfig = DEFAULT,
             iteration: int = 0, label_filter: str = "object") -> LossValue:
    """Relation-aware occupancy loss.

    For every structure mesh, each rule with that structure as subject builds
    its own positive/negative pools (regular query points plus routed
    critical points) and draws a budgeted sample; a structure without rules
    uses the plain query pools.  The loss is the BCE over each structure's
    concatenated samples, summed over structures.  With no rules this is
    exactly the sum of :func:`occ_loss` over structures.
    """
    if not len(query):
        raise ValueError("query batch is empty")
    p_vio.check_rules(rules)
    for r in rules:
        if r.subject not in meshes:
            raise ValueError(f"no mesh for rule subject label {r.subject}")
    total = 0.0
    out = LossValue(0.0)
    for label in sorted(meshes):
        mesh = meshes[label]
        if mesh.structure_label != label:
            raise ValueError(f"mesh keyed {label} carries label {mesh.structure_label}")
        own = [(i, r) for i, r in enumerate(rules) if r.subject == label]
        if own:
            samples = [
                _score_pools(mesh, assemble_rule_pools(query, p_vio, r, mesh, occ_cfg, i, label_filter),
                             cfg, occ_cfg, (iteration, label, i))
                for i, r in own
            ]
        else:
            samples = [_score_pools(mesh, RuleSamplePools.base(query, label), cfg, occ_cfg,
                                    (iteration, label, NO_RULE))]
        value, grad = _scored_bce(mesh, samples, occ_cfg)
        total += value
        out.add_grad(label, grad)
    out.value = total
    out.components["mie"] = total
    return out


def chamfer(p, q) -> float:
    """Symmetric squared Chamfer distance, mean-aggregated in both directions."""
    return chamfer_with_grad(p, q)[0]


def chamfer_with_grad(p, q):
    """Chamfer distance and its gradient with respect to the points of ``p``."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    if not len(p) or not len(q):
        raise ValueError("chamfer distance of an empty point set")
    dpq, ipq = cKDTree(q).query(p)
    dqp, iqp = cKDTree(p).query(q)
    value = float(np.mean(dpq**2) + np.mean(dqp**2))
    grad = 2.0 * (p - q[ipq]) / len(p)
    np.add.at(grad, iqp, -2.0 * (q - p[iqp]) / len(q))
    return value, grad


def chamfer_loss(mesh: TriMesh, reference: np.ndarray, count: int = 5000,
                 rng: np.random.Generator | None = None) -> LossValue:
    """Chamfer distance from area-weighted surface samples of ``mesh`` to ``reference``.

    The sample locations are fixed barycentric combinations of the vertices,
    so the gradient flows to the three corners of each sampled face.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    pts, fi, bary = mesh.sample_surface(count, rng)
    value, gp = chamfer_with_grad(pts, reference)
    grad = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(grad, mesh.faces[fi, k], bary[:, k:k + 1] * gp)
    return LossValue(value, {mesh.structure_label: grad}, {"chamfer": value})


def umbrella_operator(mesh: TriMesh) -> sparse.csr_matrix:
    """``I - W`` with ``W`` the row-normalised one-ring adjacency."""
    n = mesh.n_vertices
    e = mesh.edges()
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    if np.any(deg == 0):
        raise ValueError("mesh has isolated vertices")
    return sparse.identity(n, format="csr") - sparse.diags(1.0 / deg) @ adj


def smoothness(mesh: TriMesh) -> LossValue:
    """Mean squared distance of each vertex from its one-ring centroid."""
    L = umbrella_operator(mesh)
    lap = L @ mesh.vertices
    n = mesh.n_vertices
    value = float(np.einsum("ij,ij->", lap, lap) / n)
    grad = 2.0 * (L.T @ lap) / n
    return LossValue(value, {mesh.structure_label: grad}, {"smooth": value})


def total_loss(meshes: Mapping[int, TriMesh], query: QueryBatch | None, p_vio: CriticalPointSet | None,
               rules: RuleSet, weights: LossWeights, cfg: SamplingConfig,
               occ_cfg: OccupancyConfig = DEFAULT, references: Mapping[int, np.ndarray] | None = None,
               iteration: int = 0, chamfer_samples: int = 5000, label_filter: str = "object") -> LossValue:
    """Weighted sum of the active objectives plus per-structure smoothness.

    Components whose weight is zero are not evaluated.  There is no
    segmentation term; its network is not part of this package.
    """
    out = LossValue(0.0, {lab: np.zeros_like(m.vertices) for lab, m in meshes.items()},
                    {"chamfer": 0.0, "occ": 0.0, "mie": 0.0, "smooth": 0.0})
    if weights.lambda_chamfer > 0:
        if references is None:
            raise ValueError("chamfer weight > 0 requires reference point sets")
        for lab in sorted(meshes):
            if lab not in references:
                raise ValueError(f"no reference points for label {lab}")
            part = chamfer_loss(meshes[lab], references[lab], chamfer_samples,
                                rng_stream(cfg.seed, iteration, lab, NO_RULE, 1))
            out.components["chamfer"] += part.value
            out.add_grad(lab, part.grads[lab], weights.lambda_chamfer)
    if weights.lambda_occ > 0:
        for lab in sorted(meshes):
            part = occ_loss(meshes[lab], query, cfg, occ_cfg, iteration)
            out.components["occ"] += part.value
            out.add_grad(lab, part.grads[lab], weights.lambda_occ)
    if weights.lambda_mie > 0:
        part = mie_loss(meshes, query, p_vio if p_vio is not None else CriticalPointSet.empty(),
                        rules, cfg, occ_cfg, iteration, label_filter)
        out.components["mie"] = part.value
        for lab, g in part.grads.items():
            out.add_grad(lab, g, weights.lambda_mie)
    for lab in sorted(meshes):
        part = smoothness(meshes[lab])
        out.components["smooth"] += part.value
        out.add_grad(lab, part.grads[lab])
    c = out.components
    out.value = (weights.lambda_chamfer * c["chamfer"] + weights.lambda_occ * c["occ"]
                 + weights.lambda_mie * c["mie"] + c["smooth"])
    return out
