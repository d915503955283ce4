"""Template fitting by direct first-order optimisation of vertex positions."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .core import BACKGROUND, CriticalPointSet, LabelGrid, QueryBatch, RuleSet, TriMesh, world_to_voxel
from .io import marching_cubes, write_mesh
from .losses import LossWeights, total_loss
from .metrics import MetricReport, evaluate, per_rule_svr, per_rule_vr
from .occupancy import OccupancyConfig
from .relations import critical_points
from .sampling import SamplingConfig, rng_stream
from .synth import icosphere

TRACE_FIELDS = ("iteration", "total", "chamfer", "occ", "mie", "smooth", "vr", "svr", "max_disp")


class OptimizationError(RuntimeError):
    """Raised when the loss becomes non-finite; carries the partial trace."""

    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class Arm:
    name: str
    weights: LossWeights
    rho: float
    critical_queries: bool = False  # feed critical voxels to plain occupancy sampling


ARMS = {
    "chamfer": Arm("chamfer", LossWeights(1.0, 0.0, 0.0), 0.0),
    "occ": Arm("occ", LossWeights(0.0, 1.0, 0.0), 0.0),
    "occ02": Arm("occ02", LossWeights(0.0, 1.0, 0.0), 0.2, critical_queries=True),
    "mie": Arm("mie", LossWeights(0.0, 0.0, 1.0), 0.0),
    "mie02": Arm("mie02", LossWeights(0.0, 0.0, 1.0), 0.2),
}


@dataclass(frozen=True)
class OptimConfig:
    iterations: int = 500
    step: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    weights: LossWeights = LossWeights()
    sampling: SamplingConfig = SamplingConfig(rho=0.0)
    occ: OccupancyConfig = OccupancyConfig()
    tol: float = 1e-5
    window: int = 20
    critical_queries: bool = False
    chamfer_samples: int = 5000
    label_filter: str = "object"
    enclosed_exterior: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if not all(0.0 < b < 1.0 for b in self.betas):
            raise ValueError("moment decays must lie in (0, 1)")

    @classmethod
    def for_arm(cls, arm: str | Arm, seed: int = 0, **kw) -> "OptimConfig":
        arm = ARMS[arm] if isinstance(arm, str) else arm
        base = kw.pop("sampling", SamplingConfig())
        return cls(weights=arm.weights, sampling=replace(base, rho=arm.rho, seed=seed),
                   critical_queries=arm.critical_queries, **kw)


@dataclass
class OptimTrace:
    records: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, TRACE_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.records:
                w.writerow({k: (r[k] if k == "iteration" else repr(float(r[k]))) for k in TRACE_FIELDS})


class Adam:
    """Adam update on a dict of ``(V, 3)`` arrays."""

    def __init__(self, step=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.step = step
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def update(self, params: dict, grads: dict) -> dict:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k, np.zeros_like(p))
            v = self.v.get(k, np.zeros_like(p))
            m = self.b1 * m + (1.0 - self.b1) * g
            v = self.b2 * v + (1.0 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = p - self.step * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def init_templates(grid: LabelGrid, rules: RuleSet, subdiv: int = 2,
                   labels=None) -> dict[int, TriMesh]:
    """One volume-matched icosphere per structure, centered on its voxels."""
    labels = list(labels) if labels is not None else (rules.labels() or grid.present_labels())
    out = {}
    for lab in labels:
        mask = grid.labels == lab
        count = int(mask.sum())
        if count == 0:
            raise ValueError(f"label {lab} is absent from the grid")
        ijk = np.argwhere(mask)
        center = grid.centers(ijk).mean(axis=0)
        radius = (3.0 * count * grid.voxel_volume / (4.0 * np.pi)) ** (1.0 / 3.0)
        out[lab] = icosphere(subdiv, radius, center, lab)
    return out


def sample_queries(grid: LabelGrid, n: int, rng: np.random.Generator,
                   exclude: np.ndarray | None = None) -> QueryBatch:
    """Stratified voxel-center sample: up to ``n`` voxels of every label, background included."""
    flat = grid.flat().astype(np.int64)
    keep = np.ones(flat.size, bool) if exclude is None else ~exclude.ravel(order="F")
    pts, labs = [], []
    for lab in np.unique(flat):
        idx = np.flatnonzero((flat == lab) & keep)
        if not len(idx):
            continue
        take = idx[np.sort(rng.choice(len(idx), size=min(n, len(idx)), replace=False))]
        ijk = np.stack(np.unravel_index(take, grid.dims, order="F"), axis=1)
        pts.append(grid.centers(ijk))
        labs.append(np.full(len(take), lab))
    return QueryBatch(np.concatenate(pts), np.concatenate(labs))


def critical_mask(grid: LabelGrid, p_vio: CriticalPointSet) -> np.ndarray:
    mask = np.zeros(grid.dims, bool)
    if len(p_vio):
        ijk = world_to_voxel(grid, p_vio.positions)
        mask[tuple(ijk.T)] = True
    return mask


def critical_queries(grid: LabelGrid, p_vio: CriticalPointSet) -> QueryBatch:
    """Critical voxels as flagged query points carrying their true labels."""
    if not len(p_vio):
        return QueryBatch(np.zeros((0, 3)), [])
    pts, first = np.unique(p_vio.positions, axis=0, return_index=True)
    return QueryBatch(pts, p_vio.grid_label[first], np.ones(len(pts), bool))


def reference_points(grid: LabelGrid, labels, count: int = 5000, seed: int = 0) -> dict[int, np.ndarray]:
    """Surface samples of the marching-cubes reference mesh of each label."""
    out = {}
    for lab in labels:
        mesh = marching_cubes(grid, lab)
        out[lab] = mesh.sample_surface(count, rng_stream(seed, lab, 99))[0]
    return out


def optimize(templates: Mapping[int, TriMesh], grid: LabelGrid, rules: RuleSet, cfg: OptimConfig,
             references: Mapping[int, np.ndarray] | None = None,
             p_vio: CriticalPointSet | None = None,
             callback: Callable[[int, dict, dict], None] | None = None):
    """Fit the templates to ``grid`` under ``cfg``'s loss mix.

    Critical points are extracted once from the fixed grid; query points are
    redrawn every iteration from an iteration-keyed stream of the seed.  Each
    trace record describes the meshes *before* that iteration's update.
    Returns ``(meshes, trace)``.
    """
    if p_vio is None:
        p_vio = critical_points(grid, rules, cfg.enclosed_exterior)
    if references is None and cfg.weights.lambda_chamfer > 0:
        references = reference_points(grid, sorted(templates), cfg.chamfer_samples, cfg.sampling.seed)
    # critical voxels reach the loss through their own route when the arm has
    # one; plain supervision samples the grid as it is
    routed = cfg.weights.lambda_mie > 0 or cfg.critical_queries
    exclude = critical_mask(grid, p_vio) if routed else None
    extra = critical_queries(grid, p_vio) if cfg.critical_queries else None
    start = {lab: m.vertices.copy() for lab, m in templates.items()}
    params = {lab: m.vertices.copy() for lab, m in templates.items()}
    meshes = dict(templates)
    opt = Adam(cfg.step, cfg.betas)
    trace = OptimTrace()
    for it in range(cfg.iterations):
        rng = rng_stream(cfg.sampling.seed, it, BACKGROUND, -1, 2)
        query = sample_queries(grid, cfg.sampling.n, rng, exclude)
        if extra is not None and len(extra):
            query = QueryBatch.concat([query, extra])
        loss = total_loss(meshes, query, p_vio, rules, cfg.weights, cfg.sampling, cfg.occ,
                          references, it, cfg.chamfer_samples, cfg.label_filter)
        rec = {
            "iteration": it,
            "total": loss.value,
            **{k: loss.components[k] for k in ("chamfer", "occ", "mie", "smooth")},
            "vr": float(per_rule_vr(meshes, p_vio, rules, cfg.occ).sum()),
            "svr": float(per_rule_svr(meshes, p_vio, rules, cfg.occ).sum()),
            "max_disp": max(float(np.linalg.norm(params[k] - start[k], axis=1).max()) for k in params),
        }
        trace.records.append(rec)
        if callback is not None:
            callback(it, rec, meshes)
        if not math.isfinite(loss.value) or not all(np.all(np.isfinite(g)) for g in loss.grads.values()):
            raise OptimizationError(f"non-finite loss at iteration {it}", trace)
        params = opt.update(params, loss.grads)
        meshes = {lab: templates[lab].with_vertices(params[lab]) for lab in templates}
        if _converged(trace, cfg.window, cfg.tol):
            break
    return meshes, trace


def _converged(trace: OptimTrace, window: int, tol: float) -> bool:
    # queries are resampled every iteration, so single-iteration losses are noisy;
    # compare means of the two latest windows instead
    if window < 1 or len(trace.records) < 2 * window:
        return False
    tot = np.array([r["total"] for r in trace.records[-2 * window:]])
    prev, cur = tot[:window].mean(), tot[window:].mean()
    return abs(cur - prev) <= tol * max(abs(prev), 1e-300)


def run_arm(grid: LabelGrid, rules: RuleSet, arm: str | Arm, seed: int, iterations: int = 500,
            subdiv: int = 2, templates: Mapping[int, TriMesh] | None = None, **cfg_kw):
    """Optimise one arm from fresh templates and evaluate the result."""
    cfg = OptimConfig.for_arm(arm, seed=seed, iterations=iterations, **cfg_kw)
    if templates is None:
        templates = init_templates(grid, rules, subdiv)
    p_vio = critical_points(grid, rules, cfg.enclosed_exterior)
    refs = reference_points(grid, sorted(templates), cfg.chamfer_samples, seed)
    meshes, trace = optimize(templates, grid, rules, cfg, refs, p_vio)
    report = evaluate(meshes, grid, rules, p_vio, refs, cfg.occ, seed)
    report.metadata["arm"] = ARMS[arm].name if isinstance(arm, str) else arm.name
    report.metadata["iterations"] = len(trace)
    report.metadata["vr_initial"] = trace.records[0]["vr"] if len(trace) else float("nan")
    return meshes, trace, report


def ablation_run(grid: LabelGrid, rules: RuleSet, arms, seeds, iterations: int = 500,
                 subdiv: int = 2, threads: int = 1, **cfg_kw) -> dict[str, dict]:
    """Run every arm under every seed; summarise the Sum rows as mean and std.

    Jobs are independent and may run concurrently; results do not depend on
    the thread count.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    jobs = [(arm, s) for arm in arms for s in seeds]

    def job(a_s):
        return run_arm(grid, rules, a_s[0], a_s[1], iterations, subdiv, **cfg_kw)[2]

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        reports = list(pool.map(job, jobs))
    out = {}
    for i, arm in enumerate(arms):
        name = arm if isinstance(arm, str) else arm.name
        reps = reports[i * len(seeds):(i + 1) * len(seeds)]
        totals = {k: np.array([r.total[k] for r in reps]) for k in reps[0].total}
        out[name] = {
            "reports": reps,
            "mean": {k: float(v.mean()) for k, v in totals.items()},
            "std": {k: float(v.std(ddof=0)) for k, v in totals.items()},
        }
    return out


def save_meshes(meshes: Mapping[int, TriMesh], directory, fmt: str = "off") -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for lab in sorted(meshes):
        p = d / f"label_{lab}.{fmt}"
        write_mesh(p, meshes[lab])
        paths.append(p)
    return paths
