"""Command-line entry point: ``relmesh {gen,extract,check,optimize}``.

Exit codes are 0 on success, 2 for usage or input errors and 3 when the
optimizer hits a non-finite loss.  Every random draw derives from ``--seed``;
files are written only below the ``--out`` path.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .core import BACKGROUND, RuleSet
from .deform import ARMS, OptimizationError, init_templates, reference_points, run_arm, save_meshes
from .io import ParseError, read_grid, read_mesh, read_rules, write_grid, write_points_csv, write_rules
from .metrics import evaluate
from .occupancy import set_threads
from .relations import critical_points, violation_map
from .sampling import rng_stream
from .synth import generate, load_spec

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

_INPUT_ERRORS = (ParseError, ValueError, KeyError, TypeError, IndexError, OSError)


class InputError(Exception):
    pass


def _threads(arg: int | None) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("RELMESH_THREADS")
    if env is None:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        raise InputError(f"RELMESH_THREADS must be an integer, got {env!r}") from None


def _prepare_out(path: Path, is_dir: bool = False) -> Path:
    target = path if is_dir else path.parent
    target.mkdir(parents=True, exist_ok=True)
    return path


def cmd_gen(args) -> int:
    spec, rules = load_spec(args.spec)
    grid = generate(spec, args.seed)
    write_grid(_prepare_out(args.out), grid)
    counts = {int(k): int(v) for k, v in zip(*np.unique(grid.labels, return_counts=True)) if k != BACKGROUND}
    for lab, n in counts.items():
        print(f"label {lab}: {n} voxels")
    if rules is not None and args.rules_out is not None:
        write_rules(_prepare_out(args.rules_out), rules)
    if args.templates is not None:
        temps = init_templates(grid, rules or RuleSet(()), args.subdiv, None if rules else sorted(counts))
        rng = rng_stream(args.seed, 0, BACKGROUND, -1, 5)
        noisy = {lab: m.with_vertices(m.vertices + rng.normal(scale=args.jitter * grid.spacing.mean(),
                                                                size=m.vertices.shape))
                 for lab, m in temps.items()}
        save_meshes(noisy, _prepare_out(args.templates, is_dir=True), args.format)
    return EXIT_OK


def cmd_extract(args) -> int:
    grid, rules = read_grid(args.grid), read_rules(args.rules)
    pts = critical_points(grid, rules, not args.literal_inclusion)
    write_points_csv(_prepare_out(args.out), pts)
    for i, r in enumerate(rules):
        n = int(violation_map(grid, r, not args.literal_inclusion).sum())
        kind = "inclusion" if r.is_inclusion else "exclusion"
        print(f"rule {i} ({r.subject} {kind} {r.object}): {n} critical points")
    return EXIT_OK


def _load_meshes(paths) -> dict:
    meshes = {}
    for p in paths:
        m = read_mesh(p)
        if m.structure_label in meshes:
            raise InputError(f"two meshes carry label {m.structure_label}")
        meshes[m.structure_label] = m
    return meshes


def _check_labels(meshes, grid, rules):
    present = set(grid.present_labels())
    for lab in meshes:
        if lab not in present:
            raise InputError(f"mesh label {lab} does not occur in the grid")
    for r in rules:
        for lab in (r.subject, r.object):
            if lab not in meshes:
                raise InputError(f"no mesh for label {lab} named in rule {tuple(r)}")


def cmd_check(args) -> int:
    grid, rules = read_grid(args.grid), read_rules(args.rules)
    meshes = _load_meshes(args.meshes)
    _check_labels(meshes, grid, rules)
    p_vio = critical_points(grid, rules, not args.literal_inclusion)
    refs = reference_points(grid, sorted(meshes), args.samples, args.seed)
    report = evaluate(meshes, grid, rules, p_vio, refs, seed=args.seed, surface_samples=args.samples)
    _prepare_out(args.out).write_text(report.to_csv())
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_optimize(args) -> int:
    grid, rules = read_grid(args.grid), read_rules(args.rules)
    out = _prepare_out(args.out, is_dir=True)
    templates = None
    if args.templates is not None:
        templates = _load_meshes(sorted(Path(args.templates).glob("*.off")) + sorted(Path(args.templates).glob("*.obj")))
        _check_labels(templates, grid, rules)
    kw = {} if args.step is None else {"step": args.step}
    try:
        meshes, trace, report = run_arm(grid, rules, args.arm, args.seed, args.iters, args.subdiv,
                                        templates, **kw)
    except OptimizationError as exc:
        exc.trace.to_csv(out / "trace.csv")
        print(f"error: {exc}; partial trace in {out / 'trace.csv'}", file=sys.stderr)
        return EXIT_NUMERIC
    save_meshes(meshes, out / "meshes", args.format)
    trace.to_csv(out / "trace.csv")
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.json").write_text(report.to_json() + "\n")
    if len(trace):
        print(f"{args.arm}: {len(trace)} iterations, VR {report.metadata['vr_initial']:.4f} -> {report.total['vr']:.4f}")
    else:
        print(f"{args.arm}: 0 iterations, templates written unchanged")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="relmesh",
        description="Relation-aware template mesh fitting on labelled voxel grids. "
                    "Segmentation supervision is not part of this tool: losses act on meshes only.")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for the compiled kernels (default: $RELMESH_THREADS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="rasterise a phantom spec into a label grid")
    g.add_argument("spec", type=Path, help="phantom JSON (full spec or {\"preset\": \"cardiac\", ...})")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True, help="grid file to write")
    g.add_argument("--rules-out", type=Path, help="also write the spec's rules as JSON")
    g.add_argument("--templates", type=Path, help="directory for jittered starting templates")
    g.add_argument("--subdiv", type=int, default=2)
    g.add_argument("--jitter", type=float, default=0.5, help="template noise, in voxels")
    g.add_argument("--format", choices=("off", "obj"), default="off")
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("extract", help="write the critical points of a grid")
    e.add_argument("grid", type=Path)
    e.add_argument("rules", type=Path)
    e.add_argument("--out", type=Path, required=True, help="CSV file to write")
    e.add_argument("--literal-inclusion", action="store_true",
                   help="flag every subject voxel touching non-object voxels, enclosed background included")
    e.set_defaults(func=cmd_extract)

    c = sub.add_parser("check", help="score meshes against a grid")
    c.add_argument("meshes", type=Path, nargs="+", help="OFF/OBJ files with '# label N' comments")
    c.add_argument("--grid", type=Path, required=True)
    c.add_argument("--rules", type=Path, required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--samples", type=int, default=5000, help="surface samples for CD/HD")
    c.add_argument("--out", type=Path, required=True, help="report CSV to write")
    c.add_argument("--literal-inclusion", action="store_true")
    c.set_defaults(func=cmd_check)

    o = sub.add_parser("optimize", help="fit templates under one ablation arm")
    o.add_argument("grid", type=Path)
    o.add_argument("rules", type=Path)
    o.add_argument("--arm", choices=sorted(ARMS), default="mie")
    o.add_argument("--iters", type=int, default=500)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--step", type=float, default=None, help="Adam step in world units")
    o.add_argument("--subdiv", type=int, default=2)
    o.add_argument("--templates", type=Path, help="directory of starting meshes (default: fitted spheres)")
    o.add_argument("--format", choices=("off", "obj"), default="off")
    o.add_argument("--out", type=Path, required=True, help="output directory")
    o.set_defaults(func=cmd_optimize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        set_threads(_threads(args.threads))
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
