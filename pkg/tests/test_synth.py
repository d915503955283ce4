import json

import numpy as np
import pytest

from relmesh.core import validate_mesh
from relmesh.relations import critical_points, violation_map
from relmesh.synth import (LV, MYO, RV, Injection, PhantomSpec, Primitive, cardiac_preset, generate, icosphere,
                           load_spec, resolved_primitives)


@pytest.mark.parametrize("subdiv", range(4))
def test_icosphere_counts_and_closure(subdiv):
    m = icosphere(subdiv, 2.0, (1, 2, 3))
    assert m.n_vertices == 10 * 4**subdiv + 2
    assert m.n_faces == 20 * 4**subdiv
    assert np.allclose(np.linalg.norm(m.vertices - [1, 2, 3], axis=1), 2.0)
    assert validate_mesh(m).watertight and m.volume() > 0


def test_icosphere_rejects_bad_subdivision():
    with pytest.raises(ValueError):
        icosphere(7)


def test_primitive_validation():
    with pytest.raises(ValueError):
        Primitive(1, (0, 0, 0), 0.0)
    with pytest.raises(ValueError):
        Primitive(1, (0, 0, 0), 2.0, inner_radii=3.0)
    with pytest.raises(ValueError):
        Primitive(0, (0, 0, 0), 2.0)
    with pytest.raises(ValueError):
        Injection("melt", 1.0, 1, 2)
    with pytest.raises(ValueError):
        PhantomSpec((4, 4, 4), primitives=(Primitive(1, (2, 2, 2), 1), Primitive(1, (2, 2, 2), 1)))


def test_shell_contains():
    p = Primitive(3, (0, 0, 0), 5.0, inner_radii=3.0)
    assert p.contains(np.array([[4.0, 0, 0]]))[0]
    assert not p.contains(np.array([[1.0, 0, 0], [6.0, 0, 0]])).any()


def test_clean_preset_complies_with_its_rules():
    spec, rules = cardiac_preset()
    g = generate(spec)
    counts = np.bincount(g.labels.ravel(), minlength=4)
    assert all(counts[k] > 1000 for k in (LV, RV, MYO))
    assert len(critical_points(g, rules)) == 0


def test_overlap_injection_creates_exclusion_violations_only():
    spec, rules = cardiac_preset(overlap_mm=2.0)
    pts = critical_points(generate(spec), rules)
    assert len(pts) > 0
    assert set(pts.rule_index.tolist()) == {1}


@pytest.mark.parametrize("kind, rule", [("overlap", (1, 2, 0)), ("leakage", (1, 3, 1))])
def test_violations_grow_with_magnitude(kind, rule):
    counts = []
    for mag in (0.0, 1.0, 2.0, 3.0):
        spec, _ = cardiac_preset(**{f"{kind}_mm": mag})
        counts.append(int(violation_map(generate(spec), rule).sum()))
    assert counts[0] == 0
    assert all(b >= a for a, b in zip(counts, counts[1:])) and counts[-1] > counts[1] > 0


def test_zero_magnitude_is_a_no_op():
    spec, _ = cardiac_preset()
    injected = spec.with_injections(Injection("overlap", 0.0, LV, RV))
    assert np.array_equal(generate(spec).labels, generate(injected).labels)


def test_overlap_depth_matches_magnitude():
    spec, _ = cardiac_preset(overlap_mm=2.0)
    lv = [p for p in resolved_primitives(spec) if p.label == LV][0]
    rv = [p for p in spec.primitives if p.label == RV][0]
    # the shifted ball reaches 2 mm past the crescent's first wall along +x
    wall = 19.0 + rv.material_span(np.array([19.0, 22.0, 22.0]), np.array([1.0, 0, 0]))[0]
    assert lv.center[0] + lv.radii[0] - wall == pytest.approx(2.0, abs=2e-3)


def test_gap_moves_away():
    spec = PhantomSpec((30, 20, 20), primitives=(Primitive(1, (10, 10, 10), 4), Primitive(2, (20, 10, 10), 4)))
    moved = resolved_primitives(spec.with_injections(Injection("gap", 1.5, 1, 2)))
    assert moved[-1].center == pytest.approx((8.5, 10, 10))


def test_primitive_outside_grid_raises():
    spec = PhantomSpec((10, 10, 10), primitives=(Primitive(1, (2, 5, 5), 4.0),))
    with pytest.raises(ValueError, match="does not fit"):
        generate(spec)


def test_jitter_is_seeded():
    spec = PhantomSpec((20, 20, 20), primitives=(Primitive(1, (10, 10, 10), 6.0),), jitter=1.0)
    a, b, c = generate(spec, 1), generate(spec, 1), generate(spec, 2)
    assert np.array_equal(a.labels, b.labels) and not np.array_equal(a.labels, c.labels)


def test_load_spec_preset_and_full(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"preset": "cardiac", "overlap_mm": 2.0}))
    spec, rules = load_spec(p)
    assert len(spec.injections) == 1 and len(rules) == 3
    full = spec.to_dict()
    full["rules"] = [{"subject": 1, "object": 2, "relation": "exclusion"}]
    p.write_text(json.dumps(full))
    spec2, rules2 = load_spec(p)
    assert np.array_equal(generate(spec2).labels, generate(spec).labels)
    assert rules2.rules == ((1, 2, 0),)
    p.write_text(json.dumps({"preset": "liver"}))
    with pytest.raises(ValueError):
        load_spec(p)


def test_rasterised_sphere_volume():
    spec = PhantomSpec((24, 24, 24), primitives=(Primitive(1, (12, 12, 12), 10.0),))
    n = int((generate(spec).labels == 1).sum())
    assert n == pytest.approx(4 * np.pi * 1000 / 3, rel=0.03)


def test_nested_spheres_are_compliant():
    spec = PhantomSpec((30, 30, 30), primitives=(Primitive(3, (15, 15, 15), 12.0, inner_radii=9.0),
                                                 Primitive(1, (15, 15, 15), 8.0)))
    assert not violation_map(generate(spec), (1, 3, 1)).any()


def test_overlap_between_two_spheres():
    spec = PhantomSpec((50, 30, 30), primitives=(Primitive(1, (15, 15, 15), 10.0), Primitive(2, (35, 15, 15), 10.0)))
    touching = int(violation_map(generate(spec), (1, 2, 0)).sum())  # the spheres meet face to face
    hurt = spec.with_injections(Injection("overlap", 3.0, 1, 2))
    assert violation_map(generate(hurt), (1, 2, 0)).sum() > touching


def test_overlap_count_is_monotone_on_half_millimetre_steps():
    counts = [int(violation_map(generate(cardiac_preset(overlap_mm=m)[0]), (1, 2, 0)).sum())
              for m in np.arange(0.0, 5.01, 0.5)]
    assert all(b >= a for a, b in zip(counts, counts[1:]))
