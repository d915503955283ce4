"""Voxel-level rule violations and the per-rule sample pools built from them.

Binary grids are plain boolean arrays shaped like ``LabelGrid.labels``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import (BACKGROUND, CriticalPointSet, LabelGrid, QueryBatch, Rule, RuleSet,
                   TriMesh, voxel_to_world)
from .occupancy import DEFAULT, OccupancyConfig, occupancy

# 6-connected cross including the center voxel
KERNEL = ndimage.generate_binary_structure(3, 1)
LABEL_FILTERS = ("object", "subject", "rule")


def neighborhood_overlap(grid: LabelGrid, label: int) -> np.ndarray:
    """Voxels that hold ``label`` or touch it through a face.

    Voxels outside the grid count as background.
    """
    return ndimage.binary_dilation(grid.labels == label, structure=KERNEL, border_value=0)


def exterior_contact(grid: LabelGrid, label: int, support: np.ndarray | None = None) -> np.ndarray:
    """Voxels face-adjacent to the open background outside ``label``.

    The open background is the set of background voxels outside the
    neighborhood overlap of ``label`` that connect (6-connectivity) to the
    space beyond the grid.  Background sealed inside the structure, such as
    the cavity of a shell, is not part of it.
    """
    if support is None:
        support = neighborhood_overlap(grid, label)
    free = (grid.labels == BACKGROUND) & ~support
    free = np.pad(free, 1, constant_values=True)
    comp, _ = ndimage.label(free, structure=KERNEL)
    outside = comp == comp[0, 0, 0]
    touching = ndimage.binary_dilation(outside, structure=KERNEL)
    return touching[1:-1, 1:-1, 1:-1]


def violation_map(grid: LabelGrid, rule, enclosed_exterior: bool = True) -> np.ndarray:
    """Voxels of the rule's subject that break the rule.

    Exclusion: subject voxels overlapping or face-adjacent to the object.
    Inclusion: subject voxels outside the object's neighborhood overlap.  With
    ``enclosed_exterior`` (default) only those touching the open background
    outside the object count, so a subject filling the object's cavity is
    compliant; without it every subject voxel away from the object is flagged.
    """
    rule = Rule(*rule)
    subject = grid.labels == rule.subject
    support = neighborhood_overlap(grid, rule.object)
    if not rule.is_inclusion:
        return subject & support
    out = subject & ~support
    if enclosed_exterior:
        out &= exterior_contact(grid, rule.object, support)
    return out


def critical_points(grid: LabelGrid, rules: RuleSet, enclosed_exterior: bool = True) -> CriticalPointSet:
    """Lift every violating voxel of every rule to its world-space center.

    Points keep the index of the rule that produced them; a voxel violating
    two rules appears twice.  Within a rule the order is x-fastest.
    """
    pos, src, grid_lab, idx = [], [], [], []
    for r, rule in enumerate(rules):
        vmap = violation_map(grid, rule, enclosed_exterior)
        ijk = np.argwhere(vmap.transpose(2, 1, 0))[:, ::-1]
        if not len(ijk):
            continue
        pos.append(voxel_to_world(grid, ijk))
        src.append(np.full(len(ijk), rule.object))
        grid_lab.append(grid.labels[tuple(ijk.T)].astype(np.int64))
        idx.append(np.full(len(ijk), r))
    if not pos:
        return CriticalPointSet.empty()
    return CriticalPointSet(np.concatenate(pos), np.concatenate(src),
                            np.concatenate(idx), np.concatenate(grid_lab))


@dataclass(frozen=True, eq=False)
class RuleSamplePools:
    positives: np.ndarray
    positive_critical: np.ndarray
    negatives: np.ndarray
    negative_critical: np.ndarray
    rule_index: int | None = None
    routed: int = 0

    @classmethod
    def base(cls, query: QueryBatch, label: int, rule_index: int | None = None) -> "RuleSamplePools":
        own = query.labels == label
        return cls(query.points[own], query.is_critical[own],
                   query.points[~own], query.is_critical[~own], rule_index)


def select_critical(p_vio: CriticalPointSet, rule: Rule, rule_index: int, label_filter: str = "object") -> np.ndarray:
    """Boolean mask of the critical points a rule routes into its pools.

    ``object`` keeps points tagged with the rule's object label and falls back
    to points whose voxel carries the subject label when that is empty;
    ``subject`` uses the voxel label directly; ``rule`` keeps only the rule's
    own points.
    """
    if label_filter == "object":
        sel = p_vio.source_label == rule.object
        if not sel.any():
            sel = p_vio.grid_label == rule.subject
    elif label_filter == "subject":
        sel = p_vio.grid_label == rule.subject
    elif label_filter == "rule":
        sel = p_vio.rule_index == rule_index
    else:
        raise ValueError(f"label_filter must be one of {LABEL_FILTERS}")
    return sel


def assemble_rule_pools(query: QueryBatch, p_vio: CriticalPointSet, rule, mesh: TriMesh,
                        cfg: OccupancyConfig = DEFAULT, rule_index: int | None = None,
                        label_filter: str = "object") -> RuleSamplePools:
    """Positive/negative pools for the subject mesh of one rule.

    Exclusion: the selected critical points join the negatives.  Inclusion:
    they are split by the current occupancy of the subject mesh, inside ones
    joining the positives.  The split is a hard decision (no gradient).
    """
    rule = Rule(*rule)
    if mesh.structure_label != rule.subject:
        raise ValueError(f"mesh label {mesh.structure_label} does not match rule subject {rule.subject}")
    base = RuleSamplePools.base(query, rule.subject, rule_index)
    sel = select_critical(p_vio, rule, -1 if rule_index is None else rule_index, label_filter)
    sp = p_vio.positions[sel]
    if not len(sp):
        return base
    if rule.is_inclusion:
        inside = occupancy(mesh, sp, cfg) > cfg.threshold
        pos_add, neg_add = sp[inside], sp[~inside]
    else:
        pos_add, neg_add = sp[:0], sp
    return RuleSamplePools(
        np.concatenate([base.positives, pos_add]),
        np.concatenate([base.positive_critical, np.ones(len(pos_add), bool)]),
        np.concatenate([base.negatives, neg_add]),
        np.concatenate([base.negative_critical, np.ones(len(neg_add), bool)]),
        rule_index,
        len(sp),
    )
