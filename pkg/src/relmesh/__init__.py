"""Relation-aware mesh fitting: occupancy losses that respect inclusion and
exclusion rules between labelled structures."""

from .core import (BACKGROUND, EXCLUSION, INCLUSION, CriticalPointSet, LabelGrid, QueryBatch, Rule,
                   RuleSet, TriMesh, validate_mesh, voxel_to_world, world_to_voxel)
from .deform import ARMS, OptimConfig, OptimizationError, ablation_run, init_templates, optimize, run_arm
from .losses import LossWeights, bce, chamfer, mie_loss, occ_loss, smoothness, total_loss
from .metrics import MetricReport, dsc, evaluate, hausdorff, lse, svr, vr
from .occupancy import OccupancyConfig, occupancy_gradient, occupancy_score
from .relations import assemble_rule_pools, critical_points, neighborhood_overlap, violation_map
from .sampling import SamplingConfig, split_and_score
from .synth import PhantomSpec, cardiac_preset, generate, icosphere

__version__ = "0.1.0"
