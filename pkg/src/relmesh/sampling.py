"""Budgeted mixed sampling of regular and violation-critical points."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import TriMesh
from .occupancy import DEFAULT, OccupancyConfig, occupancy, score_from_occupancy


@dataclass(frozen=True)
class SamplingConfig:
    n: int = 2000
    rho: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("sample budget n must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for one ``(iteration, class, rule, ...)`` tuple.

    Streams depend only on the master seed and the key, never on the order in
    which they are requested.
    """
    spawn_key = tuple(int(k) + 1 for k in key)  # keys may be -1 for "none"
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=spawn_key)))


def split(points: np.ndarray, is_critical: np.ndarray):
    """Stable partition into ``(critical, regular)`` subsets."""
    flags = np.asarray(is_critical, dtype=bool)
    return points[flags], points[~flags]


def pick_random(pool: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` items drawn uniformly without replacement."""
    if k > len(pool):
        raise ValueError(f"cannot draw {k} items from a pool of {len(pool)}")
    if k == 0:
        return pool[:0]
    return pool[rng.choice(len(pool), size=k, replace=False)]


@dataclass(frozen=True, eq=False)
class ScoredSample:
    """Output of :func:`split_and_score`."""

    points_plus: np.ndarray
    points_minus: np.ndarray
    occ_plus: np.ndarray
    occ_minus: np.ndarray
    o_plus: np.ndarray
    o_minus: np.ndarray
    n_critical: int
    shortfall: int

    def points(self) -> np.ndarray:
        return np.concatenate([self.points_plus, self.points_minus])

    def scores(self) -> np.ndarray:
        return np.concatenate([self.o_plus, self.o_minus])

    def targets(self) -> np.ndarray:
        return np.concatenate([np.ones(len(self.o_plus)), np.zeros(len(self.o_minus))])


def draw(p_plus, crit_plus, p_minus, crit_minus, cfg: SamplingConfig, rng: np.random.Generator):
    """Sampling half of :func:`split_and_score`, without the scoring.

    Returns ``(r_plus, r_minus, m, shortfall)`` where ``m`` is the number of
    critical points taken from each side and ``shortfall`` counts requested
    draws that the pools could not supply.
    """
    if not len(p_plus) or not len(p_minus):
        raise ValueError("positive and negative pools must both be non-empty")
    n = cfg.n
    shortfall = 0
    if cfg.rho == 0:
        kp, km = min(n, len(p_plus)), min(n, len(p_minus))
        shortfall = 2 * n - kp - km
        return pick_random(p_plus, kp, rng), pick_random(p_minus, km, rng), 0, shortfall
    vio_p, reg_p = split(p_plus, crit_plus)
    vio_m, reg_m = split(p_minus, crit_minus)
    m = min(len(vio_p), len(vio_m), int(np.floor(cfg.rho * n)))
    sides = []
    for vio, reg in ((vio_p, reg_p), (vio_m, reg_m)):
        k = min(n - m, len(reg))
        shortfall += n - m - k
        sides.append(np.concatenate([pick_random(vio, m, rng), pick_random(reg, k, rng)]))
    return sides[0], sides[1], m, shortfall


def split_and_score(mesh: TriMesh, p_plus, p_minus, cfg: SamplingConfig,
                    occ_cfg: OccupancyConfig = DEFAULT, rng: np.random.Generator | None = None,
                    crit_plus=None, crit_minus=None) -> ScoredSample:
    """Draw ``n`` points per side and score them against ``mesh``.

    With ``rho == 0`` both sides are drawn uniformly from the full pools.
    Otherwise ``m = min(|critical+|, |critical-|, floor(rho * n))`` critical
    points and ``n - m`` regular points are drawn per side.  Short regular
    pools are clamped and reported through ``shortfall``.
    """
    p_plus = np.asarray(p_plus, dtype=np.float64).reshape(-1, 3)
    p_minus = np.asarray(p_minus, dtype=np.float64).reshape(-1, 3)
    crit_plus = np.zeros(len(p_plus), bool) if crit_plus is None else np.asarray(crit_plus, bool)
    crit_minus = np.zeros(len(p_minus), bool) if crit_minus is None else np.asarray(crit_minus, bool)
    if rng is None:
        rng = rng_stream(cfg.seed)
    r_plus, r_minus, m, shortfall = draw(p_plus, crit_plus, p_minus, crit_minus, cfg, rng)
    occ = occupancy(mesh, np.concatenate([r_plus, r_minus]), occ_cfg)
    occ_plus, occ_minus = occ[:len(r_plus)], occ[len(r_plus):]
    return ScoredSample(r_plus, r_minus, occ_plus, occ_minus,
                        score_from_occupancy(occ_plus, occ_cfg), score_from_occupancy(occ_minus, occ_cfg),
                        m, shortfall)
