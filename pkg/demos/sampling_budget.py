"""
Spending a fixed query budget
=============================

Every loss evaluation draws n points per side.  A ratio rho reserves part of
that budget for critical points so interface regions are never missed.
"""

import numpy as np

from relmesh.sampling import SamplingConfig, draw

rng = np.random.default_rng(0)
regular = rng.normal(size=(5000, 3))
critical = rng.normal(size=(300, 3)) * 0.1
pool = np.concatenate([regular, critical])
flags = np.arange(len(pool)) >= len(regular)

for rho in (0.0, 0.05, 0.1, 0.2, 0.4):
    r_plus, r_minus, m, short = draw(pool, flags, pool, flags, SamplingConfig(n=2000, rho=rho), rng)
    hit = np.isin(r_plus[:, 0], critical[:, 0]).sum()
    print(f"rho {rho:4.2f}: reserved {m:4d}, critical drawn {hit:4d}, per side {len(r_plus)}")

# with rho = 0 nothing is reserved and critical points only turn up at their
# share of the pool (about 300 / 5300 of the draws)
