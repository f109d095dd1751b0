"""
The rho diagnostic
==================

rho = r2 / r3 divides the second singular value of the estimate before
rank-2 enforcement by the third, which the projection discards.  Large rho
means the projection is a small correction.  Windowed means for Hartley
and the per-sample optimizer follow.
"""

import numpy as np

from epinorm import synth
from epinorm.cli import diagnose_rows
from epinorm.diagnostics import rho_series
from epinorm.search import SearchConfig

data = synth.make_samples(synth.SceneConfig(), 300, seed=10)
rows = np.array(diagnose_rows(data, search=SearchConfig(max_iters=100)))

print("kappa raw / hartley / optimized (means):", np.nanmean(rows[:, :3], axis=0).round(1))
for k, (h, x) in enumerate(zip(rho_series(rows[:, 3], 100), rho_series(rows[:, 4], 100))):
    print(f"window {k}: rho hartley {h:9.1f}  optimized {x:9.1f}")
