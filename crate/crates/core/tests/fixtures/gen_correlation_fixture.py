"""Regenerates correlation_reference.json with scipy as the reference implementation."""
import json

import numpy as np
from scipy import stats

rng = np.random.default_rng(20240611)
cases = []
for i in range(100):
    n = int(rng.integers(5, 60))
    x = rng.normal(size=n)
    y = 0.6 * x + rng.normal(size=n)
    if i % 3 == 0:
        # coarse rounding introduces ties
        x = np.round(x, 0)
        y = np.round(y * 2, 0) / 2
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        continue
    cases.append(
        {
            "x": x.tolist(),
            "y": y.tolist(),
            "srcc": float(stats.spearmanr(x, y).statistic),
            "plcc": float(stats.pearsonr(x, y).statistic),
        }
    )

with open("correlation_reference.json", "w") as f:
    json.dump(cases, f, indent=1)
print(len(cases))
