"""Walk through interest clusters and the unexpectedness of candidate items.

    python demos/01_interest_clusters.py
"""

import numpy as np

from purs.unexpectedness import (MeanShiftConfig, kurtosis, mean_shift, single_closure, unexp_activation,
                                 unexpectedness)

rng = np.random.default_rng(0)

# A user whose past consumptions fall into two tastes, one twice as large.
comedy = rng.normal(size=(30, 2)) * 0.6 + [0.0, 0.0]
horror = rng.normal(size=(15, 2)) * 0.6 + [6.0, 1.0]
history = np.concatenate([comedy, horror])

# Mean shift moves every point uphill on a Gaussian kernel density; points
# landing on the same mode form one interest cluster.
clusters = mean_shift(history, MeanShiftConfig(bandwidth_c=0.5))
for c in clusters:
    print(f"cluster of {c.size:2d} items around {np.round(c.centroid, 2)}")

# The default bandwidth comes from the median pairwise distance.  It is wide
# when the tastes are close relative to their spread and can then merge them.
print("median-heuristic clusters:", len(mean_shift(history)))

# Unexpectedness is the size-weighted mean distance to the centroids.
candidates = {
    "another comedy": np.array([0.2, -0.1]),
    "between tastes": np.array([3.0, 0.5]),
    "far away": np.array([-8.0, 9.0]),
}
for name, w in candidates.items():
    u = unexpectedness(w, clusters)
    u_single = unexpectedness(w, single_closure(history))
    print(f"{name:15s} unexp {u:5.2f}  (single closure {u_single:5.2f})  f(unexp) {unexp_activation(u):.3f}")

# f(x) = x exp(-x) rewards moderate surprise only: zero at x = 0, peak 1/e at
# x = 1, then a fast decay, so very distant items earn almost nothing.
xs = np.array([0.0, 0.5, 1.0, 2.0, 5.0, 10.0])
print("f on", xs, "->", np.round(unexp_activation(xs), 4))

# Read as a density, x exp(-x) is Gamma(2); its (non-excess) kurtosis is 6.
print("kurtosis of Gamma(2) samples:", round(kurtosis(rng.gamma(2.0, size=1_000_000)), 2))
