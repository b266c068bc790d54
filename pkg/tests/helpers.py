import numpy as np

from robustq.data import Dataset


def toy_dataset(n=60, q=3, seed=0, signal=1.0):
    """Small two-stage dataset with a stage-1 and a stage-2 effect."""
    rng = np.random.default_rng(seed)
    x1 = rng.uniform(-1, 1, (n, q))
    a1 = rng.integers(0, 2, n).astype(float)
    x2 = x1 + rng.uniform(-1, 1, (n, q))
    a2 = rng.integers(0, 2, n).astype(float)
    y = signal * (x1[:, 0] * a1 + a2 * (0.5 + x2[:, 1])) + rng.normal(size=n)
    return Dataset.from_arrays(x1, a1, x2, a2, y)
