"""Deterministic parameter initializers."""

import numpy as np


def trunc_normal(rng: np.random.Generator, shape, std=0.02, bound=2.0, dtype=np.float64):
    """Normal(0, std²) samples redrawn until they fall inside ±bound·std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out.astype(dtype)
