"""Synthetic datasets for desk-scale training and evaluation.

The ring dataset (eight Gaussian modes on the unit circle, class labels =
mode index) is the standard testbed for conditional flow training; the 1-D
two-point dataset is the smallest case where distillation quality can be
measured against exact endpoints.
"""

import numpy as np

from .errors import DomainError

N_MODES = 8
MODE_SIGMA = 0.1
RING_RADIUS = 1.0


def ring_centers(n_modes: int = N_MODES, radius: float = RING_RADIUS) -> np.ndarray:
    """Mode centers equally spaced on a circle, shape (n_modes, 2)."""
    if n_modes < 1 or radius <= 0:
        raise DomainError("need n_modes >= 1 and radius > 0")
    ang = 2.0 * np.pi * np.arange(n_modes) / n_modes
    return np.stack([np.cos(ang), np.sin(ang)], axis=1) * radius


def sample_ring(
    rng: np.random.Generator,
    n: int,
    n_modes: int = N_MODES,
    sigma: float = MODE_SIGMA,
    radius: float = RING_RADIUS,
):
    """Draw n points from the Gaussian ring mixture.

    Returns (x0, labels) where labels are the mode indices, usable directly
    as condition ids.  Draw order (labels, then offsets) is part of the
    seeded contract.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    labels = rng.integers(0, n_modes, n)
    x0 = ring_centers(n_modes, radius)[labels] + sigma * rng.standard_normal((n, 2))
    return x0, labels


def sample_two_point(rng: np.random.Generator, n: int):
    """1-D dataset of exactly two points at -1 and +1, labels 0 and 1."""
    if n < 1:
        raise DomainError("n must be >= 1")
    labels = rng.integers(0, 2, n)
    x0 = np.where(labels[:, None] == 0, -1.0, 1.0).astype(np.float64)
    return x0, labels
