"""Gaussian mechanism baseline for the benchmark comparisons.

Calibration uses the classic sqrt(2 ln(1.25/delta))/eps bound, which is
slightly conservative (noisier) compared to tighter analytic calibrations;
that only flatters the projection-based mechanisms it is compared against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import generator


@dataclass(frozen=True)
class GaussianMechanismConfig:
    eps: float
    delta: float = 1e-5
    sensitivity: float = 1.0

    def __post_init__(self):
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must be in (0, 1)")
        if self.sensitivity <= 0.0:
            raise ValueError("sensitivity must be positive")

    @property
    def noise_sigma(self) -> float:
        return self.sensitivity * math.sqrt(2.0 * math.log(1.25 / self.delta)) / self.eps


def gaussian_randomize(v: np.ndarray, config: GaussianMechanismConfig,
                       seed: int | bytes) -> np.ndarray:
    """v + N(0, noise_sigma^2 I) for ||v|| <= sensitivity; unbiased."""
    v = np.asarray(v, dtype=np.float64)
    if np.linalg.norm(v) > config.sensitivity + 1e-6:
        raise ValueError(f"input norm {np.linalg.norm(v)} exceeds the sensitivity bound")
    g = generator(seed, "gauss-mech")
    return v + config.noise_sigma * g.standard_normal(v.shape[0])
