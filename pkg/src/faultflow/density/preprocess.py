from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGENERATE_VARIANCE = 1e-12
JITTER_WIDTH = 1e-6


@dataclass
class Standardizer:
    """Per-column affine map to roughly unit scale, with dequantization.

    Discrete columns are dequantized by adding U[0, 1) to the integer code
    while training; evaluation uses the cell center (code + 0.5) so that
    ``log_prob`` stays a deterministic function of the row. Near-constant
    columns get jitter of width ``JITTER_WIDTH`` in the same way.
    """

    mean: np.ndarray
    scale: np.ndarray
    discrete: np.ndarray
    degenerate: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray, discrete: np.ndarray) -> Standardizer:
        rows = np.asarray(rows, dtype=np.float64)
        discrete = np.asarray(discrete, dtype=bool)
        raw_var = rows.var(axis=0)
        degenerate = raw_var < DEGENERATE_VARIANCE
        width = np.where(discrete, 1.0, np.where(degenerate, JITTER_WIDTH, 0.0))
        # Moments of value + U[0, width) offset.
        mean = rows.mean(axis=0) + 0.5 * width
        var = raw_var + width**2 / 12.0
        return cls(mean=mean, scale=np.sqrt(var), discrete=discrete, degenerate=degenerate)

    @property
    def width(self) -> np.ndarray:
        return np.where(self.discrete, 1.0, np.where(self.degenerate, JITTER_WIDTH, 0.0))

    @property
    def log_det(self) -> float:
        return float(-np.sum(np.log(self.scale)))

    def transform(self, rows: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        width = self.width
        if rng is None:
            offset = 0.5 * width
        else:
            offset = rng.random(rows.shape) * width
        return (rows + offset - self.mean) / self.scale

    def inverse(self, u: np.ndarray) -> np.ndarray:
        x = u * self.scale + self.mean
        if self.discrete.any():
            x[:, self.discrete] = np.floor(x[:, self.discrete])
        return x

    def to_json(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "discrete": self.discrete.tolist(),
            "degenerate": self.degenerate.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> Standardizer:
        return cls(
            mean=np.asarray(doc["mean"], dtype=np.float64),
            scale=np.asarray(doc["scale"], dtype=np.float64),
            discrete=np.asarray(doc["discrete"], dtype=bool),
            degenerate=np.asarray(doc["degenerate"], dtype=bool),
        )

    @classmethod
    def identity(cls, d: int) -> Standardizer:
        return cls(np.zeros(d), np.ones(d), np.zeros(d, dtype=bool), np.zeros(d, dtype=bool))
