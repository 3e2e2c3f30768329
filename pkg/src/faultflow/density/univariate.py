"""Per-element marginal density estimators.

Flows give no tractable marginals, so each element also gets its own
one-dimensional estimator: a Gaussian KDE for continuous columns and a
Laplace-smoothed frequency table for discrete ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from faultflow.density.fit import split_indices
from faultflow.density.model import MeanLogLikelihood, summarize_log_probs
from faultflow.density.preprocess import DEGENERATE_VARIANCE, JITTER_WIDTH
from faultflow.errors import SchemaError
from faultflow.graph import BehavioralDataset, CodeElementRef

LAPLACE_ALPHA = 1.0
_CHUNK = 2048


def silverman_bandwidth(values: np.ndarray) -> float:
    """Silverman's rule of thumb, ``0.9 * min(sd, IQR / 1.349) * n^(-1/5)``."""
    x = np.asarray(values, dtype=np.float64)
    sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    iqr = (q75 - q25) / 1.349
    spread = min(sd, iqr) if iqr > 0 else sd
    return 0.9 * spread * x.size ** (-0.2)


@dataclass
class UnivariateModel:
    element: CodeElementRef
    estimator: str
    points: np.ndarray | None = None
    bandwidth: float | None = None
    probabilities: np.ndarray | None = None
    self_ll: float = float("nan")
    degenerate: bool = False
    n_train: int = 0

    def log_pdf(self, values) -> np.ndarray:
        x = np.atleast_1d(np.asarray(values, dtype=np.float64))
        if self.estimator == "histogram_discrete":
            out = np.full(x.shape, -np.inf)
            codes = np.floor(x)
            ok = np.isfinite(x) & (codes == x) & (codes >= 0) & (codes < len(self.probabilities))
            out[ok] = np.log(self.probabilities[codes[ok].astype(int)])
            out[~np.isfinite(x)] = np.nan
            return out
        h = self.bandwidth
        norm = math.log(self.points.size) + math.log(h) + 0.5 * math.log(2 * math.pi)
        out = np.empty(x.shape)
        for start in range(0, x.size, _CHUNK):
            chunk = x[start : start + _CHUNK]
            with np.errstate(invalid="ignore"):
                u = (chunk[:, None] - self.points[None, :]) / h
                out[start : start + _CHUNK] = logsumexp(-0.5 * u * u, axis=1) - norm
        return out

    def mean_log_likelihood(self, values) -> MeanLogLikelihood:
        return summarize_log_probs(self.log_pdf(values), self.element.label)

    def to_json(self) -> dict:
        doc = {
            "element": self.element.to_json(),
            "estimator": self.estimator,
            "self_ll": self.self_ll,
            "degenerate": self.degenerate,
            "n_train": self.n_train,
        }
        if self.estimator == "gaussian_kde":
            doc["bandwidth"] = self.bandwidth
            doc["points"] = self.points.tolist()
        else:
            doc["probabilities"] = self.probabilities.tolist()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> UnivariateModel:
        kde = doc["estimator"] == "gaussian_kde"
        return cls(
            element=CodeElementRef.from_json(doc["element"]),
            estimator=doc["estimator"],
            points=np.asarray(doc["points"], dtype=np.float64) if kde else None,
            bandwidth=float(doc["bandwidth"]) if kde else None,
            probabilities=None if kde else np.asarray(doc["probabilities"], dtype=np.float64),
            self_ll=float(doc["self_ll"]),
            degenerate=bool(doc["degenerate"]),
            n_train=int(doc["n_train"]),
        )


def fit_values(element: CodeElementRef, train: np.ndarray) -> UnivariateModel:
    train = np.asarray(train, dtype=np.float64)
    if element.is_discrete:
        k = int(element.cardinality)
        counts = np.bincount(train.astype(int), minlength=k)[:k].astype(np.float64)
        probs = (counts + LAPLACE_ALPHA) / (train.size + LAPLACE_ALPHA * k)
        return UnivariateModel(element, "histogram_discrete", probabilities=probs,
                               degenerate=bool(np.count_nonzero(counts) <= 1), n_train=train.size)
    degenerate = bool(np.var(train) < DEGENERATE_VARIANCE)
    h = JITTER_WIDTH if degenerate else silverman_bandwidth(train)
    return UnivariateModel(element, "gaussian_kde", points=train.copy(), bandwidth=max(h, JITTER_WIDTH),
                           degenerate=degenerate, n_train=train.size)


def fit_univariate(
    dataset: BehavioralDataset,
    element: CodeElementRef | str,
    validation_fraction: float = 0.2,
    seed: int = 0,
) -> UnivariateModel:
    """Fit a marginal on the training split; ``self_ll`` comes from the held-out split."""
    element_id = element if isinstance(element, str) else element.element_id
    if element_id not in dataset.element_ids:
        raise SchemaError(f"{dataset.executable_id} has no column {element_id!r}")
    col = dataset.columns[dataset.column_index(element_id)]
    values = dataset.column(element_id)
    train_idx, val_idx = split_indices(dataset.n, validation_fraction, seed)
    model = fit_values(col, values[train_idx])
    model.self_ll = model.mean_log_likelihood(values[val_idx]).value
    return model
