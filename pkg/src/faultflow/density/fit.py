from __future__ import annotations

import logging

import numpy as np

from faultflow.density.flow import AffineWhitening, CouplingFlow
from faultflow.density.model import DensityModel, FitConfig, ModelKind
from faultflow.density.preprocess import Standardizer
from faultflow.errors import DomainError, InsufficientDataError, TrainingError
from faultflow.graph import BehavioralDataset

logger = logging.getLogger(__name__)


def split_indices(n: int, validation_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (train, validation) row split."""
    perm = np.random.default_rng([seed, 0x5E1F]).permutation(n)
    n_val = min(max(1, int(round(n * validation_fraction))), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def min_rows(d: int) -> int:
    return max(10, 2 * d)


class Adam:
    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        theta -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _prepare(dataset: BehavioralDataset, config: FitConfig):
    if not np.all(np.isfinite(dataset.rows)):
        raise DomainError(f"{dataset.executable_id}: training data contains non-finite values")
    required = min_rows(dataset.d)
    if dataset.n < required:
        raise InsufficientDataError(dataset.executable_id, dataset.n, required)
    train_idx, val_idx = split_indices(dataset.n, config.validation_fraction, config.seed)
    train, val = dataset.rows[train_idx], dataset.rows[val_idx]
    discrete = np.array([c.is_discrete for c in dataset.columns])
    return train, val, Standardizer.fit(train, discrete)


def fit(
    dataset: BehavioralDataset,
    config: FitConfig | None = None,
    kind: ModelKind | str = ModelKind.NVP_FLOW,
    group: str | None = None,
) -> DensityModel:
    """Fit a density model to one executable's behavioral dataset.

    The flow is trained by minibatch maximum likelihood with early stopping
    on the held-out split; the parameters with the best validation mean
    log-likelihood are kept and that value is stored as ``self_ll``.
    """
    config = config or FitConfig()
    kind = ModelKind(kind)
    train, val, standardizer = _prepare(dataset, config)
    columns = dataset.element_ids

    if kind is ModelKind.GAUSSIAN_BASELINE:
        u = standardizer.transform(train, rng=np.random.default_rng([config.seed, 1]))
        model = DensityModel(dataset.executable_id, kind, columns, standardizer,
                             AffineWhitening.fit(u), config=config, group=group)
        model.self_ll = model.mean_log_likelihood(val).value
        return model

    rng = np.random.default_rng([config.seed, 2])
    flow = CouplingFlow(dataset.d, config.hidden_units, config.coupling_layers, config.scale_clamp)
    flow.init_random(rng)
    model = DensityModel(dataset.executable_id, kind, columns, standardizer, flow, config=config, group=group)

    def val_ll() -> float:
        with np.errstate(all="ignore"):
            lp = model.log_prob_batch(val)
        return float(np.mean(lp)) if np.all(np.isfinite(lp)) else -np.inf

    opt = Adam(flow.size, config.learning_rate)
    best = val_ll()
    history = [best]
    best_theta = flow.theta.copy()
    stale = 0
    n_train = train.shape[0]
    batch = min(config.batch_size, n_train)

    for epoch in range(config.epochs):
        perm = rng.permutation(n_train)
        for start in range(0, n_train, batch):
            idx = perm[start : start + batch]
            u = standardizer.transform(train[idx], rng=rng)
            if config.noise_std:
                u = u + config.noise_std * rng.standard_normal(u.shape)
            loss, grad = flow.nll_and_grad(u)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingError(
                    f"{dataset.executable_id}: non-finite loss at epoch {epoch}; "
                    f"try a lower learning rate than {config.learning_rate}"
                )
            opt.step(flow.theta, grad)
        current = val_ll()
        history.append(current)
        if current > best:
            best, best_theta, stale = current, flow.theta.copy(), 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break

    flow.theta[:] = best_theta
    model.history = history
    model.self_ll = model.mean_log_likelihood(val).value
    logger.debug("%s%s: %d epochs, self_ll %.4f", dataset.executable_id,
                 f"[{group}]" if group else "", len(history) - 1, model.self_ll)
    return model


def validation_split(dataset: BehavioralDataset, config: FitConfig) -> BehavioralDataset:
    """The held-out rows ``fit`` used for ``self_ll``."""
    _, val_idx = split_indices(dataset.n, config.validation_fraction, config.seed)
    return dataset.take(val_idx)
