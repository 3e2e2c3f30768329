from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from faultflow.density.flow import AffineWhitening, CouplingFlow, standard_normal_log_prob
from faultflow.density.preprocess import Standardizer
from faultflow.errors import DataError, DomainError, SchemaError

MODEL_FORMAT = "faultflow.model/1"
MAX_EXCLUDED_FRACTION = 0.01


class ModelKind(str, enum.Enum):
    NVP_FLOW = "nvp_flow"
    GAUSSIAN_BASELINE = "gaussian_baseline"


@dataclass
class FitConfig:
    coupling_layers: int = 4
    hidden_units: int = 32
    epochs: int = 400
    learning_rate: float = 1e-3
    batch_size: int = 256
    validation_fraction: float = 0.2
    seed: int = 0
    early_stop_patience: int = 10
    scale_clamp: float = 5.0
    # Gaussian noise (standardized units) added to training batches only.
    noise_std: float = 0.02

    def __post_init__(self) -> None:
        for name in ("coupling_layers", "hidden_units", "epochs", "batch_size", "early_stop_patience"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.noise_std < 0 or self.scale_clamp <= 0:
            raise ValueError("noise_std must be >= 0 and scale_clamp > 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> FitConfig:
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in doc.items() if k in known})


@dataclass
class MeanLogLikelihood:
    value: float
    n_used: int
    n_excluded: int


@dataclass
class DensityModel:
    """A fitted joint density over one executable's element columns.

    ``transform`` is either a :class:`CouplingFlow` or, for the Gaussian
    baseline, an :class:`AffineWhitening`; both map standardized rows to the
    standard-normal latent space.
    """

    executable_id: str
    kind: ModelKind
    columns: tuple[str, ...]
    standardizer: Standardizer
    transform: CouplingFlow | AffineWhitening
    self_ll: float = float("nan")
    config: FitConfig = field(default_factory=FitConfig)
    history: list[float] = field(default_factory=list)
    group: str | None = None

    @property
    def dimension(self) -> int:
        return len(self.columns)

    def _check_rows(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None, :]
        if rows.ndim != 2 or rows.shape[1] != self.dimension:
            raise SchemaError(f"{self.executable_id}: expected rows of dimension {self.dimension}, got {rows.shape}")
        return rows

    def latent(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Latent points and the full log|det| (including standardization)."""
        rows = self._check_rows(rows)
        with np.errstate(over="ignore", invalid="ignore"):
            z, logdet = self.transform.forward(self.standardizer.transform(rows))
        return z, logdet + self.standardizer.log_det

    def log_prob_batch(self, rows: np.ndarray) -> np.ndarray:
        """Natural-log densities of each row; non-finite inputs give NaN."""
        z, logdet = self.latent(rows)
        with np.errstate(over="ignore", invalid="ignore"):
            return standard_normal_log_prob(z) + logdet

    def log_prob(self, row) -> float:
        row = np.asarray(row, dtype=np.float64)
        if not np.all(np.isfinite(row)):
            raise DomainError(f"{self.executable_id}: log_prob needs finite input, got {row}")
        return float(self.log_prob_batch(row.reshape(1, -1))[0])

    def log_det_jacobian(self, row) -> float:
        row = np.asarray(row, dtype=np.float64)
        if not np.all(np.isfinite(row)):
            raise DomainError(f"{self.executable_id}: log_det_jacobian needs finite input, got {row}")
        return float(self.latent(row.reshape(1, -1))[1][0])

    def sample(self, count: int, seed: int) -> np.ndarray:
        if count < 1:
            raise ValueError(f"sample count must be >= 1, got {count}")
        z = np.random.default_rng(seed).standard_normal((count, self.dimension))
        return self.standardizer.inverse(self.transform.inverse(z))

    def mean_log_likelihood(self, rows: np.ndarray) -> MeanLogLikelihood:
        """Average log-density over rows, excluding non-finite ones.

        Raises :class:`DataError` when more than 1% of rows are excluded.
        """
        lp = self.log_prob_batch(rows)
        return summarize_log_probs(lp, self.executable_id)

    # -- persistence -----------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "executable_id": self.executable_id,
            "group": self.group,
            "kind": self.kind.value,
            "dimension": self.dimension,
            "columns": list(self.columns),
            "preprocessing": self.standardizer.to_json(),
            "transform": self.transform.to_json(),
            "base_distribution": {"type": "standard_normal", "dimension": self.dimension},
            "self_ll": self.self_ll,
            "config": self.config.to_json(),
            "history": list(self.history),
        }

    @classmethod
    def from_json(cls, doc: dict) -> DensityModel:
        if doc.get("format") != MODEL_FORMAT:
            raise SchemaError(f"unsupported model format {doc.get('format')!r}, expected {MODEL_FORMAT}")
        kind = ModelKind(doc["kind"])
        d = int(doc["dimension"])
        if kind is ModelKind.NVP_FLOW:
            transform: CouplingFlow | AffineWhitening = CouplingFlow.from_json(doc["transform"], d)
        else:
            transform = AffineWhitening.from_json(doc["transform"], d)
        return cls(
            executable_id=doc["executable_id"],
            kind=kind,
            columns=tuple(doc["columns"]),
            standardizer=Standardizer.from_json(doc["preprocessing"]),
            transform=transform,
            self_ll=float(doc["self_ll"]),
            config=FitConfig.from_json(doc["config"]),
            history=[float(v) for v in doc.get("history", [])],
            group=doc.get("group"),
        )


def summarize_log_probs(lp: np.ndarray, label: str) -> MeanLogLikelihood:
    lp = np.asarray(lp, dtype=np.float64)
    if lp.size == 0:
        raise DataError(f"{label}: no rows to evaluate")
    ok = np.isfinite(lp)
    excluded = int(lp.size - ok.sum())
    if excluded > MAX_EXCLUDED_FRACTION * lp.size:
        raise DataError(
            f"{label}: {excluded} of {lp.size} rows have non-finite log-likelihood; trace is incompatible"
        )
    return MeanLogLikelihood(float(np.mean(lp[ok])), int(ok.sum()), excluded)


def identity_model(d: int, executable_id: str = "identity", standardizer: Standardizer | None = None,
                   config: FitConfig | None = None) -> DensityModel:
    """An untrained, zero-initialized flow; its density is the base Gaussian."""
    config = config or FitConfig()
    flow = CouplingFlow(d, config.hidden_units, config.coupling_layers, config.scale_clamp)
    return DensityModel(
        executable_id=executable_id,
        kind=ModelKind.NVP_FLOW,
        columns=tuple(f"x{i}" for i in range(d)),
        standardizer=standardizer or Standardizer.identity(d),
        transform=flow,
        config=config,
    )

