from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from urllib.parse import quote

import numpy as np

from faultflow.density.fit import fit, min_rows
from faultflow.density.model import DensityModel, FitConfig, ModelKind
from faultflow.density.univariate import UnivariateModel, fit_univariate
from faultflow.errors import SchemaError
from faultflow.graph import BehavioralDataset, Role

BUNDLE_FORMAT = "faultflow.bundle/1"
MANIFEST_FORMAT = "faultflow.store/1"


def derive_seed(seed: int, *labels: str) -> int:
    words = [int(seed)] + [zlib.crc32(label.encode("utf-8")) for label in labels]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def invocation_groups(dataset: BehavioralDataset) -> dict[str, tuple[str, ...]]:
    """Columns grouped by the callee they exchange values with.

    A group identical to the full column set is left out; the executable's
    own model already covers it.
    """
    groups: dict[str, list[str]] = {}
    for col in dataset.columns:
        if col.role in (Role.INVOCATION_ARG, Role.INVOCATION_RETURN):
            groups.setdefault(col.callee, []).append(col.element_id)
    return {
        callee: tuple(ids)
        for callee, ids in sorted(groups.items())
        if len(ids) < dataset.d
    }


@dataclass
class ModelBundle:
    """Everything fitted for one executable.

    ``full`` models all columns jointly; ``groups`` holds one joint model per
    callee over the invocation arguments and return sent to / received from
    it; ``univariate`` holds one marginal per element.
    """

    executable_id: str
    full: DensityModel
    groups: dict[str, DensityModel] = field(default_factory=dict)
    univariate: dict[str, UnivariateModel] = field(default_factory=dict)
    degenerate: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "executable_id": self.executable_id,
            "full": self.full.to_json(),
            "groups": {k: m.to_json() for k, m in self.groups.items()},
            "univariate": {k: m.to_json() for k, m in self.univariate.items()},
            "degenerate": list(self.degenerate),
        }

    @classmethod
    def from_json(cls, doc: dict) -> ModelBundle:
        if doc.get("format") != BUNDLE_FORMAT:
            raise SchemaError(f"unsupported bundle format {doc.get('format')!r}")
        return cls(
            executable_id=doc["executable_id"],
            full=DensityModel.from_json(doc["full"]),
            groups={k: DensityModel.from_json(v) for k, v in doc["groups"].items()},
            univariate={k: UnivariateModel.from_json(v) for k, v in doc["univariate"].items()},
            degenerate=list(doc.get("degenerate", [])),
        )


def fit_bundle(
    dataset: BehavioralDataset,
    config: FitConfig | None = None,
    kind: ModelKind | str = ModelKind.NVP_FLOW,
) -> ModelBundle:
    config = config or FitConfig()
    base = replace(config, seed=derive_seed(config.seed, dataset.executable_id))
    full = fit(dataset, base, kind)
    groups = {}
    for callee, ids in invocation_groups(dataset).items():
        sub = dataset.select(ids)
        if sub.n < min_rows(sub.d):
            continue
        cfg = replace(config, seed=derive_seed(config.seed, dataset.executable_id, callee))
        groups[callee] = fit(sub, cfg, kind, group=callee)
    univariate = {
        col.element_id: fit_univariate(dataset, col, base.validation_fraction, base.seed)
        for col in dataset.columns
    }
    degenerate = [
        eid for eid, flag in zip(dataset.element_ids, full.standardizer.degenerate) if flag
    ]
    return ModelBundle(dataset.executable_id, full, groups, univariate, degenerate)


def fit_all(
    datasets: dict[str, BehavioralDataset],
    config: FitConfig | None = None,
    kind: ModelKind | str = ModelKind.NVP_FLOW,
    jobs: int = 1,
) -> dict[str, ModelBundle]:
    """Fit every executable; with ``jobs > 1`` executables fit in worker processes.

    Each executable's seed is derived from its id, so results do not depend
    on ``jobs`` or scheduling order.
    """
    config = config or FitConfig()
    names = sorted(datasets)
    if jobs <= 1 or len(names) <= 1:
        return {x: fit_bundle(datasets[x], config, kind) for x in names}
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = {x: pool.submit(fit_bundle, datasets[x], config, kind) for x in names}
        return {x: futures[x].result() for x in names}


def bundle_filename(executable_id: str) -> str:
    return quote(executable_id, safe="") + ".json"


def save_store(directory: str | Path, bundles: dict[str, ModelBundle], graph_digest: str,
               config: FitConfig | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for x in sorted(bundles):
        name = bundle_filename(x)
        (directory / name).write_text(json.dumps(bundles[x].to_json()), encoding="utf-8")
        files[x] = name
    manifest = {
        "format": MANIFEST_FORMAT,
        "graph_hash": graph_digest,
        "bundle_format": BUNDLE_FORMAT,
        "executables": files,
        "config": (config or FitConfig()).to_json(),
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_store(directory: str | Path) -> tuple[dict[str, ModelBundle], dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise SchemaError(f"{directory}: no manifest.json; not a model store")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != MANIFEST_FORMAT:
        raise SchemaError(f"{manifest_path}: unsupported store format {manifest.get('format')!r}")
    bundles = {}
    for x, name in manifest["executables"].items():
        bundles[x] = ModelBundle.from_json(json.loads((directory / name).read_text(encoding="utf-8")))
    return bundles, manifest
