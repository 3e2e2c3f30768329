"""Likelihood-based fault localization.

For every executable the alt dataset's mean log-likelihood under the null
model is compared with the model's own held-out mean log-likelihood; a drop
below the critical value ``c`` (natural log) flags the executable or
element as behaving differently.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import numpy as np

from faultflow.density.bundle import BUNDLE_FORMAT, ModelBundle
from faultflow.density.model import MODEL_FORMAT, DensityModel, MeanLogLikelihood
from faultflow.density.univariate import UnivariateModel
from faultflow.errors import DataError, DomainError, SchemaError
from faultflow.graph import BehavioralDataset, CodeElementRef, ProgramGraph, Role

logger = logging.getLogger(__name__)

DEFAULT_CRITICAL_VALUE = math.log(0.001)
MIN_ALT_ROWS = 30
REPORT_FORMAT = "faultflow.report/1"
PLOT_FORMAT = "faultflow.plot/1"
PLOT_BINS = 50
CURVE_POINTS = 200

ROOT_CAUSE = "root_cause_candidate"
SYMPTOM = "symptom"
UNAFFECTED = "unaffected"


def to_natural_log(value: float, base: str | float = "e") -> float:
    if base in ("e", math.e):
        return float(value)
    return float(value) * math.log(float(base))


def _check_columns(model: DensityModel, dataset: BehavioralDataset) -> None:
    if tuple(model.columns) != dataset.element_ids:
        raise SchemaError(
            f"{dataset.executable_id}: alt columns {list(dataset.element_ids)} "
            f"do not match model columns {list(model.columns)}"
        )


def evaluate(model: DensityModel, dataset: BehavioralDataset) -> MeanLogLikelihood:
    _check_columns(model, dataset)
    if dataset.n < 1:
        raise DataError(f"{dataset.executable_id}: empty dataset")
    return model.mean_log_likelihood(dataset.rows)


def mean_log_likelihood(model: DensityModel, dataset: BehavioralDataset) -> float:
    """``(1/N) * sum_i log p(row_i)`` under ``model``, natural log."""
    return evaluate(model, dataset).value


def significance_test(ll_alt: float, ll_null: float, c: float) -> bool:
    for name, v in (("ll_alt", ll_alt), ("ll_null", ll_null), ("c", c)):
        if not math.isfinite(v):
            raise DomainError(f"{name} must be finite, got {v}")
    if not c < 0:
        raise DomainError(f"critical value must be negative, got {c}")
    return (ll_alt - ll_null) < c


@dataclass
class LikelihoodResult:
    executable_id: str
    element_id: str | None
    cardinality: str
    ll_alt: float
    ll_null: float
    delta: float
    critical_value: float
    significant: bool
    n_alt: int
    role: str | None = None
    group: str | None = None
    status: str = "ok"
    n_excluded: int = 0

    @property
    def sort_key(self) -> tuple:
        return (self.delta, self.executable_id, self.element_id or "", self.cardinality)

    @property
    def label(self) -> str:
        """Element column as printed in tables: method name for the full model."""
        if self.element_id is not None:
            return self.element_id
        return self.executable_id.rsplit(".", 1)[-1]

    @classmethod
    def build(cls, executable_id, element_id, cardinality, ll_alt, ll_null, c, n_alt, **extra) -> LikelihoodResult:
        significant = significance_test(ll_alt, ll_null, c)
        status = "ok" if n_alt >= MIN_ALT_ROWS else "insufficient_evidence"
        return cls(executable_id, element_id, cardinality, ll_alt, ll_null, ll_alt - ll_null, c,
                   significant, n_alt, status=status, **extra)

    def rethreshold(self, c: float) -> LikelihoodResult:
        out = LikelihoodResult(**asdict(self))
        out.critical_value = c
        out.significant = significance_test(self.ll_alt, self.ll_null, c)
        return out


@dataclass
class PropagationVerdict:
    executable_id: str
    classification: str
    evidence: list[tuple[str, str, bool]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


def _callee_of(graph: ProgramGraph | None, r: LikelihoodResult) -> str | None:
    if graph is not None and graph.has_element(r.executable_id, r.element_id):
        return graph.element(r.executable_id, r.element_id).callee
    return None


def propagate(results: Iterable[LikelihoodResult], graph: ProgramGraph) -> list[PropagationVerdict]:
    """Classify affected executables as root-cause candidates or symptoms.

    An input element (parameter, property read, invocation return) is
    explained when a significant output upstream of it exists: an
    invocation argument sent to this executable, a write to the same
    property, or the callee's return value. An affected executable whose
    significant inputs are all unexplained is a root-cause candidate.

    When only joint (multivariate) rows of an executable are significant,
    its input columns in those models are explained by any affected
    upstream executable instead. This is a heuristic; it says nothing about
    multiple interacting faults.
    """
    results = sorted(results, key=lambda r: r.sort_key)
    by_exec: dict[str, list[LikelihoodResult]] = {}
    for r in results:
        by_exec.setdefault(r.executable_id, []).append(r)

    uni = [r for r in results if r.cardinality == "univariate" and r.significant]
    args_to = {_callee_of(graph, r) for r in uni if r.role == Role.INVOCATION_ARG.value}
    writes = {r.element_id for r in uni if r.role == Role.PROPERTY_WRITE.value}
    returns_of = {r.executable_id for r in uni if r.role == Role.RETURN_VALUE.value}
    modeled = set(by_exec)
    affected = {r.executable_id for r in results if r.significant}

    writers: dict[str, set[str]] = {}
    for x in graph.executables:
        for el in graph.elements[x]:
            if el.role is Role.PROPERTY_WRITE:
                writers.setdefault(el.element_id, set()).add(x)

    verdicts = []
    for x in sorted(by_exec):
        rows = by_exec[x]
        evidence = sorted(
            (r.element_id, r.role, r.significant) for r in rows if r.cardinality == "univariate"
        )
        if not any(r.significant for r in rows):
            verdicts.append(PropagationVerdict(x, UNAFFECTED, evidence))
            continue
        notes: list[str] = []
        explained = False
        for r in rows:
            if not (r.significant and r.cardinality == "univariate"):
                continue
            if r.role == Role.PARAMETER.value:
                callers = [c for c in graph.callers_of(x) if c != x]
                missing = [c for c in callers if c not in modeled]
                if x in args_to:
                    explained = True
                elif missing:
                    notes.append(f"{r.element_id}: callers {missing} not modeled")
            elif r.role == Role.PROPERTY_READ.value:
                if r.element_id in writes:
                    explained = True
                elif writers.get(r.element_id, set()) - modeled:
                    notes.append(f"{r.element_id}: writer not modeled")
            elif r.role == Role.INVOCATION_RETURN.value:
                callee = _callee_of(graph, r)
                if callee in returns_of:
                    explained = True
                elif callee not in modeled:
                    notes.append(f"{r.element_id}: callee {callee} not modeled")
        if not any(r.significant and r.cardinality == "univariate" for r in rows):
            explained = _joint_only_explained(graph, x, rows, affected, writers)
        for note in notes:
            logger.warning("%s: %s", x, note)
        verdicts.append(PropagationVerdict(x, SYMPTOM if explained else ROOT_CAUSE, evidence, notes))
    return verdicts


def _upstream(graph: ProgramGraph, el: CodeElementRef, writers: dict[str, set[str]]) -> set[str]:
    if el.role is Role.PARAMETER:
        return set(graph.callers_of(el.executable_id))
    if el.role is Role.PROPERTY_READ:
        return writers.get(el.element_id, set())
    if el.role is Role.INVOCATION_RETURN:
        return {el.callee}
    return set()


def _joint_only_explained(graph, x, rows, affected, writers) -> bool:
    columns: set[str] = set()
    for r in rows:
        if r.significant and r.cardinality == "multivariate":
            if r.group is None:
                columns |= {el.element_id for el in graph.elements.get(x, ())}
            else:
                columns |= {el.element_id for el in graph.elements.get(x, ()) if el.callee == r.group}
    for eid in sorted(columns):
        el = graph.element(x, eid)
        if el.role.is_input and (_upstream(graph, el, writers) - {x}) & affected:
            return True
    return False


@dataclass
class LocalizationReport:
    results: list[LikelihoodResult]
    verdicts: list[PropagationVerdict]
    critical_value: float
    graph: ProgramGraph | None = None
    seeds: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    unmodeled: list[str] = field(default_factory=list)
    incompatible: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.results = sorted(self.results, key=lambda r: r.sort_key)

    def find(self, executable_id: str, element_id: str | None = None, cardinality: str | None = None):
        for r in self.results:
            if r.executable_id == executable_id and r.element_id == element_id:
                if cardinality is None or r.cardinality == cardinality:
                    return r
        raise KeyError((executable_id, element_id, cardinality))

    def verdict(self, executable_id: str) -> PropagationVerdict:
        for v in self.verdicts:
            if v.executable_id == executable_id:
                return v
        raise KeyError(executable_id)

    def significant_set(self) -> set[tuple[str, str | None, str]]:
        return {(r.executable_id, r.element_id, r.cardinality) for r in self.results if r.significant}

    def rethreshold(self, c: float) -> LocalizationReport:
        results = [r.rethreshold(c) for r in self.results]
        verdicts = propagate(results, self.graph) if self.graph is not None else []
        return LocalizationReport(results, verdicts, c, self.graph, dict(self.seeds),
                                  list(self.warnings), list(self.unmodeled), list(self.incompatible))

    def to_json(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "critical_value": self.critical_value,
            "critical_value_log10": self.critical_value / math.log(10),
            "formats": {"model": MODEL_FORMAT, "bundle": BUNDLE_FORMAT, "report": REPORT_FORMAT},
            "seeds": self.seeds,
            "results": [asdict(r) for r in self.results],
            "verdicts": [
                {
                    "executable_id": v.executable_id,
                    "classification": v.classification,
                    "heuristic": True,
                    "evidence": [list(e) for e in v.evidence],
                    "notes": v.notes,
                }
                for v in self.verdicts
            ],
            "warnings": self.warnings,
            "unmodeled": self.unmodeled,
            "incompatible": self.incompatible,
            "graph": self.graph.header_objects() if self.graph is not None else None,
        }

    @classmethod
    def from_json(cls, doc: dict) -> LocalizationReport:
        if doc.get("format") != REPORT_FORMAT:
            raise SchemaError(f"unsupported report format {doc.get('format')!r}")
        graph = graph_from_header(doc["graph"]) if doc.get("graph") else None
        verdicts = [
            PropagationVerdict(v["executable_id"], v["classification"],
                               [tuple(e) for e in v["evidence"]], list(v.get("notes", [])))
            for v in doc["verdicts"]
        ]
        return cls(
            results=[LikelihoodResult(**r) for r in doc["results"]],
            verdicts=verdicts,
            critical_value=float(doc["critical_value"]),
            graph=graph,
            seeds=dict(doc.get("seeds", {})),
            warnings=list(doc.get("warnings", [])),
            unmodeled=list(doc.get("unmodeled", [])),
            incompatible=list(doc.get("incompatible", [])),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", "element", "cardinality", "LL_alt", "LL_null", "delta", "significant", "status"])
        for r in self.results:
            writer.writerow([
                r.executable_id, r.label, r.cardinality,
                f"{r.ll_alt:.6f}", f"{r.ll_null:.6f}", f"{r.delta:.6f}",
                "yes" if r.significant else "no", r.status,
            ])
        return buf.getvalue()

    def render(self) -> str:
        lines = [
            f"critical value c = {self.critical_value:.4f} (natural log) = "
            f"{self.critical_value / math.log(10):.4f} (log10)",
            f"{'model':<26} {'element':<16} {'cardinality':<12} {'LL_alt':>14} {'LL_null':>10} "
            f"{'delta':>14} sig",
        ]
        for r in self.results:
            sig = "yes" if r.significant else "no"
            if r.status != "ok":
                sig += f" ({r.status})"
            lines.append(
                f"{r.executable_id:<26} {r.label:<16} {r.cardinality:<12} {r.ll_alt:>14.3f} "
                f"{r.ll_null:>10.3f} {r.delta:>14.3f} {sig}"
            )
        lines.append("propagation (heuristic):")
        lines += [f"  {v.executable_id:<26} {v.classification}" for v in self.verdicts]
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines)


def graph_from_header(objs: list[dict]) -> ProgramGraph:
    execs = [o["id"] for o in objs if o.get("kind") == "executable"]
    elements = [CodeElementRef.from_json(o) for o in objs if o.get("kind") == "element"]
    edges = [(o["caller"], o["callee"]) for o in objs if o.get("kind") == "call"]
    return ProgramGraph.build(elements, edges, execs)


def graph_from_bundles(bundles: Mapping[str, ModelBundle]) -> ProgramGraph:
    elements = [u.element for b in bundles.values() for u in b.univariate.values()]
    edges = {(el.executable_id, el.callee) for el in elements if el.callee is not None}
    execs = set(bundles) | {callee for _, callee in edges}
    return ProgramGraph.build(elements, edges, execs)


def _univariate_result(model: UnivariateModel, dataset: BehavioralDataset, c: float) -> LikelihoodResult:
    el = model.element
    stats = model.mean_log_likelihood(dataset.column(el.element_id))
    return LikelihoodResult.build(el.executable_id, el.element_id, "univariate", stats.value, model.self_ll,
                                  c, stats.n_used, role=el.role.value, n_excluded=stats.n_excluded)


def _multivariate_result(model: DensityModel, dataset: BehavioralDataset, c: float) -> LikelihoodResult:
    stats = evaluate(model, dataset)
    return LikelihoodResult.build(model.executable_id, model.group, "multivariate", stats.value, model.self_ll,
                                  c, stats.n_used, group=model.group, n_excluded=stats.n_excluded)


def localize(
    models: Mapping[str, ModelBundle],
    alt_datasets: Mapping[str, BehavioralDataset],
    c: float = DEFAULT_CRITICAL_VALUE,
    graph: ProgramGraph | None = None,
    seeds: dict[str, int] | None = None,
    warnings: Iterable[str] = (),
) -> LocalizationReport:
    if not c < 0:
        raise DomainError(f"critical value must be negative, got {c}")
    graph = graph if graph is not None else graph_from_bundles(models)
    report_warnings = list(warnings)
    unmodeled = sorted(set(alt_datasets) - set(models))
    for x in unmodeled:
        report_warnings.append(f"{x}: present in alt trace but has no fitted model (unmodeled)")
    mismatches = []
    for x in sorted(set(alt_datasets) & set(models)):
        if tuple(models[x].full.columns) != alt_datasets[x].element_ids:
            mismatches.append(
                f"{x}: alt columns {list(alt_datasets[x].element_ids)} != model columns {list(models[x].full.columns)}"
            )
    if mismatches:
        raise SchemaError("model/trace schema mismatch:\n  " + "\n  ".join(mismatches))

    results: list[LikelihoodResult] = []
    incompatible: list[str] = []
    for x in sorted(models):
        bundle = models[x]
        if x not in alt_datasets:
            report_warnings.append(f"{x}: no complete invocations in alt trace")
            continue
        alt = alt_datasets[x]
        for name in bundle.degenerate:
            report_warnings.append(f"{x}/{name}: degenerate (near-constant) column in null data")
        try:
            results.append(_multivariate_result(bundle.full, alt, c))
            for callee, model in sorted(bundle.groups.items()):
                results.append(_multivariate_result(model, alt.select(model.columns), c))
            for eid in alt.element_ids:
                results.append(_univariate_result(bundle.univariate[eid], alt, c))
        except DataError as exc:
            incompatible.append(x)
            report_warnings.append(str(exc))
            results = [r for r in results if r.executable_id != x]
            continue
        if alt.n < MIN_ALT_ROWS:
            report_warnings.append(f"{x}: only {alt.n} alt rows (< {MIN_ALT_ROWS}); insufficient evidence")
    verdicts = propagate(results, graph)
    for v in verdicts:
        report_warnings += [f"{v.executable_id}: {n}" for n in v.notes]
    return LocalizationReport(results, verdicts, c, graph, dict(seeds or {}), report_warnings,
                              unmodeled, incompatible)


def _union_edges(a: np.ndarray, b: np.ndarray, bins: int) -> np.ndarray:
    both = np.concatenate([a[np.isfinite(a)], b[np.isfinite(b)]])
    if both.size == 0:
        lo, hi = 0.0, 1.0
    else:
        lo, hi = float(both.min()), float(both.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def export_plot_data(
    models: Mapping[str, ModelBundle],
    null_datasets: Mapping[str, BehavioralDataset],
    alt_datasets: Mapping[str, BehavioralDataset],
    element: CodeElementRef,
) -> dict:
    """Paired null/alt distributions of one element, ready for any plotting tool."""
    x, eid = element.executable_id, element.element_id
    sides = {}
    missing = []
    for side, datasets in (("null", null_datasets), ("alt", alt_datasets)):
        ds = datasets.get(x)
        if ds is None or eid not in ds.element_ids:
            missing.append(side)
            sides[side] = np.empty(0)
        else:
            sides[side] = ds.column(eid)
    doc: dict = {
        "format": PLOT_FORMAT,
        "executable_id": x,
        "element_id": eid,
        "role": element.role.value,
        "value_kind": element.value_kind.value,
        "partial": bool(missing),
        "missing": missing,
        "n_null": int(sides["null"].size),
        "n_alt": int(sides["alt"].size),
    }
    if element.is_discrete:
        k = int(element.cardinality)
        labels = list(element.codes) if element.codes else [str(i) for i in range(k)]
        doc["categories"] = labels
        for side, vals in sides.items():
            counts = np.bincount(vals.astype(int), minlength=k)[:k] if vals.size else np.zeros(k, dtype=int)
            doc[f"{side}_counts"] = counts.tolist()
            doc[f"{side}_frequency"] = (counts / max(vals.size, 1)).tolist()
        return doc
    edges = _union_edges(sides["null"], sides["alt"], PLOT_BINS)
    doc["bin_edges"] = edges.tolist()
    for side, vals in sides.items():
        counts, _ = np.histogram(vals[np.isfinite(vals)], bins=edges)
        doc[f"{side}_counts"] = counts.tolist()
        doc[f"{side}_frequency"] = (counts / max(vals.size, 1)).tolist()
    bundle = models.get(x)
    if bundle is not None and eid in bundle.univariate:
        grid = np.linspace(edges[0], edges[-1], CURVE_POINTS)
        doc["curve"] = {"x": grid.tolist(), "density": np.exp(bundle.univariate[eid].log_pdf(grid)).tolist()}
    else:
        doc["partial"] = True
        doc["missing"].append("model")
    return doc


def write_report(report: LocalizationReport, json_path, csv_path) -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2)
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(report.to_csv())
