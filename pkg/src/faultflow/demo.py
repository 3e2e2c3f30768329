"""Instrumented Nutrition Advisor with two seedable faults.

Four classes mirror the running example: ``Servlet.handle`` builds a
``Person`` and asks ``NutritionAdvisor.advice`` for a recommendation, which
reads the person's height and weight and calls ``BmiService.bmi``. Every
parameter, property access, invocation argument/return and return value is
written to a trace file as it happens.

Anthropometric inputs come from per-gender bivariate Gaussians (a synthetic
stand-in for survey data), truncated by rejection.
"""

from __future__ import annotations

import enum
import tempfile
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable

import numpy as np

from faultflow.density.bundle import ModelBundle, derive_seed, fit_all
from faultflow.density.model import FitConfig
from faultflow.graph import (
    BehavioralDataset,
    CodeElementRef,
    ProgramGraph,
    Role,
    TraceWriter,
    ValueKind,
    assemble,
    load_trace,
)
from faultflow.localize import DEFAULT_CRITICAL_VALUE, LocalizationReport, localize

SERVLET = "Servlet.handle"
PERSON_INIT = "Person.init"
ADVICE = "NutritionAdvisor.advice"
BMI = "BmiService.bmi"

CM_PER_INCH = 2.54
HEIGHT_RANGE = (120.0, 220.0)
WEIGHT_RANGE = (30.0, 250.0)
BMI_THRESHOLDS = (18.5, 25.0, 30.0)
ADVICE_TEXTS = (
    "You are underweight, add nutrient-dense meals to your diet.",
    "You are healthy, keep up your current habits.",
    "You are overweight, consider more daily activity.",
    "You are obese, please talk to a nutrition specialist.",
)


class Fault(str, enum.Enum):
    NONE = "none"
    REGRESSION_NEGATED_WEIGHT = "regression_negated_weight"
    INTEGRATION_INCHES_BMI = "integration_inches_bmi"


@dataclass(frozen=True)
class GenderProfile:
    mean_height: float
    sd_height: float
    mean_weight: float
    sd_weight: float
    correlation: float = 0.4

    def __post_init__(self) -> None:
        if not (self.sd_height > 0 and self.sd_weight > 0):
            raise ValueError("standard deviations must be positive")
        if not -1.0 < self.correlation < 1.0:
            raise ValueError("correlation must lie in (-1, 1)")

    def scaled(self, factor: float) -> GenderProfile:
        return GenderProfile(
            self.mean_height * factor,
            self.sd_height * factor,
            self.mean_weight * factor,
            self.sd_weight * factor,
            self.correlation,
        )


DEFAULT_PROFILES = (
    GenderProfile(162.0, 7.0, 74.0, 17.0),
    GenderProfile(175.0, 7.5, 86.0, 18.0),
)


@dataclass(frozen=True)
class WorkloadConfig:
    request_count: int = 3000
    seed: int = 0
    profiles: tuple[GenderProfile, ...] = DEFAULT_PROFILES

    def __post_init__(self) -> None:
        if self.request_count < 1:
            raise ValueError("request_count must be >= 1")
        if len(self.profiles) != 2:
            raise ValueError("need one profile per gender code (0, 1)")


@dataclass(frozen=True)
class Request:
    height: float
    weight: float
    gender: int


def nutrition_graph() -> ProgramGraph:
    """Structure of the instrumented program, as declared in its trace header."""
    C, D = ValueKind.CONTINUOUS, ValueKind.DISCRETE
    advice_codes = dict(value_kind=D, codes=ADVICE_TEXTS, cardinality=len(ADVICE_TEXTS))
    els = [
        CodeElementRef(SERVLET, "init.height", Role.INVOCATION_ARG, C, callee=PERSON_INIT),
        CodeElementRef(SERVLET, "init.weight", Role.INVOCATION_ARG, C, callee=PERSON_INIT),
        CodeElementRef(SERVLET, "init.gender", Role.INVOCATION_ARG, D, cardinality=2, callee=PERSON_INIT),
        CodeElementRef(SERVLET, "advice.return", Role.INVOCATION_RETURN, callee=ADVICE, **advice_codes),
        CodeElementRef(PERSON_INIT, "init.height", Role.PARAMETER, C),
        CodeElementRef(PERSON_INIT, "init.weight", Role.PARAMETER, C),
        CodeElementRef(PERSON_INIT, "init.gender", Role.PARAMETER, D, cardinality=2),
        CodeElementRef(PERSON_INIT, "Person.height", Role.PROPERTY_WRITE, C),
        CodeElementRef(PERSON_INIT, "Person.weight", Role.PROPERTY_WRITE, C),
        CodeElementRef(PERSON_INIT, "Person.gender", Role.PROPERTY_WRITE, D, cardinality=2),
        CodeElementRef(ADVICE, "Person.height", Role.PROPERTY_READ, C),
        CodeElementRef(ADVICE, "Person.weight", Role.PROPERTY_READ, C),
        CodeElementRef(ADVICE, "bmi.height", Role.INVOCATION_ARG, C, callee=BMI),
        CodeElementRef(ADVICE, "bmi.weight", Role.INVOCATION_ARG, C, callee=BMI),
        CodeElementRef(ADVICE, "bmi.return", Role.INVOCATION_RETURN, C, callee=BMI),
        CodeElementRef(ADVICE, "advice.return", Role.RETURN_VALUE, **advice_codes),
        CodeElementRef(BMI, "bmi.height", Role.PARAMETER, C),
        CodeElementRef(BMI, "bmi.weight", Role.PARAMETER, C),
        CodeElementRef(BMI, "bmi.return", Role.RETURN_VALUE, C),
    ]
    edges = [(SERVLET, PERSON_INIT), (SERVLET, ADVICE), (ADVICE, BMI), (ADVICE, PERSON_INIT)]
    return ProgramGraph.build(els, edges, [SERVLET, PERSON_INIT, ADVICE, BMI])


class Tracer:
    def __init__(self, writer: TraceWriter) -> None:
        self.writer = writer
        self._next: dict[str, int] = defaultdict(int)

    def begin(self, executable_id: str) -> int:
        inv = self._next[executable_id]
        self._next[executable_id] += 1
        return inv

    def emit(self, executable_id: str, element_id: str, inv: int, value) -> None:
        self.writer.emit(executable_id, element_id, inv, value)


class Person:
    def __init__(self, tracer: Tracer, height: float, weight: float, gender: int, fault: Fault) -> None:
        inv = tracer.begin(PERSON_INIT)
        tracer.emit(PERSON_INIT, "init.height", inv, height)
        tracer.emit(PERSON_INIT, "init.weight", inv, weight)
        tracer.emit(PERSON_INIT, "init.gender", inv, gender)
        self._tracer = tracer
        self._height = height
        self._weight = -weight if fault is Fault.REGRESSION_NEGATED_WEIGHT else weight
        self._gender = gender
        tracer.emit(PERSON_INIT, "Person.height", inv, self._height)
        tracer.emit(PERSON_INIT, "Person.weight", inv, self._weight)
        tracer.emit(PERSON_INIT, "Person.gender", inv, self._gender)

    def read(self, reader: str, inv: int, name: str) -> float:
        value = getattr(self, f"_{name}")
        self._tracer.emit(reader, f"Person.{name}", inv, value)
        return value


class BmiService:
    def __init__(self, tracer: Tracer, fault: Fault) -> None:
        self.tracer = tracer
        self.fault = fault

    def bmi(self, height_cm: float, weight_kg: float) -> float:
        inv = self.tracer.begin(BMI)
        self.tracer.emit(BMI, "bmi.height", inv, height_cm)
        self.tracer.emit(BMI, "bmi.weight", inv, weight_kg)
        if self.fault is Fault.INTEGRATION_INCHES_BMI:
            height = height_cm / CM_PER_INCH
        else:
            height = height_cm / 100.0
        result = weight_kg / (height * height)
        self.tracer.emit(BMI, "bmi.return", inv, result)
        return result


def advice_for(bmi: float) -> str:
    for threshold, text in zip(BMI_THRESHOLDS, ADVICE_TEXTS):
        if bmi < threshold:
            return text
    return ADVICE_TEXTS[-1]


class NutritionAdvisor:
    def __init__(self, tracer: Tracer, service: BmiService) -> None:
        self.tracer = tracer
        self.service = service

    def advice(self, person: Person) -> str:
        inv = self.tracer.begin(ADVICE)
        height = person.read(ADVICE, inv, "height")
        weight = person.read(ADVICE, inv, "weight")
        self.tracer.emit(ADVICE, "bmi.height", inv, height)
        self.tracer.emit(ADVICE, "bmi.weight", inv, weight)
        bmi = self.service.bmi(height, weight)
        self.tracer.emit(ADVICE, "bmi.return", inv, bmi)
        text = advice_for(bmi)
        self.tracer.emit(ADVICE, "advice.return", inv, text)
        return text


class Servlet:
    def __init__(self, tracer: Tracer, fault: Fault) -> None:
        self.tracer = tracer
        self.fault = fault
        self.advisor = NutritionAdvisor(tracer, BmiService(tracer, fault))

    def handle(self, request: Request) -> str:
        inv = self.tracer.begin(SERVLET)
        self.tracer.emit(SERVLET, "init.height", inv, request.height)
        self.tracer.emit(SERVLET, "init.weight", inv, request.weight)
        self.tracer.emit(SERVLET, "init.gender", inv, request.gender)
        person = Person(self.tracer, request.height, request.weight, request.gender, self.fault)
        text = self.advisor.advice(person)
        self.tracer.emit(SERVLET, "advice.return", inv, text)
        return text


def generate_requests(config: WorkloadConfig) -> list[Request]:
    rng = np.random.default_rng(config.seed)
    requests = []
    for _ in range(config.request_count):
        gender = int(rng.integers(0, 2))
        p = config.profiles[gender]
        cov_hw = p.correlation * p.sd_height * p.sd_weight
        cov = [[p.sd_height**2, cov_hw], [cov_hw, p.sd_weight**2]]
        while True:
            h, w = rng.multivariate_normal([p.mean_height, p.mean_weight], cov, method="cholesky")
            if HEIGHT_RANGE[0] <= h <= HEIGHT_RANGE[1] and WEIGHT_RANGE[0] <= w <= WEIGHT_RANGE[1]:
                break
        requests.append(Request(float(h), float(w), gender))
    return requests


def run_requests(requests: Iterable[Request], fault: Fault | str, stream: IO[str]) -> list[str]:
    """Serve ``requests`` through the instrumented program, tracing to ``stream``."""
    tracer = Tracer(TraceWriter(stream, nutrition_graph()))
    servlet = Servlet(tracer, Fault(fault))
    return [servlet.handle(r) for r in requests]


def run_workload(config: WorkloadConfig, fault: Fault | str, out: str | Path) -> Path:
    out = Path(out)
    with open(out, "w", encoding="utf-8") as fh:
        run_requests(generate_requests(config), fault, fh)
    return out


@dataclass
class Study:
    """Artifacts of one reproduction run."""

    graph: ProgramGraph
    bundles: dict[str, ModelBundle]
    null_datasets: dict[str, BehavioralDataset]
    alt_datasets: dict[str, dict[str, BehavioralDataset]]
    reports: dict[str, LocalizationReport]
    traces: dict[str, Path] = field(default_factory=dict)

    @property
    def regression(self) -> LocalizationReport:
        return self.reports[Fault.REGRESSION_NEGATED_WEIGHT.value]

    @property
    def integration(self) -> LocalizationReport:
        return self.reports[Fault.INTEGRATION_INCHES_BMI.value]

    def csvs(self) -> dict[str, str]:
        return {name: report.to_csv() for name, report in self.reports.items()}


STUDY_FAULTS = (Fault.REGRESSION_NEGATED_WEIGHT, Fault.INTEGRATION_INCHES_BMI)


def reproduce_study(
    seed: int = 0,
    c: float = DEFAULT_CRITICAL_VALUE,
    workload: WorkloadConfig | None = None,
    fit_config: FitConfig | None = None,
    faults: Iterable[Fault | str] = STUDY_FAULTS,
    workdir: str | Path | None = None,
    jobs: int = 1,
) -> Study:
    """Null run, model fitting, then one independent alt run per fault.

    With ``Fault.NONE`` among ``faults`` the alt run is a fresh draw from the
    unmodified program, i.e. a null-vs-null control.
    """
    workload = workload or WorkloadConfig()
    fit_config = replace(fit_config or FitConfig(), seed=seed)
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory()
        workdir = tmp.name
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    try:
        null_cfg = replace(workload, seed=derive_seed(seed, "workload", "null"))
        traces = {"null": run_workload(null_cfg, Fault.NONE, workdir / "null.trace")}
        events, graph = load_trace(traces["null"])
        null_assembly = assemble(events, graph)
        bundles = fit_all(null_assembly.datasets, fit_config, jobs=jobs)
        alt_datasets: dict[str, dict[str, BehavioralDataset]] = {}
        reports: dict[str, LocalizationReport] = {}
        for fault in map(Fault, faults):
            alt_cfg = replace(workload, seed=derive_seed(seed, "workload", fault.value))
            traces[fault.value] = run_workload(alt_cfg, fault, workdir / f"{fault.value}.trace")
            alt_events, alt_graph = load_trace(traces[fault.value])
            alt = assemble(alt_events, alt_graph)
            alt_datasets[fault.value] = alt.datasets
            seeds = {"fit": seed, "null_workload": null_cfg.seed, "alt_workload": alt_cfg.seed}
            reports[fault.value] = localize(bundles, alt.datasets, c, graph, seeds,
                                            null_assembly.warnings + alt.warnings)
        return Study(graph, bundles, null_assembly.datasets, alt_datasets, reports,
                     traces if tmp is None else {})
    finally:
        if tmp is not None:
            tmp.cleanup()


# Elements shown side by side (null vs alt) for each fault scenario.
PLOT_PANELS = {
    Fault.REGRESSION_NEGATED_WEIGHT.value: [
        (PERSON_INIT, "init.height"),
        (PERSON_INIT, "init.weight"),
        (PERSON_INIT, "Person.height"),
        (PERSON_INIT, "Person.weight"),
        (ADVICE, "Person.height"),
        (ADVICE, "Person.weight"),
        (ADVICE, "bmi.return"),
    ],
    Fault.INTEGRATION_INCHES_BMI.value: [
        (SERVLET, "init.height"),
        (SERVLET, "init.weight"),
        (SERVLET, "init.gender"),
        (ADVICE, "bmi.height"),
        (ADVICE, "bmi.weight"),
        (ADVICE, "bmi.return"),
    ],
}
