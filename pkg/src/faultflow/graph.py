"""Program structure graph, trace file format, and behavioral datasets.

A trace file is line-oriented UTF-8. Header lines start with ``#graph`` and
carry one JSON object each, declaring executables, code elements and call
edges. Every other non-blank line that does not start with ``#`` is an event::

    #graph {"kind": "executable", "id": "Person.init"}
    #graph {"kind": "element", "executable": "Person.init", "element": "init.weight",
            "role": "parameter", "value_kind": "continuous"}
    #graph {"kind": "call", "caller": "Servlet.handle", "callee": "Person.init"}
    {"x": "Person.init", "e": "init.weight", "i": 0, "v": 69.54}
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from faultflow.errors import IntegrityError, SchemaError, TraceParseError

logger = logging.getLogger(__name__)

TRACE_FORMAT = "faultflow-trace"
TRACE_VERSION = 1
HEADER_PREFIX = "#graph"


class Role(str, enum.Enum):
    # Declaration order is the column sort order.
    PARAMETER = "parameter"
    PROPERTY_READ = "property_read"
    PROPERTY_WRITE = "property_write"
    INVOCATION_ARG = "invocation_arg"
    INVOCATION_RETURN = "invocation_return"
    RETURN_VALUE = "return_value"

    @property
    def is_input(self) -> bool:
        return self in _INPUT_ROLES

    @property
    def is_output(self) -> bool:
        return not self.is_input

    @property
    def rank(self) -> int:
        return _ROLE_RANK[self]


_INPUT_ROLES = frozenset({Role.PARAMETER, Role.PROPERTY_READ, Role.INVOCATION_RETURN})
_ROLE_RANK = {role: i for i, role in enumerate(Role)}
_INVOCATION_ROLES = frozenset({Role.INVOCATION_ARG, Role.INVOCATION_RETURN})


class ValueKind(str, enum.Enum):
    CONTINUOUS = "continuous"
    DISCRETE = "discrete"


@dataclass(frozen=True)
class CodeElementRef:
    """One observable slot of an executable.

    ``callee`` names the invoked executable for invocation arguments and
    returns. Discrete elements declare a ``cardinality``; string values are
    accepted only through a ``codes`` table or, when ``hash_buckets`` is set,
    by hashing into that many buckets.
    """

    executable_id: str
    element_id: str
    role: Role
    value_kind: ValueKind = ValueKind.CONTINUOUS
    cardinality: int | None = None
    codes: tuple[str, ...] | None = None
    callee: str | None = None
    hash_buckets: int | None = None

    @property
    def is_discrete(self) -> bool:
        return self.value_kind is ValueKind.DISCRETE

    @property
    def sort_key(self) -> tuple[int, str]:
        return (self.role.rank, self.element_id)

    def encode(self, raw: object) -> int | float | None:
        """Map a raw event value to the number stored in the dataset.

        Returns ``None`` for string values the element cannot encode (an
        unbounded string on an element without a code table or hash buckets).
        """
        if isinstance(raw, bool):
            raise SchemaError(f"{self.label}: boolean values must be declared as discrete codes 0/1")
        if not self.is_discrete:
            if isinstance(raw, (int, float)):
                return float(raw)
            raise SchemaError(f"{self.label}: continuous element got non-numeric value {raw!r}")
        if isinstance(raw, str):
            if self.codes is not None:
                try:
                    return self.codes.index(raw)
                except ValueError:
                    raise SchemaError(f"{self.label}: value {raw!r} missing from code table") from None
            if self.hash_buckets is not None:
                return zlib.crc32(raw.encode("utf-8")) % self.hash_buckets
            return None
        if isinstance(raw, float) and raw.is_integer():
            raw = int(raw)
        if not isinstance(raw, int):
            raise SchemaError(f"{self.label}: discrete element got non-integer value {raw!r}")
        if raw < 0 or (self.cardinality is not None and raw >= self.cardinality):
            raise SchemaError(f"{self.label}: code {raw} outside [0, {self.cardinality})")
        return raw

    @property
    def label(self) -> str:
        return f"{self.executable_id}/{self.element_id}"

    def to_json(self) -> dict:
        doc: dict = {
            "kind": "element",
            "executable": self.executable_id,
            "element": self.element_id,
            "role": self.role.value,
            "value_kind": self.value_kind.value,
        }
        if self.cardinality is not None:
            doc["cardinality"] = self.cardinality
        if self.codes is not None:
            doc["codes"] = list(self.codes)
        if self.callee is not None:
            doc["callee"] = self.callee
        if self.hash_buckets is not None:
            doc["hash_buckets"] = self.hash_buckets
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> CodeElementRef:
        try:
            role = Role(doc["role"])
            kind = ValueKind(doc.get("value_kind", "continuous"))
            codes = doc.get("codes")
            cardinality = doc.get("cardinality")
            buckets = doc.get("hash_buckets")
            if codes is not None:
                codes = tuple(str(c) for c in codes)
                if cardinality is None:
                    cardinality = len(codes)
                elif cardinality != len(codes):
                    raise SchemaError(f"{doc['element']}: cardinality {cardinality} != {len(codes)} codes")
            if buckets is not None and cardinality is None:
                cardinality = int(buckets)
            if kind is ValueKind.DISCRETE and cardinality is None:
                raise SchemaError(f"discrete element {doc['element']!r} needs a cardinality")
            return cls(
                executable_id=str(doc["executable"]),
                element_id=str(doc["element"]),
                role=role,
                value_kind=kind,
                cardinality=None if cardinality is None else int(cardinality),
                codes=codes,
                callee=doc.get("callee"),
                hash_buckets=None if buckets is None else int(buckets),
            )
        except KeyError as exc:
            raise SchemaError(f"element declaration missing field {exc.args[0]!r}") from None
        except ValueError as exc:
            raise SchemaError(str(exc)) from None


@dataclass(frozen=True)
class RuntimeEvent:
    executable_id: str
    element_id: str
    invocation_id: int
    value: float | int | None
    sequence_no: int = 0


@dataclass
class ProgramGraph:
    executables: tuple[str, ...]
    elements: dict[str, tuple[CodeElementRef, ...]]
    call_edges: frozenset[tuple[str, str]] = frozenset()

    def __post_init__(self) -> None:
        self.executables = tuple(sorted(set(self.executables)))
        stray = set(self.elements) - set(self.executables)
        if stray:
            raise SchemaError(f"elements reference undeclared executables: {sorted(stray)}")
        self.elements = {
            x: tuple(sorted(self.elements.get(x, ()), key=lambda el: el.sort_key))
            for x in self.executables
        }
        self.call_edges = frozenset(tuple(edge) for edge in self.call_edges)
        self._index = {(el.executable_id, el.element_id): el for els in self.elements.values() for el in els}
        self.validate()

    @classmethod
    def build(
        cls,
        elements: Iterable[CodeElementRef],
        call_edges: Iterable[tuple[str, str]] = (),
        executables: Iterable[str] = (),
    ) -> ProgramGraph:
        grouped: dict[str, list[CodeElementRef]] = defaultdict(list)
        names = set(executables)
        seen = set()
        for el in elements:
            key = (el.executable_id, el.element_id)
            if key in seen:
                raise SchemaError(f"duplicate element {el.label}")
            seen.add(key)
            grouped[el.executable_id].append(el)
        undeclared = set(grouped) - names if names else set()
        if undeclared:
            raise SchemaError(f"elements reference undeclared executables: {sorted(undeclared)}")
        names |= set(grouped)
        return cls(tuple(names), {x: tuple(v) for x, v in grouped.items()}, frozenset(call_edges))

    def validate(self) -> None:
        known = set(self.executables)
        for caller, callee in self.call_edges:
            if caller not in known or callee not in known:
                raise SchemaError(f"call edge {caller} -> {callee} references an undeclared executable")
        for els in self.elements.values():
            for el in els:
                if el.executable_id not in known:
                    raise SchemaError(f"{el.label}: executable not declared")
                if el.role in _INVOCATION_ROLES:
                    if el.callee is None:
                        raise SchemaError(f"{el.label}: invocation element must name its callee")
                    if (el.executable_id, el.callee) not in self.call_edges:
                        raise SchemaError(f"{el.label}: no call edge {el.executable_id} -> {el.callee}")

    def element(self, executable_id: str, element_id: str) -> CodeElementRef:
        try:
            return self._index[(executable_id, element_id)]
        except KeyError:
            raise SchemaError(f"undeclared element {executable_id}/{element_id}") from None

    def has_element(self, executable_id: str, element_id: str) -> bool:
        return (executable_id, element_id) in self._index

    def callers_of(self, executable_id: str) -> list[str]:
        return sorted(caller for caller, callee in self.call_edges if callee == executable_id)

    def header_objects(self) -> list[dict]:
        objs: list[dict] = [{"kind": "format", "name": TRACE_FORMAT, "version": TRACE_VERSION}]
        objs += [{"kind": "executable", "id": x} for x in self.executables]
        objs += [el.to_json() for x in self.executables for el in self.elements[x]]
        objs += [{"kind": "call", "caller": a, "callee": b} for a, b in sorted(self.call_edges)]
        return objs

    def digest(self) -> str:
        """Content hash of the declared structure; stable across runs."""
        canon = json.dumps(self.header_objects(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass
class BehavioralDataset:
    """Invocation rows by element columns for one executable."""

    executable_id: str
    columns: tuple[CodeElementRef, ...]
    rows: np.ndarray
    invocation_ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.columns = tuple(self.columns)
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[1] != len(self.columns):
            raise SchemaError(
                f"{self.executable_id}: rows of shape {self.rows.shape} do not match {len(self.columns)} columns"
            )
        if not self.columns:
            raise SchemaError(f"{self.executable_id}: dataset needs at least one column")
        if self.invocation_ids is None:
            self.invocation_ids = np.arange(len(self.rows), dtype=np.int64)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    @property
    def element_ids(self) -> tuple[str, ...]:
        return tuple(c.element_id for c in self.columns)

    @property
    def discrete_cardinalities(self) -> tuple[int | None, ...]:
        return tuple(c.cardinality if c.is_discrete else None for c in self.columns)

    def column_index(self, element_id: str) -> int:
        try:
            return self.element_ids.index(element_id)
        except ValueError:
            raise SchemaError(f"{self.executable_id} has no column {element_id!r}") from None

    def column(self, element_id: str) -> np.ndarray:
        return self.rows[:, self.column_index(element_id)]

    def select(self, element_ids: Sequence[str]) -> BehavioralDataset:
        idx = [self.column_index(e) for e in element_ids]
        return BehavioralDataset(
            self.executable_id, tuple(self.columns[i] for i in idx), self.rows[:, idx], self.invocation_ids
        )

    def take(self, row_index: np.ndarray) -> BehavioralDataset:
        return BehavioralDataset(
            self.executable_id, self.columns, self.rows[row_index], self.invocation_ids[row_index]
        )


@dataclass
class Assembly:
    """Datasets plus everything assembly had to drop or ignore."""

    datasets: dict[str, BehavioralDataset]
    dropped_rows: dict[str, int] = field(default_factory=dict)
    repeated_values: dict[str, int] = field(default_factory=dict)
    excluded_executables: list[str] = field(default_factory=list)
    unmodelable_elements: list[str] = field(default_factory=list)

    @property
    def warnings(self) -> list[str]:
        out = [f"{x}: dropped {n} incomplete invocation(s)" for x, n in sorted(self.dropped_rows.items()) if n]
        out += [
            f"{x}: ignored {n} repeated value(s) within an invocation (first kept)"
            for x, n in sorted(self.repeated_values.items())
            if n
        ]
        out += [f"{x}: no complete invocations, excluded" for x in self.excluded_executables]
        out += [f"{label}: unencodable string values, excluded from modeling" for label in self.unmodelable_elements]
        return out


def _parse_header(obj: dict, line_no: int, execs: list[str], elements: list[CodeElementRef], edges: set) -> None:
    kind = obj.get("kind")
    if kind == "format":
        if obj.get("name", TRACE_FORMAT) != TRACE_FORMAT or int(obj.get("version", 1)) > TRACE_VERSION:
            raise TraceParseError(f"unsupported trace format {obj!r}", line_no)
    elif kind == "executable":
        execs.append(str(obj["id"]))
    elif kind == "element":
        try:
            elements.append(CodeElementRef.from_json(obj))
        except SchemaError as exc:
            raise TraceParseError(str(exc), line_no) from None
    elif kind == "call":
        edges.add((str(obj["caller"]), str(obj["callee"])))
    else:
        raise TraceParseError(f"unknown header kind {kind!r}", line_no)


def read_trace(stream: IO[str]) -> tuple[list[RuntimeEvent], ProgramGraph]:
    execs: list[str] = []
    elements: list[CodeElementRef] = []
    edges: set[tuple[str, str]] = set()
    graph: ProgramGraph | None = None
    events: list[RuntimeEvent] = []
    last_inv: dict[str, int] = {}

    for line_no, line in enumerate(stream, start=1):
        text = line.strip()
        if not text:
            continue
        if text.startswith(HEADER_PREFIX):
            if graph is not None:
                raise TraceParseError("header line after the first event", line_no)
            try:
                obj = json.loads(text[len(HEADER_PREFIX):])
                _parse_header(obj, line_no, execs, elements, edges)
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
                raise TraceParseError(f"malformed header: {exc}", line_no) from None
            continue
        if text.startswith("#"):
            continue
        try:
            obj = json.loads(text)
            x, e, inv, raw = obj["x"], obj["e"], obj["i"], obj["v"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise TraceParseError(f"malformed event: {exc}", line_no) from None
        if graph is None:
            graph = ProgramGraph.build(elements, edges, execs)
        if not isinstance(inv, int) or isinstance(inv, bool) or inv < 0:
            raise TraceParseError(f"invocation id must be a non-negative integer, got {inv!r}", line_no)
        if not graph.has_element(x, e):
            raise SchemaError(f"line {line_no}: event references undeclared element {x}/{e}")
        prev = last_inv.get(x)
        if prev is not None and inv < prev:
            raise IntegrityError(f"line {line_no}: invocation id {inv} of {x} follows {prev}")
        last_inv[x] = inv
        try:
            value = graph.element(x, e).encode(raw)
        except SchemaError as exc:
            raise SchemaError(f"line {line_no}: {exc}") from None
        events.append(RuntimeEvent(x, e, inv, value, len(events)))

    if graph is None:
        graph = ProgramGraph.build(elements, edges, execs)
    return events, graph


def load_trace(path: str | Path) -> tuple[list[RuntimeEvent], ProgramGraph]:
    with open(path, encoding="utf-8") as fh:
        return read_trace(fh)


def _event_line(x: str, e: str, inv: int, value: object) -> str:
    return json.dumps({"x": x, "e": e, "i": inv, "v": value}, separators=(",", ":"))


class TraceWriter:
    """Streams a trace file: the graph header first, then events in order."""

    def __init__(self, stream: IO[str], graph: ProgramGraph) -> None:
        self.stream = stream
        self.graph = graph
        for obj in graph.header_objects():
            stream.write(f"{HEADER_PREFIX} {json.dumps(obj, separators=(',', ':'))}\n")

    def emit(self, executable_id: str, element_id: str, invocation_id: int, value: object) -> None:
        self.stream.write(_event_line(executable_id, element_id, invocation_id, value) + "\n")


def write_trace(path: str | Path, graph: ProgramGraph, events: Iterable[RuntimeEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        writer = TraceWriter(fh, graph)
        for ev in events:
            value = ev.value
            el = graph.element(ev.executable_id, ev.element_id)
            if el.is_discrete and value is not None:
                value = int(value)
            writer.emit(ev.executable_id, ev.element_id, ev.invocation_id, value)


def assemble(events: Iterable[RuntimeEvent], graph: ProgramGraph) -> Assembly:
    """Group events by invocation into one row per complete invocation."""
    columns = {x: tuple(el for el in graph.elements[x]) for x in graph.executables}
    unmodelable: set[tuple[str, str]] = set()
    cells: dict[str, dict[int, dict[str, float]]] = {x: {} for x in graph.executables}
    repeated: dict[str, int] = defaultdict(int)

    for ev in events:
        if ev.value is None:
            unmodelable.add((ev.executable_id, ev.element_id))
            continue
        row = cells[ev.executable_id].setdefault(ev.invocation_id, {})
        if ev.element_id in row:
            repeated[ev.executable_id] += 1
            continue
        row[ev.element_id] = float(ev.value)

    result = Assembly(datasets={}, repeated_values=dict(repeated))
    result.unmodelable_elements = [f"{x}/{e}" for x, e in sorted(unmodelable)]
    for x in graph.executables:
        cols = tuple(el for el in columns[x] if (x, el.element_id) not in unmodelable)
        if not cols:
            if cells[x]:
                result.excluded_executables.append(x)
            continue
        names = [el.element_id for el in cols]
        invs = sorted(cells[x])
        complete = [i for i in invs if all(name in cells[x][i] for name in names)]
        result.dropped_rows[x] = len(invs) - len(complete)
        if not complete:
            if invs:
                result.excluded_executables.append(x)
            continue
        matrix = np.array([[cells[x][i][name] for name in names] for i in complete], dtype=np.float64)
        result.datasets[x] = BehavioralDataset(x, cols, matrix, np.asarray(complete, dtype=np.int64))
    for msg in result.warnings:
        logger.warning(msg)
    return result


def assemble_datasets(events: Iterable[RuntimeEvent], graph: ProgramGraph) -> dict[str, BehavioralDataset]:
    return assemble(events, graph).datasets


def dataset_to_events(dataset: BehavioralDataset, start_sequence: int = 0) -> Iterator[RuntimeEvent]:
    seq = start_sequence
    for inv, row in zip(dataset.invocation_ids, dataset.rows):
        for col, value in zip(dataset.columns, row):
            v: float | int = int(value) if col.is_discrete else float(value)
            yield RuntimeEvent(dataset.executable_id, col.element_id, int(inv), v, seq)
            seq += 1


__all__ = [
    "Assembly",
    "BehavioralDataset",
    "CodeElementRef",
    "ProgramGraph",
    "Role",
    "RuntimeEvent",
    "TraceWriter",
    "ValueKind",
    "assemble",
    "assemble_datasets",
    "dataset_to_events",
    "load_trace",
    "read_trace",
    "write_trace",
]
