"""Stay and event records plus the file formats that feed them.

Times are fractional hours relative to ICU admission (time 0). Negative times
are legal and matter: pre-ICU creatinine measurements enter the rolling
KDIGO baseline through them. Sub-hour precision is kept until discretisation.

Event files are either headered CSV (`stay_id,time_hours,concept,value`) or
NDJSON objects with the same keys. Statics files are CSV with the header
`stay_id,domain,age,sex,height,weight,icu_discharge_hours,died_in_icu,
death_time_hours` and an optional trailing `hospital_id` column; empty fields
mean missing.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from .catalog import ConceptCatalog

SEX_FEMALE = "female"
SEX_MALE = "male"
SEX_UNKNOWN = "unknown"


class ParseError(ValueError):
    """Raised for malformed input rows; carries the 1-based line number."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


@dataclass(frozen=True)
class EventRecord:
    stay_id: str
    time: float
    concept_id: str
    value: float


@dataclass
class StayStatic:
    stay_id: str
    domain_id: str
    age: Optional[float] = None
    sex: str = SEX_UNKNOWN
    height: Optional[float] = None
    weight: Optional[float] = None
    icu_discharge: Optional[float] = None
    died_in_icu: bool = False
    death_time: Optional[float] = None
    hospital_id: Optional[str] = None

    @property
    def los(self) -> Optional[float]:
        return self.icu_discharge

    def end_time(self) -> Optional[float]:
        """Hours at which the stay ends: death if died in ICU, else discharge."""
        if self.died_in_icu and self.death_time is not None:
            return self.death_time
        return self.icu_discharge


@dataclass
class StayTimeline:
    static: StayStatic
    events: list[EventRecord] = field(default_factory=list)

    def series(self, concept_id: str) -> list[tuple[float, float]]:
        """Time-sorted (time, value) pairs for one concept."""
        return [(e.time, e.value) for e in self.events if e.concept_id == concept_id]


def _parse_float(text: str, what: str, line: int) -> float:
    try:
        out = float(text)
    except ValueError:
        raise ParseError(f"malformed {what}: {text!r}", line) from None
    if not math.isfinite(out):
        raise ParseError(f"non-finite {what}: {text!r}", line)
    return out


def parse_events(stream: Union[bytes, str, io.IOBase], catalog: ConceptCatalog) -> list[EventRecord]:
    """Parse an event stream (CSV or NDJSON), preserving row order.

    Unknown concept ids are collected and reported in one error so a bad
    mapping surfaces as a single message rather than row-by-row noise.
    """
    if isinstance(stream, bytes):
        text = stream.decode("utf-8")
    elif isinstance(stream, str):
        text = stream
    else:
        text = stream.read()
        if isinstance(text, bytes):
            text = text.decode("utf-8")

    stripped = text.lstrip()
    if not stripped:
        return []
    known = catalog.known_event_ids()
    records: list[EventRecord] = []
    unknown: list[str] = []

    if stripped[0] == "{":
        for lineno, raw in enumerate(text.splitlines(), start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed NDJSON: {exc.msg}", lineno) from None
            try:
                stay_id = str(obj["stay_id"])
                time = obj["time_hours"]
                concept = str(obj["concept"])
                value = obj["value"]
            except KeyError as exc:
                raise ParseError(f"missing key {exc.args[0]!r}", lineno) from None
            if not isinstance(time, (int, float)) or not isinstance(value, (int, float)):
                raise ParseError("time_hours and value must be numbers", lineno)
            if not (math.isfinite(time) and math.isfinite(value)):
                raise ParseError("non-finite time or value", lineno)
            if concept not in known:
                unknown.append(concept)
                continue
            records.append(EventRecord(stay_id, float(time), concept, float(value)))
    else:
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["stay_id", "time_hours", "concept", "value"]:
            raise ParseError(f"bad event CSV header: {header}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", lineno)
            stay_id, time_s, concept, value_s = (f.strip() for f in row)
            time = _parse_float(time_s, "time_hours", lineno)
            value = _parse_float(value_s, "value", lineno)
            if concept not in known:
                unknown.append(concept)
                continue
            records.append(EventRecord(stay_id, time, concept, value))

    if unknown:
        listing = ", ".join(sorted(set(unknown)))
        raise ParseError(f"unknown concept ids: {listing}")
    return records


def serialize_events(records: Iterable[EventRecord]) -> str:
    """Event CSV text; inverse of `parse_events` on well-formed lists."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["stay_id", "time_hours", "concept", "value"])
    for r in records:
        writer.writerow([r.stay_id, repr(r.time), r.concept_id, repr(r.value)])
    return out.getvalue()


_STATICS_HEADER = [
    "stay_id",
    "domain",
    "age",
    "sex",
    "height",
    "weight",
    "icu_discharge_hours",
    "died_in_icu",
    "death_time_hours",
]


def parse_statics(text: str) -> list[StayStatic]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return []
    header = [h.strip() for h in header]
    has_hospital = header == _STATICS_HEADER + ["hospital_id"]
    if not has_hospital and header != _STATICS_HEADER:
        raise ParseError(f"bad statics CSV header: {header}", 1)

    def opt_float(s: str, what: str, lineno: int) -> Optional[float]:
        return None if s == "" else _parse_float(s, what, lineno)

    out: list[StayStatic] = []
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        expected = len(header)
        if len(row) != expected:
            raise ParseError(f"expected {expected} fields, got {len(row)}", lineno)
        row = [f.strip() for f in row]
        sex = row[3] if row[3] else SEX_UNKNOWN
        if sex not in (SEX_FEMALE, SEX_MALE, SEX_UNKNOWN):
            raise ParseError(f"bad sex value {row[3]!r}", lineno)
        died_s = row[7].lower()
        if died_s not in ("0", "1", "true", "false", ""):
            raise ParseError(f"bad died_in_icu value {row[7]!r}", lineno)
        out.append(
            StayStatic(
                stay_id=row[0],
                domain_id=row[1],
                age=opt_float(row[2], "age", lineno),
                sex=sex,
                height=opt_float(row[4], "height", lineno),
                weight=opt_float(row[5], "weight", lineno),
                icu_discharge=opt_float(row[6], "icu_discharge_hours", lineno),
                died_in_icu=died_s in ("1", "true"),
                death_time=opt_float(row[8], "death_time_hours", lineno),
                hospital_id=row[9] if has_hospital and row[9] else None,
            )
        )
    return out


def serialize_statics(statics: Iterable[StayStatic]) -> str:
    statics = list(statics)
    has_hospital = any(s.hospital_id is not None for s in statics)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(_STATICS_HEADER + (["hospital_id"] if has_hospital else []))

    def fmt(x: Optional[float]) -> str:
        return "" if x is None else repr(x)

    for s in statics:
        row = [
            s.stay_id,
            s.domain_id,
            fmt(s.age),
            s.sex if s.sex != SEX_UNKNOWN else "",
            fmt(s.height),
            fmt(s.weight),
            fmt(s.icu_discharge),
            "1" if s.died_in_icu else "0",
            fmt(s.death_time),
        ]
        if has_hospital:
            row.append(s.hospital_id or "")
        writer.writerow(row)
    return out.getvalue()


def assemble_stays(statics: list[StayStatic], events: list[EventRecord]) -> list[StayTimeline]:
    """Partition events by stay and time-sort them (stable within ties).

    Every event must belong to a known stay; stays without events are still
    returned so the cohort stage can count them.
    """
    by_id: dict[str, StayTimeline] = {}
    for s in statics:
        if s.stay_id in by_id:
            raise ValueError(f"duplicate stay_id {s.stay_id!r} in statics")
        by_id[s.stay_id] = StayTimeline(static=s)
    for e in events:
        tl = by_id.get(e.stay_id)
        if tl is None:
            raise ValueError(f"event references unknown stay_id {e.stay_id!r}")
        tl.events.append(e)
    for tl in by_id.values():
        tl.events.sort(key=lambda e: e.time)  # stable: ties keep input order
    return list(by_id.values())


def apply_plausibility_filter(
    timeline: StayTimeline, catalog: ConceptCatalog
) -> tuple[StayTimeline, int]:
    """Drop events whose value falls outside the concept's plausible range.

    Dropping equals set-to-missing under the sparse representation. Concepts
    without a range (and the reserved label concepts) pass through untouched.
    """
    kept: list[EventRecord] = []
    removed = 0
    for e in timeline.events:
        if e.concept_id in catalog:
            rng = catalog[e.concept_id].plausible_range
            if rng is not None and not (rng[0] <= e.value <= rng[1]):
                removed += 1
                continue
        kept.append(e)
    return StayTimeline(static=timeline.static, events=kept), removed
