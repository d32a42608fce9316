"""Cohort selection: base data-quality filters and task eligibility.

Criteria apply in a fixed order and the first failing one claims the
stay, so the report counts partition the input.  Base criteria:

1. invalid_stay_times: missing discharge or non-positive stay length
2. los_under_6h
3. under_4_measured_bins: catalogue features seen in < 4 distinct hours
4. measurement_gap_12h: >= 12 consecutive hours without any catalogue
   feature, counting the spans from admission to the first measurement
   and from the last measurement to the end of the stay

Only the 48 dynamic catalogue concepts count as measurements; the
auxiliary sofa/abx/culture streams do not.  A gap of exactly 12h
already excludes (>= rather than >).

Task criteria: mortality requires the stay to last through hour 30;
AKI and sepsis require the onset (when present) to fall at hour 6 or
later and inside the stay, AKI additionally excludes a baseline
creatinine above 4 mg/dL (last pre-admission value if one exists,
otherwise the earliest in-stay value).  When statics carry hospital
ids, hospitals without a single case are dropped afterwards.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

from .catalog import ConceptCatalog
from .labels import OnsetResult
from .records import StayTimeline

GAP_THRESHOLD_HOURS = 12.0
MIN_STAY_HOURS = 6.0
MIN_MEASURED_BINS = 4
MORTALITY_MIN_HOURS = 30.0
MIN_ONSET_HOUR = 6.0
BASELINE_CREA_LIMIT = 4.0

BASE_CRITERIA = (
    "invalid_stay_times",
    "los_under_6h",
    "under_4_measured_bins",
    "measurement_gap_12h",
)

TASK_CRITERIA = {
    "mortality": ("ends_before_30h",),
    "aki": (
        "onset_before_6h",
        "baseline_creatinine_over_4",
        "onset_outside_icu",
        "hospital_without_cases",
    ),
    "sepsis": (
        "onset_before_6h",
        "onset_outside_icu",
        "hospital_without_cases",
    ),
}


@dataclass
class ExclusionReport:
    criteria: tuple[str, ...]
    n_input: int = 0
    n_included: int = 0
    domains: tuple = ()
    counts: dict = field(default_factory=dict)
    by_domain: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)  # (stay_id, criterion)

    def record(self, stay: StayTimeline, criterion: str) -> None:
        self.counts[criterion] = self.counts.get(criterion, 0) + 1
        per_domain = self.by_domain.setdefault(criterion, {})
        domain = stay.static.domain_id
        per_domain[domain] = per_domain.get(domain, 0) + 1
        self.excluded.append((stay.static.stay_id, criterion))

    def check_partition(self) -> None:
        total = sum(self.counts.values()) + self.n_included
        if total != self.n_input:
            raise AssertionError(
                f"report does not partition the input: {total} != {self.n_input}"
            )


def measured_hourly_bins(stay: StayTimeline, catalog: ConceptCatalog) -> set[int]:
    los = stay.static.end_time()
    dynamic = set(catalog.dynamic_ids)
    return {
        math.floor(e.time)
        for e in stay.events
        if e.concept_id in dynamic and 0 <= e.time < los
    }


def _max_measurement_gap(stay: StayTimeline, catalog: ConceptCatalog) -> float:
    los = stay.static.end_time()
    dynamic = set(catalog.dynamic_ids)
    times = sorted(e.time for e in stay.events if e.concept_id in dynamic and 0 <= e.time <= los)
    edges = [0.0] + times + [los]
    return max(b - a for a, b in zip(edges, edges[1:]))


def _failing_base_criterion(stay: StayTimeline, catalog: ConceptCatalog) -> str | None:
    end = stay.static.end_time()
    if stay.static.icu_discharge is None or end is None or end <= 0:
        return "invalid_stay_times"
    if end < MIN_STAY_HOURS:
        return "los_under_6h"
    if len(measured_hourly_bins(stay, catalog)) < MIN_MEASURED_BINS:
        return "under_4_measured_bins"
    if _max_measurement_gap(stay, catalog) >= GAP_THRESHOLD_HOURS:
        return "measurement_gap_12h"
    return None


def apply_base_exclusions(
    stays: list[StayTimeline], catalog: ConceptCatalog
) -> tuple[list[StayTimeline], ExclusionReport]:
    report = ExclusionReport(
        BASE_CRITERIA,
        n_input=len(stays),
        domains=tuple(sorted({s.static.domain_id for s in stays})),
    )
    included = []
    for stay in stays:
        criterion = _failing_base_criterion(stay, catalog)
        if criterion is None:
            included.append(stay)
        else:
            report.record(stay, criterion)
    report.n_included = len(included)
    report.check_partition()
    return included, report


def exclusion_baseline_creatinine(stay: StayTimeline) -> float | None:
    """Last pre-admission creatinine if any, else the earliest in-stay one."""
    series = stay.series("crea")
    before = [v for t, v in series if t < 0]
    if before:
        return before[-1]
    after = [v for t, v in series if t >= 0]
    return after[0] if after else None


def _failing_task_criterion(
    stay: StayTimeline, task: str, onset: OnsetResult | None
) -> str | None:
    end = stay.static.end_time()
    if task == "mortality":
        return "ends_before_30h" if end < MORTALITY_MIN_HOURS else None
    onset_time = onset.onset_time if onset is not None else None
    if onset_time is not None and onset_time < MIN_ONSET_HOUR:
        return "onset_before_6h"
    if task == "aki":
        baseline = exclusion_baseline_creatinine(stay)
        if baseline is not None and baseline > BASELINE_CREA_LIMIT:
            return "baseline_creatinine_over_4"
    if onset_time is not None and (onset_time < 0 or onset_time > end):
        return "onset_outside_icu"
    return None


def apply_task_exclusions(
    stays: list[StayTimeline],
    task: str,
    onsets: dict[str, OnsetResult] | None = None,
) -> tuple[list[StayTimeline], ExclusionReport]:
    if task not in TASK_CRITERIA:
        raise ValueError(f"unknown task {task!r}")
    onsets = onsets or {}
    report = ExclusionReport(
        TASK_CRITERIA[task],
        n_input=len(stays),
        domains=tuple(sorted({s.static.domain_id for s in stays})),
    )
    survivors = []
    for stay in stays:
        onset = onsets.get(stay.static.stay_id)
        criterion = _failing_task_criterion(stay, task, onset)
        if criterion is None:
            survivors.append(stay)
        else:
            report.record(stay, criterion)

    included = survivors
    if task in ("aki", "sepsis"):
        # Hospitals (where identified) must have at least one case left.
        case_hospitals = set()
        for stay in survivors:
            hospital = stay.static.hospital_id
            onset = onsets.get(stay.static.stay_id)
            if hospital is not None and onset is not None and onset.onset_time is not None:
                case_hospitals.add((stay.static.domain_id, hospital))
        included = []
        for stay in survivors:
            hospital = stay.static.hospital_id
            if hospital is not None and (stay.static.domain_id, hospital) not in case_hospitals:
                report.record(stay, "hospital_without_cases")
            else:
                included.append(stay)

    report.n_included = len(included)
    report.check_partition()
    return included, report


def write_attrition_csv(stream, reports: list[tuple[str, ExclusionReport]]) -> None:
    """Rows `criterion,domain,n_excluded`; zero counts are kept so the
    file shape is stable across runs.  ``reports`` pairs a stage name
    ("base", task names) with its report; the stage prefixes the
    criterion as stage/criterion."""
    writer = csv.writer(stream)
    writer.writerow(["criterion", "domain", "n_excluded"])
    for stage, report in reports:
        for criterion in report.criteria:
            per_domain = report.by_domain.get(criterion, {})
            for domain in report.domains:
                writer.writerow(
                    [f"{stage}/{criterion}", domain, per_domain.get(domain, 0)]
                )
