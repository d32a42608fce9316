"""Task outcomes and per-hour label tracks.

Three prediction targets are supported: death during the ICU stay (one
label per stay, predicted at hour 24), kidney injury onset, and sepsis
onset (hourly tracks).  Hourly tracks run from hour 0 to the last hour
before the stay ends, capped at hour 168 and, when an onset exists, at
``floor(onset + 6)``.  Hours within six hours of the onset on either side
are positive, boundary inclusive.

The track type carries a ``censored`` state so downstream consumers can
mask hours out, but derivation never produces it: every emitted hour is
``negative`` or ``positive``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

from .records import StayTimeline

TASKS = ("mortality", "aki", "sepsis")

NEGATIVE = "negative"
POSITIVE = "positive"
CENSORED = "censored"

TRACK_CAP_HOURS = 168
POSITIVE_WINDOW_HOURS = 6.0
MORTALITY_PREDICTION_HOUR = 24


@dataclass(frozen=True)
class OnsetResult:
    """Earliest qualifying onset, or ``onset_time=None`` when there is none.

    ``stage_or_reason`` records which rule fired, e.g. ``kdigo_stage_2``.
    Negative times can occur when pre-admission events trigger a rule;
    cohort filtering removes such stays before labels are consumed.
    """

    onset_time: float | None
    stage_or_reason: str | None


@dataclass(frozen=True)
class LabelTrack:
    task: str
    stay_id: str
    kind: str  # single_at_24h | hourly
    hourly_labels: tuple[str, ...] | None
    single_label: bool | None

    def hourly_arrays(self) -> tuple[list[float], list[bool]]:
        """Labels and validity mask; censored hours are masked out."""
        if self.kind != "hourly":
            raise ValueError("hourly_arrays is only defined for hourly tracks")
        values = [1.0 if s == POSITIVE else 0.0 for s in self.hourly_labels]
        mask = [s != CENSORED for s in self.hourly_labels]
        return values, mask


def mortality_label(stay: StayTimeline) -> bool:
    return stay.static.died_in_icu


def build_label_track(
    stay: StayTimeline, task: str, onset: OnsetResult | None = None
) -> LabelTrack:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    sid = stay.static.stay_id
    if task == "mortality":
        return LabelTrack(task, sid, "single_at_24h", None, mortality_label(stay))

    last = min(TRACK_CAP_HOURS, math.ceil(stay.static.end_time()) - 1)
    onset_time = onset.onset_time if onset is not None else None
    if onset_time is not None:
        last = min(last, math.floor(onset_time + POSITIVE_WINDOW_HOURS))
    states = []
    for hour in range(last + 1):
        positive = (
            onset_time is not None
            and onset_time - POSITIVE_WINDOW_HOURS <= hour <= onset_time + POSITIVE_WINDOW_HOURS
        )
        states.append(POSITIVE if positive else NEGATIVE)
    return LabelTrack(task, sid, "hourly", tuple(states), None)


def write_label_file(stream, tracks: list[LabelTrack]) -> None:
    writer = csv.writer(stream)
    writer.writerow(["stay_id", "task", "hour", "label"])
    for track in tracks:
        if track.kind == "single_at_24h":
            writer.writerow(
                [track.stay_id, track.task, MORTALITY_PREDICTION_HOUR, int(track.single_label)]
            )
            continue
        for hour, state in enumerate(track.hourly_labels):
            if state == CENSORED:
                continue
            writer.writerow([track.stay_id, track.task, hour, int(state == POSITIVE)])


def read_label_file(stream) -> list[tuple[str, str, int, int]]:
    reader = csv.reader(stream)
    header = next(reader, None)
    if header != ["stay_id", "task", "hour", "label"]:
        raise ValueError(f"unexpected label file header: {header}")
    rows = []
    for row in reader:
        rows.append((row[0], row[1], int(row[2]), int(row[3])))
    return rows


def write_onset_file(stream, entries: list[tuple[str, str, float | None]]) -> None:
    writer = csv.writer(stream)
    writer.writerow(["stay_id", "task", "onset_hour"])
    for stay_id, task, onset_hour in entries:
        writer.writerow([stay_id, task, "" if onset_hour is None else repr(onset_hour)])


def read_onset_file(stream) -> list[tuple[str, str, float | None]]:
    reader = csv.reader(stream)
    header = next(reader, None)
    if header != ["stay_id", "task", "onset_hour"]:
        raise ValueError(f"unexpected onset file header: {header}")
    return [
        (row[0], row[1], float(row[2]) if row[2] != "" else None) for row in reader
    ]
