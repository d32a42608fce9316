"""Sepsis-3 onset: an acute SOFA rise close to suspected infection.

Organ dysfunction is flagged at a SOFA measurement time when the score
sits at least 2 points above the lowest value in the trailing 24 hours
(window half-open on the left, current value included).  Suspicion of
infection pairs a qualifying antibiotic episode with a culture; sites
without microbiology data use the antibiotic episodes alone.  Onset is
the earliest dysfunction within 48 hours before or 24 hours after any
suspicion time.
"""

from __future__ import annotations

from dataclasses import dataclass

from .labels import OnsetResult
from .records import StayTimeline

SUSPICION_MODES = ("abx_and_culture", "abx_only")

# Antibiotic events with this value mark a whole-stay prescription rather
# than a single administered dose.
PRESCRIPTION_VALUE = 2.0

MAX_DOSE_GAP_HOURS = 24.0
MIN_EPISODE_SPAN_HOURS = 72.0
CULTURE_AFTER_ABX_HOURS = 24.0
ABX_AFTER_CULTURE_HOURS = 72.0
DYSFUNCTION_BEFORE_HOURS = 48.0
DYSFUNCTION_AFTER_HOURS = 24.0


@dataclass(frozen=True)
class SuspicionEvent:
    time: float
    source: str  # abx_first | culture_first


def antibiotic_episodes(
    abx_events: list[tuple[float, float]],
    death_time: float | None,
    discharge_time: float,
) -> list[tuple[float, float]]:
    """Treatment episodes that look therapeutic rather than prophylactic.

    Dose chains (inter-dose gaps <= 24h) qualify when they span at least
    72 hours, or when death follows the last dose within 24 hours.
    Prescription-style events qualify outright and extend to the end of
    the stay.
    """
    stay_end = death_time if death_time is not None else discharge_time
    episodes = [(t, stay_end) for t, v in abx_events if v == PRESCRIPTION_VALUE]
    doses = sorted(t for t, v in abx_events if v != PRESCRIPTION_VALUE)
    i = 0
    while i < len(doses):
        j = i
        while j + 1 < len(doses) and doses[j + 1] - doses[j] <= MAX_DOSE_GAP_HOURS:
            j += 1
        start, last = doses[i], doses[j]
        truncated_by_death = death_time is not None and death_time - last <= MAX_DOSE_GAP_HOURS
        if last - start >= MIN_EPISODE_SPAN_HOURS or truncated_by_death:
            episodes.append((start, last))
        i = j + 1
    return sorted(episodes)


def suspicion_of_infection(
    episodes: list[tuple[float, float]],
    culture_times: list[float],
    mode: str = "abx_and_culture",
) -> list[SuspicionEvent]:
    if mode not in SUSPICION_MODES:
        raise ValueError(f"unknown suspicion mode {mode!r}")
    if mode == "abx_only":
        return [SuspicionEvent(start, "abx_first") for start, _ in sorted(episodes)]
    found = set()
    for start, _ in episodes:
        for culture in culture_times:
            if 0.0 <= culture - start <= CULTURE_AFTER_ABX_HOURS:
                found.add(SuspicionEvent(start, "abx_first"))
            elif 0.0 <= start - culture <= ABX_AFTER_CULTURE_HOURS:
                found.add(SuspicionEvent(culture, "culture_first"))
    return sorted(found, key=lambda s: (s.time, s.source))


def sofa_dysfunction_times(sofa_series: list[tuple[float, float]]) -> list[float]:
    times = []
    for t, score in sofa_series:
        low = min(v for u, v in sofa_series if t - 24.0 < u <= t)
        if score - low >= 2.0:
            times.append(t)
    return times


def sepsis_onset(stay: StayTimeline, mode: str = "abx_and_culture") -> OnsetResult:
    static = stay.static
    death = static.death_time if static.died_in_icu else None
    episodes = antibiotic_episodes(stay.series("abx"), death, static.icu_discharge)
    cultures = [t for t, _ in stay.series("culture")]
    suspicions = suspicion_of_infection(episodes, cultures, mode)
    if not suspicions:
        return OnsetResult(None, None)
    for d in sofa_dysfunction_times(stay.series("sofa")):
        for s in suspicions:
            if s.time - DYSFUNCTION_BEFORE_HOURS <= d <= s.time + DYSFUNCTION_AFTER_HOURS:
                return OnsetResult(d, "sofa_delta")
    return OnsetResult(None, None)
