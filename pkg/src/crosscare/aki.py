"""KDIGO creatinine/urine staging and AKI onset detection.

Staging runs on an integer-hour grid: the stage at hour t is computed from
every event with time <= t, so pre-admission measurements participate via
their negative times.  Lookback windows are half-open on the left, e.g. the
seven-day creatinine baseline at t covers (t-168, t].

The sustained low-urine criteria hold at hour t when every urine
observation in the trailing window satisfies the rate bound and the window
has no observation gap of 12 hours or more, counting the gaps to both
window edges.  Renal replacement therapy is not among the recorded
concepts, so that route to stage 3 is unavailable; the onset target is
stage >= 1, where the creatinine and urine rules dominate.
"""

from __future__ import annotations

import math
from bisect import bisect_right

from .labels import OnsetResult
from .records import StayTimeline

ASSUMED_WEIGHT_KG = 75.0
BASELINE_WINDOW_HOURS = 168.0
ACUTE_WINDOW_HOURS = 48.0
MAX_URINE_GAP_HOURS = 24.0
COVERAGE_GAP_HOURS = 12.0

Series = list[tuple[float, float]]


def kdigo_baseline_creatinine(crea_series: Series, t: float) -> float | None:
    """Lowest creatinine in (t-168, t], or None when the window is empty."""
    times = [time for time, _ in crea_series]
    lo = bisect_right(times, t - BASELINE_WINDOW_HOURS)
    hi = bisect_right(times, t)
    if lo == hi:
        return None
    return min(value for _, value in crea_series[lo:hi])


def urine_rates(urine_series: Series, weight_kg: float | None) -> Series:
    """Per-kg output rate at each measurement.

    The rate divides the volume by the hours since the previous
    measurement.  The first measurement, and any measurement following a
    gap of more than 24 hours (or a non-advancing timestamp), divides by
    one hour instead.
    """
    weight = weight_kg if weight_kg is not None and weight_kg > 0 else ASSUMED_WEIGHT_KG
    rates = []
    prev_time = None
    for time, volume in urine_series:
        gap = None if prev_time is None else time - prev_time
        hours = gap if gap is not None and 0 < gap <= MAX_URINE_GAP_HOURS else 1.0
        rates.append((time, volume / hours / weight))
        prev_time = time
    return rates


def urine_rate(urine_series: Series, weight_kg: float | None, t: float) -> float | None:
    """Rate of the (last) measurement recorded exactly at time t."""
    result = None
    for time, rate in urine_rates(urine_series, weight_kg):
        if time == t:
            result = rate
    return result


def _sustained(rates: Series, t: float, duration: float, bound: float, anuria: bool) -> bool:
    window = [(time, rate) for time, rate in rates if t - duration < time <= t]
    if not window:
        return False
    for _, rate in window:
        if not (rate <= bound if anuria else rate < bound):
            return False
    edges = [t - duration] + [time for time, _ in window] + [t]
    return all(b - a < COVERAGE_GAP_HOURS for a, b in zip(edges, edges[1:]))


def _stage_from_rates(crea_series: Series, rates: Series, t: float) -> int:
    stage = 0
    past = [(time, value) for time, value in crea_series if time <= t]
    if past:
        current = past[-1][1]
        baseline = kdigo_baseline_creatinine(crea_series, t)
        if baseline is not None and baseline > 0:
            ratio = current / baseline
            if ratio >= 3.0:
                stage = 3
            elif ratio >= 2.0:
                stage = 2
            elif ratio >= 1.5:
                stage = 1
        acute = [value for time, value in past if time > t - ACUTE_WINDOW_HOURS]
        if acute:
            floor = min(acute)
            if current >= 4.0 and floor < 4.0:
                stage = 3
            elif current - floor >= 0.3:
                stage = max(stage, 1)
    if stage < 3 and (
        _sustained(rates, t, 24.0, 0.3, anuria=False)
        or _sustained(rates, t, 12.0, 0.0, anuria=True)
    ):
        stage = 3
    if stage < 2 and _sustained(rates, t, 12.0, 0.5, anuria=False):
        stage = 2
    if stage < 1 and _sustained(rates, t, 6.0, 0.5, anuria=False):
        stage = 1
    return stage


def kdigo_stage(
    crea_series: Series, urine_series: Series, weight_kg: float | None, t: float
) -> int:
    return _stage_from_rates(crea_series, urine_rates(urine_series, weight_kg), t)


def aki_onset(stay: StayTimeline) -> OnsetResult:
    """Earliest integer hour of the stay with KDIGO stage >= 1."""
    crea = stay.series("crea")
    rates = urine_rates(stay.series("urine"), stay.static.weight)
    for hour in range(math.floor(stay.static.end_time()) + 1):
        stage = _stage_from_rates(crea, rates, float(hour))
        if stage >= 1:
            return OnsetResult(float(hour), f"kdigo_stage_{stage}")
    return OnsetResult(None, None)
