"""Synthetic multi-site ICU populations with controllable domain shift.

Real event streams cannot ship with the code, so experiments run on generated
ones. Each stay draws a latent severity score; severity tilts the measured
vitals and labs through fixed per-concept loadings and, together with a small
set of per-concept coefficients, sets the probability of each outcome (death,
kidney injury, sepsis). Because the same latent variable shapes both features
and outcomes, a sequence model can genuinely learn to predict, and because the
outcome mechanism is known, domain shift can be dialled in precisely:

* `feature_mean_offsets` move the marginal distribution of chosen concepts in
  one domain (covariate shift),
* per-domain `outcome_params` with perturbed coefficients change how features
  map to outcomes (concept shift),
* `prevalence_multiplier` scales outcome probabilities, and
  `measurement_rate_multiplier` thins or densifies the event streams.

Positive stays are not labelled directly. The generator plants the physiology
that the label rules react to (a creatinine ramp and urine drop for kidney
injury, a SOFA step plus a qualifying antibiotic/culture pattern for sepsis),
then the ordinary label derivation runs on the output and decides. A planted
case can legitimately fall out again, e.g. when the stay is too short for a
72 h antibiotic course.

Determinism: every random draw comes from a Philox generator keyed by
SHA-256(seed, domain_id, stay_index, stream_id), so per-stay generation is
order-independent and identical across runs and platforms.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .catalog import LAB, VITAL, default_catalog
from .labels import TASKS
from .records import SEX_FEMALE, SEX_MALE, EventRecord, StayStatic

MAX_SEED = 2**64 - 1

# Per-concept (typical level, between-stay sd, measurement noise sd). Values
# sit comfortably inside the catalogue's plausible ranges so the plausibility
# filter never bites on clean synthetic data.
CONCEPT_LEVELS: dict[str, tuple[float, float, float]] = {
    "sbp": (120.0, 18.0, 8.0),
    "dbp": (65.0, 11.0, 6.0),
    "hr": (86.0, 14.0, 6.0),
    "map": (82.0, 12.0, 6.0),
    "o2sat": (96.5, 1.8, 1.0),
    "resp": (18.0, 4.0, 2.0),
    "temp": (36.9, 0.5, 0.25),
    "alb": (3.4, 0.5, 0.2),
    "alp": (95.0, 40.0, 12.0),
    "alt": (45.0, 30.0, 8.0),
    "ast": (50.0, 35.0, 9.0),
    "be": (0.0, 3.0, 1.0),
    "bicar": (24.0, 3.5, 1.2),
    "bili": (0.9, 0.6, 0.15),
    "bili_dir": (0.3, 0.25, 0.08),
    "bnd": (6.0, 4.0, 1.5),
    "bun": (22.0, 9.0, 3.0),
    "ca": (8.6, 0.6, 0.25),
    "cai": (1.15, 0.08, 0.04),
    "crea": (1.05, 0.22, 0.03),
    "ck": (180.0, 120.0, 30.0),
    "ckmb": (4.0, 2.5, 0.8),
    "cl": (103.0, 4.0, 1.5),
    "pco2": (40.0, 6.0, 2.0),
    "crp": (60.0, 45.0, 10.0),
    "fgn": (350.0, 90.0, 25.0),
    "glu": (135.0, 35.0, 12.0),
    "hgb": (11.5, 1.8, 0.5),
    "inr_pt": (1.2, 0.3, 0.08),
    "lact": (1.6, 0.8, 0.2),
    "lymph": (18.0, 7.0, 2.0),
    "mch": (30.0, 2.5, 0.8),
    "mchc": (33.0, 1.5, 0.5),
    "mcv": (90.0, 6.0, 1.5),
    "methb": (1.0, 0.5, 0.2),
    "mg": (2.0, 0.3, 0.12),
    "neut": (72.0, 9.0, 2.5),
    "po2": (95.0, 25.0, 8.0),
    "ptt": (32.0, 8.0, 2.5),
    "ph": (7.38, 0.05, 0.02),
    "phos": (3.4, 0.8, 0.3),
    "plt": (220.0, 70.0, 15.0),
    "k": (4.1, 0.45, 0.15),
    "na": (139.0, 3.5, 1.2),
    "tnt": (0.3, 0.5, 0.05),
    "wbc": (10.5, 3.5, 1.0),
    "fio2": (42.0, 9.0, 3.0),
}

# Physical units added per +1 sd of latent severity. Signs follow clinical
# direction (tachycardia, hypotension, acidosis, rising lactate and so on).
SEVERITY_LOADINGS: dict[str, float] = {
    "hr": 10.0,
    "resp": 3.5,
    "sbp": -13.0,
    "dbp": -7.0,
    "map": -9.0,
    "temp": 0.4,
    "o2sat": -1.8,
    "lact": 0.9,
    "wbc": 2.8,
    "crea": 0.30,
    "bun": 7.0,
    "bnd": 3.0,
    "crp": 35.0,
    "plt": -45.0,
    "bicar": -2.2,
    "be": -2.2,
    "ph": -0.05,
    "alb": -0.35,
    "inr_pt": 0.22,
    "bili": 0.35,
    "glu": 18.0,
    "hgb": -0.7,
    "po2": -12.0,
    "pco2": 2.5,
    "tnt": 0.25,
    "neut": 5.0,
    "lymph": -4.5,
    "na": 1.0,
    "k": 0.18,
    "fio2": 7.0,
}

# Extra drift on top of the severity loadings, ramping in over the 8 hours
# before a planted onset and then holding. This is what makes an upcoming
# onset visible to an hourly prediction model.
PRODROME_DRIFT: dict[str, dict[str, float]] = {
    "aki": {"hr": 6.0, "lact": 0.6, "crea": 0.0},  # crea handled by the ramp
    "sepsis": {"hr": 9.0, "resp": 3.5, "lact": 1.0, "temp": 0.6, "wbc": 4.0},
}

_URINE_SEVERITY_COEF = -0.15  # mL/kg/h per severity sd
_URINE_FLOOR_HEALTHY = 0.62  # keeps noise clear of the 0.5 oliguria bound
_AKI_URINE_DROP = 0.85  # post-onset drop in mL/kg/h for planted cases
_AKI_CREA_RISE = 1.15  # peak fractional creatinine rise for planted cases
_SOFA_STEP = 3  # planted sepsis step, comfortably over the 2-point rule


def default_measurement_rates() -> dict[str, float]:
    """Expected measurements per hour for every dynamic concept."""
    rates: dict[str, float] = {}
    for concept in default_catalog().entries:
        if concept.kind == VITAL:
            rates[concept.concept_id] = 0.7
        elif concept.kind == LAB:
            rates[concept.concept_id] = 0.06
    rates["fio2"] = 0.25
    rates["urine"] = 0.5
    return rates


@dataclass(frozen=True)
class OutcomeParams:
    """Latent-risk model for one task: logit = intercept + slope * severity
    + sum of coefficient * standardised concept deviation."""

    intercept: float
    severity_slope: float
    coefficients: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for concept_id in self.coefficients:
            if concept_id not in CONCEPT_LEVELS:
                raise ValueError(f"outcome coefficient for unknown concept {concept_id!r}")


def default_outcome_params() -> dict[str, OutcomeParams]:
    # Intercepts and slopes are set so base prevalences sit near 12-15% and a
    # prevalence_multiplier of 2 roughly doubles them before the 0.97 cap bites.
    return {
        "mortality": OutcomeParams(-2.8, 1.0, {"lact": 0.4, "map": -0.3}),
        "aki": OutcomeParams(-2.4, 0.7, {"crea": 0.5, "bun": 0.3}),
        "sepsis": OutcomeParams(-2.5, 1.0, {"wbc": 0.4, "temp": 0.3}),
    }


@dataclass(frozen=True)
class ShiftKnobs:
    """Domain-shift dials; the defaults mean 'no shift'."""

    feature_mean_offsets: Mapping[str, float] = field(default_factory=dict)
    prevalence_multiplier: float = 1.0
    measurement_rate_multiplier: float = 1.0

    def __post_init__(self) -> None:
        if not self.prevalence_multiplier > 0:
            raise ValueError("prevalence_multiplier must be > 0")
        if self.measurement_rate_multiplier < 0:
            raise ValueError("measurement_rate_multiplier must be >= 0")
        for concept_id in self.feature_mean_offsets:
            if concept_id not in CONCEPT_LEVELS and concept_id != "urine":
                raise ValueError(f"feature_mean_offsets for unknown concept {concept_id!r}")


@dataclass(frozen=True)
class DomainProfile:
    domain_id: str
    n_stays: int
    los_log_mean: float = math.log(48.0)
    los_log_sd: float = 0.5
    measurement_rates: Optional[Mapping[str, float]] = None
    outcome_params: Optional[Mapping[str, OutcomeParams]] = None
    shift: ShiftKnobs = field(default_factory=ShiftKnobs)
    n_hospitals: int = 0

    def __post_init__(self) -> None:
        if not self.domain_id:
            raise ValueError("domain_id must be non-empty")
        if self.n_stays < 1:
            raise ValueError("n_stays must be >= 1")
        if not self.los_log_sd >= 0:
            raise ValueError("los_log_sd must be >= 0")
        if self.n_hospitals < 0:
            raise ValueError("n_hospitals must be >= 0")
        if self.measurement_rates is not None:
            known = default_measurement_rates()
            for concept_id, rate in self.measurement_rates.items():
                if concept_id not in known:
                    raise ValueError(f"measurement rate for unknown concept {concept_id!r}")
                if rate < 0:
                    raise ValueError(f"negative measurement rate for {concept_id!r}")
        if self.outcome_params is not None:
            for task in self.outcome_params:
                if task not in TASKS:
                    raise ValueError(f"outcome params for unknown task {task!r}")

    def resolved_rates(self) -> dict[str, float]:
        rates = default_measurement_rates()
        if self.measurement_rates is not None:
            rates.update(self.measurement_rates)
        mult = self.shift.measurement_rate_multiplier
        return {k: v * mult for k, v in rates.items()}

    def resolved_outcome_params(self) -> dict[str, OutcomeParams]:
        params = default_outcome_params()
        if self.outcome_params is not None:
            params.update(self.outcome_params)
        return params


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int
    profiles: tuple[DomainProfile, ...]

    def __post_init__(self) -> None:
        if not 0 <= self.seed <= MAX_SEED:
            raise ValueError("seed must fit in 64 bits")
        ids = [p.domain_id for p in self.profiles]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate domain_id in generator config")


def _stream_rng(seed: int, domain_id: str, stay_index: int, stream_id: str) -> np.random.Generator:
    # 128-bit Philox key from a hash of the full coordinate, so streams are
    # independent and insertion of new streams never reshuffles existing ones.
    tag = f"{seed}|{domain_id}|{stay_index}|{stream_id}".encode()
    digest = hashlib.sha256(tag).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _ramp(times: np.ndarray, start: float, width: float) -> np.ndarray:
    """Piecewise-linear 0 -> 1 ramp starting at `start`, plateauing after `width`."""
    return np.clip((times - start) / width, 0.0, 1.0)


@dataclass
class _StayPlan:
    severity: float
    deviations: dict[str, float]
    los: float
    died: bool
    aki_target: Optional[float]
    sepsis_target: Optional[float]
    baseline_sofa: int


def _plan_outcomes(
    profile: DomainProfile,
    seed: int,
    stay_index: int,
    severity: float,
    deviations: dict[str, float],
    los: float,
) -> _StayPlan:
    rng = _stream_rng(seed, profile.domain_id, stay_index, "outcome")
    params = profile.resolved_outcome_params()
    offsets = profile.shift.feature_mean_offsets

    probs: dict[str, float] = {}
    for task in TASKS:
        p = params[task]
        logit = p.intercept + p.severity_slope * severity
        for concept_id, coef in p.coefficients.items():
            base, personal_sd, _ = CONCEPT_LEVELS[concept_id]
            total_dev = (
                deviations[concept_id]
                + offsets.get(concept_id, 0.0)
                + SEVERITY_LOADINGS.get(concept_id, 0.0) * severity
            )
            logit += coef * total_dev / personal_sd
        prob = 1.0 / (1.0 + math.exp(-logit))
        probs[task] = min(prob * profile.shift.prevalence_multiplier, 0.97)

    draws = rng.uniform(size=3)
    died = bool(draws[0] < probs["mortality"])
    aki_case = bool(draws[1] < probs["aki"])
    sepsis_case = bool(draws[2] < probs["sepsis"])

    aki_target = None
    if aki_case and los >= 14.0:
        aki_target = float(rng.uniform(9.0, min(los - 2.0, 110.0)))
    else:
        rng.uniform()  # burn the draw so later streams stay aligned
    sepsis_target = None
    if sepsis_case and los >= 12.0:
        sepsis_target = float(rng.uniform(7.0, min(los - 3.0, 60.0)))
    else:
        rng.uniform()

    baseline_sofa = int(np.clip(round(1.5 + 1.1 * severity + rng.normal(0.0, 0.6)), 0, 10))
    return _StayPlan(severity, deviations, los, died, aki_target, sepsis_target, baseline_sofa)


def _stay_statics(profile: DomainProfile, seed: int, stay_index: int) -> StayStatic:
    rng = _stream_rng(seed, profile.domain_id, stay_index, "statics")
    age = round(float(rng.uniform(20.0, 90.0)), 1)
    sex = SEX_FEMALE if rng.uniform() < 0.5 else SEX_MALE
    height = round(float(np.clip(rng.normal(168.0, 10.0), 140.0, 210.0)), 1)
    weight = round(float(np.clip(rng.normal(80.0, 16.0), 40.0, 180.0)), 1)
    los = float(np.clip(rng.lognormal(profile.los_log_mean, profile.los_log_sd), 8.0, 240.0))
    los = round(los, 2)
    # A sliver of missing anthropometry exercises the fallback paths.
    weight_out: Optional[float] = weight if rng.uniform() >= 0.02 else None
    height_out: Optional[float] = height if rng.uniform() >= 0.02 else None
    hospital = None
    if profile.n_hospitals > 0:
        hospital = f"{profile.domain_id}-h{stay_index % profile.n_hospitals}"
    return StayStatic(
        stay_id=f"{profile.domain_id}-{stay_index:05d}",
        domain_id=profile.domain_id,
        age=age,
        sex=sex,
        height=height_out,
        weight=weight_out,
        icu_discharge=los,
        hospital_id=hospital,
    )


def _concept_series(
    profile: DomainProfile,
    seed: int,
    stay_index: int,
    plan: _StayPlan,
    rates: dict[str, float],
) -> list[tuple[float, str, float]]:
    """Vitals, labs and fio2 as (time, concept, value) tuples."""
    offsets = profile.shift.feature_mean_offsets
    catalog = default_catalog()
    out: list[tuple[float, str, float]] = []
    for group, stream in ((VITAL, "vitals"), (LAB, "labs"), ("fio2", "fio2")):
        rng = _stream_rng(seed, profile.domain_id, stay_index, stream)
        if group == "fio2":
            concept_ids = ["fio2"]
        else:
            concept_ids = [c.concept_id for c in catalog.entries if c.kind == group]
        for concept_id in concept_ids:
            rate = rates.get(concept_id, 0.0)
            n = int(rng.poisson(rate * plan.los))
            if n == 0:
                continue
            times = np.sort(rng.uniform(0.0, plan.los, size=n))
            base, _, noise_sd = CONCEPT_LEVELS[concept_id]
            level = (
                base
                + offsets.get(concept_id, 0.0)
                + plan.deviations[concept_id]
                + SEVERITY_LOADINGS.get(concept_id, 0.0) * plan.severity
            )
            values = np.full(n, level) + rng.normal(0.0, noise_sd, size=n)
            if plan.aki_target is not None:
                drift = PRODROME_DRIFT["aki"].get(concept_id, 0.0)
                if drift:
                    values += drift * _ramp(times, plan.aki_target - 8.0, 8.0)
                if concept_id == "crea":
                    values *= 1.0 + _AKI_CREA_RISE * _ramp(times, plan.aki_target - 4.0, 8.0)
            if plan.sepsis_target is not None:
                drift = PRODROME_DRIFT["sepsis"].get(concept_id, 0.0)
                if drift:
                    values += drift * _ramp(times, plan.sepsis_target - 8.0, 8.0)
            lo, hi = catalog[concept_id].plausible_range
            values = np.clip(values, lo, hi)
            digits = 1 if catalog[concept_id].kind == VITAL else 2
            for t, v in zip(times, values):
                out.append((round(float(t), 3), concept_id, round(float(v), digits)))
    return out


def _urine_series(
    profile: DomainProfile,
    seed: int,
    stay_index: int,
    plan: _StayPlan,
    rates: dict[str, float],
    weight: float,
) -> list[tuple[float, str, float]]:
    rng = _stream_rng(seed, profile.domain_id, stay_index, "urine")
    rate_per_hour = rates.get("urine", 0.0)
    if rate_per_hour <= 0:
        return []
    mean_gap = 1.0 / rate_per_hour
    base_rate = max(
        _URINE_FLOOR_HEALTHY,
        float(rng.normal(1.3, 0.25))
        + _URINE_SEVERITY_COEF * plan.severity
        + profile.shift.feature_mean_offsets.get("urine", 0.0),
    )
    out: list[tuple[float, str, float]] = []
    # The first charted volume is read as a 1-hour rate downstream (there is
    # no earlier reference point), so a sub-hour first gap would make a
    # healthy stay look oliguric. Keep the first gap comfortably over 1 h.
    t = float(rng.uniform(1.1, max(2.6, 1.5 * mean_gap)))
    prev = 0.0
    while t < plan.los:
        gap = t - prev
        target = base_rate
        if plan.aki_target is not None:
            ramp = min(max((t - (plan.aki_target - 2.0)) / 6.0, 0.0), 1.0)
            target = max(0.15, base_rate - _AKI_URINE_DROP * ramp)
        volume = target * gap * weight * (1.0 + float(rng.normal(0.0, 0.08)))
        out.append((round(t, 3), "urine", round(max(volume, 0.0), 1)))
        prev = t
        t += float(np.clip(rng.gamma(2.0, mean_gap / 2.0), 0.4, 10.0))
    return out


def _sofa_series(
    profile: DomainProfile, seed: int, stay_index: int, plan: _StayPlan
) -> list[tuple[float, str, float]]:
    rng = _stream_rng(seed, profile.domain_id, stay_index, "sofa")
    out: list[tuple[float, str, float]] = []
    t = float(rng.uniform(0.0, 3.0))
    while t < plan.los:
        value = plan.baseline_sofa + (1 if rng.uniform() < 0.2 else 0)
        if plan.sepsis_target is not None and t >= plan.sepsis_target:
            value += _SOFA_STEP
        out.append((round(t, 3), "sofa", float(min(value, 24))))
        t += float(rng.uniform(3.0, 7.0))
    return out


def _infection_series(
    profile: DomainProfile, seed: int, stay_index: int, plan: _StayPlan
) -> list[tuple[float, str, float]]:
    """Antibiotic and culture events; qualifying patterns only for planted cases."""
    rng = _stream_rng(seed, profile.domain_id, stay_index, "abx")
    out: list[tuple[float, str, float]] = []
    if plan.sepsis_target is not None:
        start = plan.sepsis_target + float(rng.uniform(-6.0, 6.0))
        start = min(max(0.25, start), plan.los - 0.1)
        # Mostly stay-spanning prescriptions: dose chains only qualify when the
        # stay is long enough (or ends in death), which would couple derived
        # sepsis prevalence to stay length and mortality more than wanted.
        if rng.uniform() < 0.6:
            out.append((round(start, 3), "abx", 2.0))  # prescription spans the stay
        else:
            end = min(start + 78.0 + float(rng.uniform(0.0, 24.0)), plan.los - 0.1)
            t = start
            while t <= end:
                out.append((round(t, 3), "abx", 1.0))
                t += float(rng.uniform(6.0, 10.0))
        culture = min(start + float(rng.uniform(0.0, 18.0)), plan.los - 0.05)
        out.append((round(culture, 3), "culture", 1.0))
    else:
        if rng.uniform() < 0.2:  # short, non-qualifying course
            t = float(rng.uniform(0.0, max(plan.los - 24.0, 1.0)))
            for _ in range(int(rng.integers(1, 4))):
                if t >= plan.los:
                    break
                out.append((round(t, 3), "abx", 1.0))
                t += 12.0
    if rng.uniform() < 0.1:  # surveillance culture unrelated to any episode
        out.append((round(float(rng.uniform(0.0, plan.los)), 3), "culture", 1.0))
    return out


def _preicu_series(
    profile: DomainProfile, seed: int, stay_index: int, plan: _StayPlan
) -> list[tuple[float, str, float]]:
    """Occasional pre-admission creatinine, feeding the rolling baseline."""
    rng = _stream_rng(seed, profile.domain_id, stay_index, "preicu")
    if rng.uniform() >= 0.4:
        return []
    base, _, _ = CONCEPT_LEVELS["crea"]
    level = (
        base
        + profile.shift.feature_mean_offsets.get("crea", 0.0)
        + plan.deviations["crea"]
        + SEVERITY_LOADINGS["crea"] * plan.severity
    )
    out = []
    for _ in range(int(rng.integers(1, 3))):
        t = float(rng.uniform(-100.0, -2.0))
        value = max(level * float(rng.uniform(0.85, 1.0)), 0.2)
        out.append((round(t, 3), "crea", round(value, 2)))
    return out


def generate_stay(
    profile: DomainProfile, seed: int, stay_index: int
) -> tuple[StayStatic, list[EventRecord]]:
    """One stay's statics and time-sorted events, fully determined by the key."""
    static = _stay_statics(profile, seed, stay_index)
    rng_sev = _stream_rng(seed, profile.domain_id, stay_index, "severity")
    severity = float(rng_sev.normal())
    deviations = {
        concept_id: float(rng_sev.normal(0.0, personal_sd))
        for concept_id, (_, personal_sd, _) in CONCEPT_LEVELS.items()
    }
    los = static.icu_discharge
    plan = _plan_outcomes(profile, seed, stay_index, severity, deviations, los)
    if plan.died:
        static.died_in_icu = True
        static.death_time = los

    rates = profile.resolved_rates()
    # Volumes use the weight the downstream per-kg length conversion will see:
    # the recorded one, or the documented 75 kg fallback when it is missing.
    vol_weight = static.weight if static.weight is not None else 75.0
    rows: list[tuple[float, str, float]] = []
    rows.extend(_concept_series(profile, seed, stay_index, plan, rates))
    rows.extend(_urine_series(profile, seed, stay_index, plan, rates, vol_weight))
    rows.extend(_sofa_series(profile, seed, stay_index, plan))
    rows.extend(_infection_series(profile, seed, stay_index, plan))
    rows.extend(_preicu_series(profile, seed, stay_index, plan))
    rows.sort(key=lambda r: (r[0], r[1]))
    events = [EventRecord(static.stay_id, t, concept, value) for t, concept, value in rows]
    return static, events


def generate_domain(
    profile: DomainProfile, seed: int
) -> tuple[list[StayStatic], list[EventRecord]]:
    """All stays for one domain, sorted by stay index."""
    if not 0 <= seed <= MAX_SEED:
        raise ValueError("seed must fit in 64 bits")
    statics: list[StayStatic] = []
    events: list[EventRecord] = []
    for stay_index in range(profile.n_stays):
        static, stay_events = generate_stay(profile, seed, stay_index)
        statics.append(static)
        events.extend(stay_events)
    return statics, events


def generate_multisite(
    config: GeneratorConfig,
) -> dict[str, tuple[list[StayStatic], list[EventRecord]]]:
    """Every profile generated under the shared seed, keyed by domain_id."""
    out: dict[str, tuple[list[StayStatic], list[EventRecord]]] = {}
    for profile in config.profiles:
        if profile.domain_id in out:
            raise ValueError(f"duplicate domain_id {profile.domain_id!r}")
        out[profile.domain_id] = generate_domain(profile, config.seed)
    return out
