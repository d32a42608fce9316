"""Model-ready tensors from stay timelines.

The pipeline is discretise -> locf_impute -> finalize.  A stay becomes a
T x 104 matrix: 4 static features, 48 dynamic features binned by hour,
then one missing indicator per feature in the same order.  An indicator
is 1 exactly when the raw cell held no measurement, regardless of what
imputation later wrote there.

Values are standardised with statistics fitted on observed training
cells only (population standard deviation, floored at 1e-6); cells with
no observation to carry forward become 0, which is the training mean in
normalised space.  Events before admission or beyond the grid horizon
never enter the grid.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .catalog import ConceptCatalog
from .records import StayTimeline

STATIC_FIELDS = ("age", "sex", "height", "weight")
AGGREGATIONS = ("mean", "last")
SD_FLOOR = 1e-6
MORTALITY_INPUT_HOURS = 24

# The sex static arrives as a string enum; the feature encoding is female=1.
_SEX_CODES = {"female": 1.0, "male": 0.0, "unknown": math.nan}


def _static_value(static, name: str) -> float:
    raw = getattr(static, name)
    if raw is None:
        return math.nan
    if name == "sex" and isinstance(raw, str):
        try:
            return _SEX_CODES[raw]
        except KeyError:
            raise ValueError(f"unknown sex value {raw!r} for stay {static.stay_id!r}") from None
    return float(raw)


@dataclass
class HourlyGrid:
    stay_id: str
    concepts: tuple  # the 48 dynamic concept ids, in column order
    values: np.ndarray  # (T, 48) float64, NaN where unobserved
    observed: np.ndarray  # (T, 48) bool
    statics: np.ndarray  # (4,) float64, NaN where missing
    statics_observed: np.ndarray  # (4,) bool

    @property
    def n_hours(self) -> int:
        return self.values.shape[0]


@dataclass
class NormStats:
    """Feature order: the 4 statics, then the 48 dynamic concepts."""

    mean: np.ndarray  # (52,)
    sd: np.ndarray  # (52,)


@dataclass
class FeatureTensor:
    stay_id: str
    columns: tuple
    matrix: np.ndarray  # (T, 104) float64, fully dense


def discretise(
    stay: StayTimeline,
    catalog: ConceptCatalog,
    n_hours: int | None = None,
    aggregation: str = "mean",
) -> HourlyGrid:
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    end = stay.static.end_time()
    t_max = math.ceil(end)
    if n_hours is not None:
        t_max = min(t_max, n_hours)
    concepts = tuple(catalog.dynamic_ids)
    column = {c: j for j, c in enumerate(concepts)}

    sums = np.zeros((t_max, len(concepts)))
    counts = np.zeros((t_max, len(concepts)), dtype=int)
    last = np.full((t_max, len(concepts)), np.nan)
    for event in stay.events:
        j = column.get(event.concept_id)
        if j is None or event.time < 0:
            continue
        hour = math.floor(event.time)
        if hour >= t_max:
            continue
        sums[hour, j] += event.value
        counts[hour, j] += 1
        last[hour, j] = event.value

    observed = counts > 0
    if aggregation == "mean":
        with np.errstate(invalid="ignore"):
            values = np.where(observed, sums / np.maximum(counts, 1), np.nan)
    else:
        values = last

    statics = np.array([_static_value(stay.static, name) for name in STATIC_FIELDS])
    return HourlyGrid(
        stay_id=stay.static.stay_id,
        concepts=concepts,
        values=values,
        observed=observed,
        statics=statics,
        statics_observed=~np.isnan(statics),
    )


def locf_impute(grid: HourlyGrid) -> HourlyGrid:
    """Carry the latest observed value forward; leading cells stay NaN."""
    t_max, width = grid.values.shape
    if t_max == 0:
        return grid
    rows = np.where(grid.observed, np.arange(t_max)[:, None], -1)
    rows = np.maximum.accumulate(rows, axis=0)
    cols = np.broadcast_to(np.arange(width), (t_max, width))
    filled = grid.values[np.maximum(rows, 0), cols]
    filled = np.where(rows >= 0, filled, np.nan)
    return HourlyGrid(
        stay_id=grid.stay_id,
        concepts=grid.concepts,
        values=filled,
        observed=grid.observed,
        statics=grid.statics,
        statics_observed=grid.statics_observed,
    )


def fit_norm_stats(grids: list[HourlyGrid], sd_floor: float = SD_FLOOR) -> NormStats:
    if not grids:
        raise ValueError("cannot fit normalisation stats on zero stays")
    concepts = grids[0].concepts
    for grid in grids:
        if grid.concepts != concepts:
            raise ValueError("grids disagree on dynamic column order")
    n_features = len(STATIC_FIELDS) + len(concepts)
    mean = np.zeros(n_features)
    sd = np.full(n_features, sd_floor)
    for i in range(len(STATIC_FIELDS)):
        pool = [g.statics[i] for g in grids if g.statics_observed[i]]
        if pool:
            mean[i] = np.mean(pool)
            sd[i] = max(float(np.std(pool)), sd_floor)
    for j in range(len(concepts)):
        pool = np.concatenate([g.values[g.observed[:, j], j] for g in grids])
        if pool.size:
            mean[4 + j] = pool.mean()
            sd[4 + j] = max(float(pool.std()), sd_floor)
    return NormStats(mean=mean, sd=sd)


def feature_columns(concepts: tuple) -> tuple:
    names = STATIC_FIELDS + tuple(concepts)
    return names + tuple(f"{name}_missing" for name in names)


def finalize(grid: HourlyGrid, stats: NormStats) -> FeatureTensor:
    filled = locf_impute(grid)  # idempotent, so pre-imputed grids are fine
    t_max = grid.n_hours
    n_static = len(STATIC_FIELDS)

    static_norm = (grid.statics - stats.mean[:n_static]) / stats.sd[:n_static]
    static_norm = np.where(grid.statics_observed, static_norm, 0.0)
    static_block = np.broadcast_to(static_norm, (t_max, n_static))

    dyn_norm = (filled.values - stats.mean[n_static:]) / stats.sd[n_static:]
    dyn_block = np.where(np.isnan(filled.values), 0.0, dyn_norm)

    static_ind = np.broadcast_to(
        (~grid.statics_observed).astype(float), (t_max, n_static)
    )
    dyn_ind = (~grid.observed).astype(float)

    matrix = np.concatenate([static_block, dyn_block, static_ind, dyn_ind], axis=1)
    return FeatureTensor(
        stay_id=grid.stay_id,
        columns=feature_columns(grid.concepts),
        matrix=np.ascontiguousarray(matrix),
    )


class FeatureNormaliser(TransformerMixin, BaseEstimator):
    """Estimator wrapper: fit() learns NormStats, transform() finalises.

    Fit strictly on training-split grids; transform may then be applied
    to any split.
    """

    def __init__(self, sd_floor: float = SD_FLOOR):
        self.sd_floor = sd_floor

    def fit(self, X: list, y=None) -> "FeatureNormaliser":
        self.stats_ = fit_norm_stats(X, self.sd_floor)
        return self

    def transform(self, X: list) -> list:
        if not hasattr(self, "stats_"):
            raise NotFittedError("FeatureNormaliser.fit must run first")
        return [finalize(grid, self.stats_) for grid in X]


def write_tensor_dump(path, tensors: list[FeatureTensor]) -> None:
    """JSON header + concatenated little-endian float32 matrices."""
    if not tensors:
        raise ValueError("nothing to dump")
    header = {
        "columns": list(tensors[0].columns),
        "stays": [{"stay_id": t.stay_id, "n_hours": t.matrix.shape[0]} for t in tensors],
        "width": tensors[0].matrix.shape[1],
    }
    payload = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for tensor in tensors:
            fh.write(tensor.matrix.astype("<f4").tobytes())


def read_tensor_dump(path) -> list[FeatureTensor]:
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode())
        columns = tuple(header["columns"])
        width = header["width"]
        tensors = []
        for entry in header["stays"]:
            t_max = entry["n_hours"]
            raw = fh.read(4 * t_max * width)
            matrix = np.frombuffer(raw, dtype="<f4").reshape(t_max, width)
            tensors.append(
                FeatureTensor(entry["stay_id"], columns, matrix.astype(np.float64))
            )
    return tensors
