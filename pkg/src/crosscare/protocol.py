"""Cross-domain experiment matrix.

Four train settings are supported for every task: "single" (one training
domain, scored on every requested test domain), "pooled" (all domains
except the test domain), "all" (every domain including the test one), and
"oracle" (trained and scored on the test domain itself).  Cells that need
the same trained model share it; single and oracle rows in particular
never train twice.

Featurisation happens inside each cell: normalisation statistics are
fitted on the training domains' cross-validation pool, never on any test
split, and then applied everywhere.  Scores for hourly tasks pool all
valid (stay, hour) cells of the test split; a per-stay reduction is
available but not the default.
"""

from __future__ import annotations

import dataclasses
import os
import zlib
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .aki import aki_onset
from .catalog import ConceptCatalog
from .cohort import ExclusionReport, apply_base_exclusions, apply_task_exclusions
from .features import discretise, finalize, fit_norm_stats
from .labels import TASKS, build_label_track
from .metrics import auroc, calibration_curve, isotonic_fit, wilcoxon_paired
from .model import load_checkpoint, predict_probabilities, save_checkpoint
from .sepsis import sepsis_onset
from .training import DomainData, TrainConfig, make_splits, random_search, train

SETTINGS = ("single", "pooled", "all", "oracle")
TASK_KIND = {"mortality": "single_at_24h", "aki": "hourly", "sepsis": "hourly"}
MORTALITY_INPUT_HOURS = 24


class MissingCheckpointError(RuntimeError):
    """A cell of the matrix has no trained model on disk."""


@dataclass(frozen=True)
class PreparedDomain:
    """One domain's cohort after exclusions, ready to featurise."""

    domain_id: str
    stay_ids: tuple
    grids: tuple
    labels: tuple  # per stay: (T_i,) float
    masks: tuple  # per stay: (T_i,) bool
    base_report: ExclusionReport
    task_report: ExclusionReport

    @property
    def n_stays(self) -> int:
        return len(self.stay_ids)


@dataclass(frozen=True)
class TaskData:
    """Prepared cohorts for one task across every domain."""

    task: str
    kind: str
    domains: dict

    @property
    def n_hours(self) -> int:
        return max(g.n_hours for p in self.domains.values() for g in p.grids)


@dataclass(frozen=True)
class EvalReport:
    """Per-fold test AUROC for one cell of the matrix."""

    task: str
    setting: str
    train_domains: tuple
    test_domain: str
    fold_aurocs: tuple

    @property
    def mean_auroc(self) -> float:
        return float(np.mean(self.fold_aurocs))

    @property
    def se(self) -> float:
        # Fold standard deviation scaled by n^(-1/2).
        n = len(self.fold_aurocs)
        if n < 2:
            return 0.0
        return float(np.std(self.fold_aurocs, ddof=1) / np.sqrt(n))

    def sort_key(self):
        return (self.task, self.setting, self.train_domains, self.test_domain)


@dataclass(frozen=True)
class CalibrationRecord:
    """Recalibrated fold-0 curve for one cell: (bin mean, frac positive, n)."""

    task: str
    setting: str
    train_domains: tuple
    test_domain: str
    points: tuple
    n_predictions: int


@dataclass(frozen=True)
class MatrixResult:
    reports: tuple
    calibrations: tuple
    histories: dict  # (task, cell label, fold) -> tuple of EpochRecord


def prepare_task_data(
    stays_by_domain: dict, task: str, catalog: ConceptCatalog
) -> TaskData:
    """Run exclusions, labelling, and hourly discretisation for one task.

    `stays_by_domain` maps domain id to a list of StayTimeline.  Onsets for
    the hourly tasks are derived here and reused for both the exclusion
    pass and the label tracks.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    kind = TASK_KIND[task]
    prepared = {}
    for domain_id in sorted(stays_by_domain):
        stays = stays_by_domain[domain_id]
        kept, base_report = apply_base_exclusions(stays, catalog)
        onsets = _derive_onsets(kept, task)
        kept, task_report = apply_task_exclusions(kept, task, onsets)

        ids, grids, labels, masks = [], [], [], []
        for stay in kept:
            sid = stay.static.stay_id
            track = build_label_track(stay, task, onsets.get(sid) if onsets else None)
            if kind == "single_at_24h":
                t_max = MORTALITY_INPUT_HOURS
                lab = np.zeros(t_max)
                lab[-1] = 1.0 if track.single_label else 0.0
                msk = np.zeros(t_max, dtype=bool)
                msk[-1] = True
            else:
                values, valid = track.hourly_arrays()
                t_max = len(values)
                lab = np.asarray(values, dtype=float)
                msk = np.asarray(valid, dtype=bool)
            ids.append(sid)
            grids.append(discretise(stay, catalog, n_hours=t_max))
            labels.append(lab)
            masks.append(msk)
        prepared[domain_id] = PreparedDomain(
            domain_id, tuple(ids), tuple(grids), tuple(labels), tuple(masks),
            base_report, task_report,
        )
    return TaskData(task, kind, prepared)


def _derive_onsets(stays: list, task: str) -> dict | None:
    if task == "mortality":
        return None
    labeller = aki_onset if task == "aki" else sepsis_onset
    return {stay.static.stay_id: labeller(stay) for stay in stays}


def stack_domain(prepared: PreparedDomain, stats, n_hours: int) -> DomainData:
    """Normalise and pad one domain into dense (n, T, P) tensors."""
    tensors = [finalize(grid, stats) for grid in prepared.grids]
    width = tensors[0].matrix.shape[1]
    n = prepared.n_stays
    inputs = np.zeros((n, n_hours, width))
    labels = np.zeros((n, n_hours))
    mask = np.zeros((n, n_hours), dtype=bool)
    for i, tensor in enumerate(tensors):
        t = tensor.matrix.shape[0]
        inputs[i, :t] = tensor.matrix
        labels[i, : len(prepared.labels[i])] = prepared.labels[i]
        mask[i, : len(prepared.masks[i])] = prepared.masks[i]
    return DomainData(prepared.domain_id, prepared.stay_ids, inputs, labels, mask)


def _plan_cells(all_domains, protocols, train_filter, test_filter, merge):
    """Group requested evaluations by the model that serves them.

    Returns {(train_domains, merged): [(setting, test_domain), ...]} with
    deterministic ordering.
    """
    jobs = defaultdict(list)
    for setting in protocols:
        if setting not in SETTINGS:
            raise ValueError(f"unknown protocol {setting!r}")
        if setting == "single":
            for d in train_filter:
                for e in test_filter:
                    jobs[((d,), False)].append(("single", e))
        elif setting == "oracle":
            for e in test_filter:
                jobs[((e,), False)].append(("oracle", e))
        elif setting == "pooled":
            for e in test_filter:
                rest = tuple(d for d in all_domains if d != e)
                if not rest:
                    raise ValueError(f"pooled setting needs a second domain besides {e!r}")
                # Merging a single domain is the identity; share the cell.
                jobs[(rest, merge and len(rest) > 1)].append(("pooled", e))
        else:  # all
            for e in test_filter:
                jobs[(tuple(all_domains), merge and len(all_domains) > 1)].append(("all", e))
    return {key: sorted(set(evals)) for key, evals in sorted(jobs.items())}


def cell_label(train_domains, merged: bool) -> str:
    return "+".join(train_domains) + ("@pool" if merged else "")


def _merge_domains(parts: list, label: str) -> DomainData:
    ids = tuple(sid for p in parts for sid in p.stay_ids)
    return DomainData(
        label,
        ids,
        np.concatenate([p.inputs for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.mask for p in parts]),
    )


def _scores(model, data: DomainData, kind: str, per_stay: bool, chunk: int = 512):
    """Predicted probabilities and labels over the scored cells of `data`."""
    probs = np.concatenate(
        [
            predict_probabilities(
                model.forward(data.inputs[i : i + chunk], train=False).logit_matrix(),
                kind,
            )
            for i in range(0, len(data.stay_ids), chunk)
        ]
    )
    if kind == "single_at_24h":
        return probs[:, 0], data.labels[:, -1]
    if per_stay:
        # One instance per stay: mean predicted risk over its valid hours
        # against whether any hour is positive.
        denom = data.mask.sum(axis=1)
        scores = (probs * data.mask).sum(axis=1) / np.maximum(denom, 1)
        labels = (data.labels * data.mask).max(axis=1)
        keep = denom > 0
        return scores[keep], labels[keep]
    return probs[data.mask], data.labels[data.mask]


def _checkpoint_path(root, task, label, fold):
    return os.path.join(root, task, label, f"fold{fold}.ckpt")


def _search_seed(base_seed: int, task: str, label: str) -> int:
    # Stable per-cell stream for hyperparameter draws.
    return (base_seed + zlib.crc32(f"{task}|{label}".encode())) % 2**32


def run_matrix(
    bundles,
    protocols,
    base_config: TrainConfig,
    *,
    split_seed: int,
    n_folds: int = 5,
    test_fraction: float = 0.2,
    train_domains=None,
    test_domains=None,
    search_draws: int = 0,
    pooled_merge=None,
    checkpoint_dir=None,
    mode: str = "train",
    per_stay: bool = False,
    calibration_bins: int = 10,
    calibration_winsor: float = 0.999,
    workers: int = 1,
) -> MatrixResult:
    """Execute the experiment matrix over prepared task bundles.

    `mode` "train" fits models (and saves them under `checkpoint_dir` when
    given); "load" requires previously saved checkpoints and raises
    MissingCheckpointError naming the first absent cell.  `pooled_merge`
    controls whether pooled/all settings see one combined training domain
    (size-proportional sampling) or keep domains separate; by default it
    merges exactly for the plain ERM objective, which has no use for
    domain structure.
    """
    if isinstance(bundles, TaskData):
        bundles = [bundles]
    if mode not in ("train", "load"):
        raise ValueError(f"unknown mode {mode!r}")
    merge = base_config.objective == "erm" if pooled_merge is None else bool(pooled_merge)

    reports, calibrations, histories = [], [], {}
    for bundle in bundles:
        all_domains = tuple(sorted(bundle.domains))
        trains = tuple(train_domains) if train_domains else all_domains
        tests = tuple(test_domains) if test_domains else all_domains
        for name in (*trains, *tests):
            if name not in bundle.domains:
                raise ValueError(f"unknown domain {name!r} for task {bundle.task!r}")
        plan = make_splits(
            {d: list(p.stay_ids) for d, p in bundle.domains.items()},
            seed=split_seed,
            test_fraction=test_fraction,
            n_folds=n_folds,
        )
        cells = _plan_cells(all_domains, protocols, trains, tests, merge)

        def one_cell(item, bundle=bundle, plan=plan):
            return _run_cell(
                bundle, plan, item[0], item[1], base_config,
                search_draws=search_draws, checkpoint_dir=checkpoint_dir,
                mode=mode, per_stay=per_stay,
                calibration_bins=calibration_bins,
                calibration_winsor=calibration_winsor,
            )
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(one_cell, cells.items()))
        else:
            outcomes = [one_cell(item) for item in cells.items()]
        for cell_reports, cell_cal, cell_hist in outcomes:
            reports.extend(cell_reports)
            calibrations.extend(cell_cal)
            histories.update(cell_hist)

    reports.sort(key=EvalReport.sort_key)
    calibrations.sort(key=lambda c: (c.task, c.setting, c.train_domains, c.test_domain))
    return MatrixResult(tuple(reports), tuple(calibrations), histories)


def _run_cell(
    bundle: TaskData,
    plan,
    key,
    evals,
    base_config: TrainConfig,
    *,
    search_draws,
    checkpoint_dir,
    mode,
    per_stay,
    calibration_bins,
    calibration_winsor,
):
    train_set, merged = key
    label = cell_label(train_set, merged)
    n_hours = bundle.n_hours

    # Normalisation sees only the CV pool (train+val) of the training domains.
    pool_grids = []
    for d in train_set:
        prepared = bundle.domains[d]
        held_out = set(plan.test_ids[d])
        pool_grids.extend(
            g for sid, g in zip(prepared.stay_ids, prepared.grids) if sid not in held_out
        )
    stats = fit_norm_stats(pool_grids)

    needed = sorted(set(train_set) | {e for _, e in evals})
    tensors = {d: stack_domain(bundle.domains[d], stats, n_hours) for d in needed}

    def fold_data(fold):
        train_parts = {d: tensors[d].subset(plan.train_ids(fold, d)) for d in train_set}
        val_parts = {d: tensors[d].subset(plan.val_ids(fold, d)) for d in train_set}
        if merged and len(train_set) > 1:
            return (
                {label: _merge_domains([train_parts[d] for d in train_set], label)},
                {label: _merge_domains([val_parts[d] for d in train_set], label)},
            )
        return train_parts, val_parts

    n_folds = len(plan.folds)
    config = base_config
    if mode == "train" and search_draws > 0:
        folds = [fold_data(k) for k in range(n_folds)]
        outcome = random_search(
            folds, base_config, n_draws=search_draws,
            seed=_search_seed(base_config.seed, bundle.task, label),
        )
        config = outcome.best

    models, histories = [], {}
    for fold in range(n_folds):
        if mode == "load":
            path = _checkpoint_path(checkpoint_dir or "", bundle.task, label, fold)
            if not checkpoint_dir or not os.path.exists(path):
                raise MissingCheckpointError(
                    f"no trained model for task={bundle.task} cell={label} "
                    f"fold={fold}: expected {path}"
                )
            model, _ = load_checkpoint(path)
        else:
            tr, va = fold_data(fold)
            result = train(config, tr, va)
            model = result.model
            histories[(bundle.task, label, fold)] = result.history
            if checkpoint_dir:
                path = _checkpoint_path(checkpoint_dir, bundle.task, label, fold)
                os.makedirs(os.path.dirname(path), exist_ok=True)
                save_checkpoint(
                    model, path,
                    extra={
                        "task": bundle.task,
                        "train_domains": list(train_set),
                        "merged": merged,
                        "fold": fold,
                        "config": dataclasses.asdict(config),
                        "best_epoch": result.best_epoch,
                        "best_val_loss": result.best_val_loss,
                    },
                )
        models.append(model)

    reports, calibrations = [], []
    for setting, test_domain in evals:
        fold_aurocs = []
        for fold, model in enumerate(models):
            test_split = tensors[test_domain].subset(plan.test_ids[test_domain])
            scores, labels = _scores(model, test_split, bundle.kind, per_stay)
            fold_aurocs.append(auroc(scores, labels))
        reports.append(
            EvalReport(bundle.task, setting, train_set, test_domain, tuple(fold_aurocs))
        )
        calibrations.append(
            _calibrate_fold0(
                bundle, plan, tensors, models[0], train_set, setting, test_domain,
                per_stay, calibration_bins, calibration_winsor,
            )
        )
    return reports, calibrations, histories


def _calibrate_fold0(
    bundle, plan, tensors, model, train_set, setting, test_domain,
    per_stay, n_bins, winsor_q,
):
    """Isotonic recalibration on fold 0's validation split, curve on test."""
    val_scores, val_labels = [], []
    for d in train_set:
        part = tensors[d].subset(plan.val_ids(0, d))
        s, l = _scores(model, part, bundle.kind, per_stay)
        val_scores.append(s)
        val_labels.append(l)
    iso = isotonic_fit(np.concatenate(val_scores), np.concatenate(val_labels))

    test_split = tensors[test_domain].subset(plan.test_ids[test_domain])
    scores, labels = _scores(model, test_split, bundle.kind, per_stay)
    calibrated = iso.predict(scores)
    points = calibration_curve(calibrated, labels, n_bins=n_bins, winsor_q=winsor_q)
    return CalibrationRecord(
        bundle.task, setting, train_set, test_domain,
        tuple(tuple(p) for p in points), len(scores),
    )


def paired_fold_pvalue(a: EvalReport, b: EvalReport) -> float:
    """Two-sided exact signed-rank p over matching fold AUROCs."""
    if len(a.fold_aurocs) != len(b.fold_aurocs):
        raise ValueError("reports have different fold counts")
    return wilcoxon_paired(list(a.fold_aurocs), list(b.fold_aurocs))


def write_results_csv(stream, reports) -> None:
    stream.write("task,setting,train_domains,test_domain,fold,auroc\n")
    for r in sorted(reports, key=EvalReport.sort_key):
        joined = "+".join(r.train_domains)
        for fold, value in enumerate(r.fold_aurocs):
            stream.write(
                f"{r.task},{r.setting},{joined},{r.test_domain},{fold},{value!r}\n"
            )


def write_summary_csv(stream, reports) -> None:
    stream.write("task,setting,train_domains,test_domain,mean_auroc,se\n")
    for r in sorted(reports, key=EvalReport.sort_key):
        joined = "+".join(r.train_domains)
        stream.write(
            f"{r.task},{r.setting},{joined},{r.test_domain},{r.mean_auroc!r},{r.se!r}\n"
        )


def write_calibration_csv(stream, calibrations) -> None:
    stream.write(
        "task,setting,train_domains,test_domain,bin_mean_pred,bin_frac_pos,n\n"
    )
    ordered = sorted(
        calibrations, key=lambda c: (c.task, c.setting, c.train_domains, c.test_domain)
    )
    for c in ordered:
        joined = "+".join(c.train_domains)
        for mean_pred, frac_pos, n in c.points:
            stream.write(
                f"{c.task},{c.setting},{joined},{c.test_domain},"
                f"{mean_pred!r},{frac_pos!r},{int(n)}\n"
            )
