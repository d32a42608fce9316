"""Staged execution of a configured experiment.

Every stage writes under one run directory whose name is the hash of the
resolved configuration, so the same config always lands in the same
place and a re-run overwrites with identical bytes.  Stages check for
the artifacts they consume and raise MissingPrerequisite naming both the
missing file and the stage that produces it.

Layout under <output_dir>/run-<stamp>/:
    config.resolved.ini
    data/<domain>.statics.csv, data/<domain>.events.csv
    cohort/<task>.attrition.csv, cohort/<task>.included.txt
    labels/<task>.onsets.csv, labels/<task>.labels.csv
    features/<domain>.tensors.bin, features/<domain>.stats.csv
    checkpoints/<task>/<cell>/fold<k>.ckpt
    history/<task>/<cell>.fold<k>.csv
    results/results.csv, results/summary.csv, results/calibration.csv
"""

from __future__ import annotations

import os

from .aki import aki_onset
from .catalog import ConceptCatalog
from .cohort import apply_base_exclusions, apply_task_exclusions, write_attrition_csv
from .config import ExperimentConfig, config_stamp, resolved_text
from .features import (
    STATIC_FIELDS,
    discretise,
    finalize,
    fit_norm_stats,
    write_tensor_dump,
)
from .labels import build_label_track, write_label_file, write_onset_file
from .protocol import (
    prepare_task_data,
    run_matrix,
    write_calibration_csv,
    write_results_csv,
    write_summary_csv,
)
from .records import (
    apply_plausibility_filter,
    assemble_stays,
    parse_events,
    parse_statics,
    serialize_events,
    serialize_statics,
)
from .sepsis import sepsis_onset
from .simulate import generate_domain
from .training import make_splits, write_history_csv


class MissingPrerequisite(RuntimeError):
    """A stage was asked to run before the artifacts it needs exist."""


def run_dir(config: ExperimentConfig) -> str:
    return os.path.join(config.output_dir, f"run-{config_stamp(config)}")


def ensure_run_dir(config: ExperimentConfig) -> str:
    path = run_dir(config)
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "config.resolved.ini"), "w", encoding="utf-8") as fh:
        fh.write(resolved_text(config))
    return path


def _data_files(config: ExperimentConfig, root: str) -> dict:
    """Domain -> (statics path, events path), wherever they live."""
    if config.data_paths:
        return {name: (statics, events) for name, statics, events in config.data_paths}
    return {
        name: (
            os.path.join(root, "data", f"{name}.statics.csv"),
            os.path.join(root, "data", f"{name}.events.csv"),
        )
        for name in config.domain_names
    }


def stage_synth(config: ExperimentConfig, root: str) -> dict:
    """Generate every configured domain and write its event files."""
    if not config.domains:
        raise MissingPrerequisite(
            "config uses data: paths; there is nothing to synthesise"
        )
    os.makedirs(os.path.join(root, "data"), exist_ok=True)
    counts = {}
    for profile in config.build_profiles():
        statics, events = generate_domain(profile, config.synth_seed)
        base = os.path.join(root, "data", profile.domain_id)
        with open(base + ".statics.csv", "w", encoding="utf-8", newline="") as fh:
            fh.write(serialize_statics(statics))
        with open(base + ".events.csv", "w", encoding="utf-8", newline="") as fh:
            fh.write(serialize_events(events))
        counts[profile.domain_id] = len(statics)
    return counts


def load_stays(config: ExperimentConfig, root: str, catalog: ConceptCatalog) -> dict:
    """Parse, assemble, and plausibility-filter every domain's stays."""
    stays = {}
    for domain, (statics_path, events_path) in sorted(_data_files(config, root).items()):
        for path in (statics_path, events_path):
            if not os.path.exists(path):
                raise MissingPrerequisite(
                    f"missing data file {path} for domain {domain!r}; run `synth` first"
                    if not config.data_paths
                    else f"missing data file {path} for domain {domain!r}"
                )
        with open(statics_path, "r", encoding="utf-8", newline="") as fh:
            statics = parse_statics(fh.read())
        with open(events_path, "r", encoding="utf-8", newline="") as fh:
            events = parse_events(fh.read(), catalog)
        assembled = assemble_stays(statics, events)
        stays[domain] = [apply_plausibility_filter(s, catalog)[0] for s in assembled]
    return stays


def stage_cohort(config: ExperimentConfig, root: str, stays: dict, catalog) -> dict:
    """Apply exclusions per task; write attrition tables and included ids."""
    out_dir = os.path.join(root, "cohort")
    os.makedirs(out_dir, exist_ok=True)
    included = {}
    for task in config.tasks:
        sections = []
        kept_ids = []
        for domain in sorted(stays):
            kept, base_report = apply_base_exclusions(stays[domain], catalog)
            onsets = _onsets_for(kept, task)
            kept, task_report = apply_task_exclusions(kept, task, onsets)
            sections.append((f"{domain}/base", base_report))
            sections.append((f"{domain}/{task}", task_report))
            kept_ids.extend(s.static.stay_id for s in kept)
        with open(os.path.join(out_dir, f"{task}.attrition.csv"), "w", encoding="utf-8", newline="") as fh:
            write_attrition_csv(fh, sections)
        with open(os.path.join(out_dir, f"{task}.included.txt"), "w", encoding="utf-8") as fh:
            fh.writelines(f"{sid}\n" for sid in kept_ids)
        included[task] = kept_ids
    return included


def _onsets_for(stays: list, task: str) -> dict | None:
    if task == "mortality":
        return None
    labeller = aki_onset if task == "aki" else sepsis_onset
    return {s.static.stay_id: labeller(s) for s in stays}


def stage_label(config: ExperimentConfig, root: str, stays: dict, catalog) -> None:
    """Onset times and label tracks for every included stay."""
    out_dir = os.path.join(root, "labels")
    os.makedirs(out_dir, exist_ok=True)
    for task in config.tasks:
        onset_rows, tracks = [], []
        for domain in sorted(stays):
            kept, _ = apply_base_exclusions(stays[domain], catalog)
            onsets = _onsets_for(kept, task)
            kept, _ = apply_task_exclusions(kept, task, onsets)
            for stay in kept:
                sid = stay.static.stay_id
                onset = onsets.get(sid) if onsets else None
                if onsets:
                    onset_rows.append((sid, task, onset.onset_time if onset else None))
                tracks.append(build_label_track(stay, task, onset))
        if onset_rows:
            with open(os.path.join(out_dir, f"{task}.onsets.csv"), "w", encoding="utf-8", newline="") as fh:
                write_onset_file(fh, onset_rows)
        with open(os.path.join(out_dir, f"{task}.labels.csv"), "w", encoding="utf-8", newline="") as fh:
            write_label_file(fh, tracks)


def stage_featurize(config: ExperimentConfig, root: str, stays: dict, catalog) -> None:
    """Per-domain tensor dumps, self-normalised on the domain's CV pool.

    These dumps serve inspection and external tooling.  Matrix training
    does not read them: each matrix cell refits normalisation on its own
    training domains so that no test-domain statistics leak in.
    """
    out_dir = os.path.join(root, "features")
    os.makedirs(out_dir, exist_ok=True)
    for domain in sorted(stays):
        kept, _ = apply_base_exclusions(stays[domain], catalog)
        if not kept:
            continue
        grids = {s.static.stay_id: discretise(s, catalog) for s in kept}
        plan = make_splits(
            {domain: sorted(grids)},
            seed=config.seed,
            test_fraction=config.test_fraction,
            n_folds=config.n_folds,
        )
        pool = [g for sid, g in sorted(grids.items()) if sid not in set(plan.test_ids[domain])]
        stats = fit_norm_stats(pool)
        tensors = [finalize(grids[sid], stats) for sid in sorted(grids)]
        write_tensor_dump(os.path.join(out_dir, f"{domain}.tensors.bin"), tensors)
        names = STATIC_FIELDS + tuple(pool[0].concepts)
        with open(os.path.join(out_dir, f"{domain}.stats.csv"), "w", encoding="utf-8") as fh:
            fh.write("feature,mean,sd\n")
            for name, mean, sd in zip(names, stats.mean, stats.sd):
                fh.write(f"{name},{mean!r},{sd!r}\n")


def _matrix(config: ExperimentConfig, root: str, stays: dict, catalog, mode: str, workers: int):
    bundles = [prepare_task_data(stays, task, catalog) for task in config.tasks]
    return run_matrix(
        bundles,
        config.protocols,
        config.train,
        split_seed=config.seed,
        n_folds=config.n_folds,
        test_fraction=config.test_fraction,
        train_domains=config.train_domains,
        test_domains=config.test_domains,
        search_draws=config.search_draws if mode == "train" else 0,
        pooled_merge=config.pooled_merge,
        checkpoint_dir=os.path.join(root, "checkpoints"),
        mode=mode,
        per_stay=config.per_stay,
        calibration_bins=config.calibration_bins,
        calibration_winsor=config.calibration_winsor,
        workers=workers,
    )


def stage_train(config: ExperimentConfig, root: str, stays: dict, catalog, workers: int) -> int:
    result = _matrix(config, root, stays, catalog, mode="train", workers=workers)
    for (task, cell, fold), history in sorted(result.histories.items()):
        hist_dir = os.path.join(root, "history", task)
        os.makedirs(hist_dir, exist_ok=True)
        with open(os.path.join(hist_dir, f"{cell}.fold{fold}.csv"), "w", encoding="utf-8", newline="") as fh:
            write_history_csv(fh, history)
    return len(result.histories)


def stage_evaluate(config: ExperimentConfig, root: str, stays: dict, catalog, workers: int):
    from .protocol import MissingCheckpointError

    try:
        result = _matrix(config, root, stays, catalog, mode="load", workers=workers)
    except MissingCheckpointError as exc:
        raise MissingPrerequisite(f"{exc}; run `train` first") from None
    out_dir = os.path.join(root, "results")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.csv"), "w", encoding="utf-8", newline="") as fh:
        write_results_csv(fh, result.reports)
    with open(os.path.join(out_dir, "summary.csv"), "w", encoding="utf-8", newline="") as fh:
        write_summary_csv(fh, result.reports)
    with open(os.path.join(out_dir, "calibration.csv"), "w", encoding="utf-8", newline="") as fh:
        write_calibration_csv(fh, result.calibrations)
    return result
