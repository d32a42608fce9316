"""Experiment matrix: preparation, cell planning, execution, CSV output."""

import io
import math

import numpy as np
import pytest

import crosscare.protocol as protocol
from crosscare.catalog import default_catalog
from crosscare.features import fit_norm_stats
from crosscare.model import load_checkpoint
from crosscare.protocol import (
    CalibrationRecord,
    EvalReport,
    MissingCheckpointError,
    TaskData,
    _plan_cells,
    cell_label,
    paired_fold_pvalue,
    prepare_task_data,
    run_matrix,
    stack_domain,
    write_calibration_csv,
    write_results_csv,
    write_summary_csv,
)
from crosscare.records import assemble_stays
from crosscare.simulate import DomainProfile, generate_domain
from crosscare.training import SearchResult, TrainConfig

CATALOG = default_catalog()
SITES = ("siteA", "siteB", "siteC")


@pytest.fixture(scope="module")
def stays_by_domain():
    profiles = [DomainProfile(d, n_stays=70) for d in SITES]
    return {p.domain_id: assemble_stays(*generate_domain(p, seed=11)) for p in profiles}


@pytest.fixture(scope="module")
def mortality_bundle(stays_by_domain):
    return prepare_task_data(stays_by_domain, "mortality", CATALOG)


@pytest.fixture(scope="module")
def aki_bundle():
    # Short stays keep the hourly tensors small.
    profile = DomainProfile("siteH", n_stays=90, los_log_mean=math.log(30), los_log_sd=0.3)
    stays = {"siteH": assemble_stays(*generate_domain(profile, seed=23))}
    return prepare_task_data(stays, "aki", CATALOG)


@pytest.fixture(scope="module")
def quick_config():
    return TrainConfig(
        hidden_dim=8, batch_size=32, max_epochs=3, patience=3, dropout=0.0,
        seed=1, learning_rate=3e-3,
    )


@pytest.fixture(scope="module")
def matrix_result(mortality_bundle, quick_config, tmp_path_factory):
    ckdir = tmp_path_factory.mktemp("ckpts")
    result = run_matrix(
        mortality_bundle, ("single", "pooled", "all", "oracle"), quick_config,
        split_seed=5, checkpoint_dir=str(ckdir),
    )
    return result, ckdir


class TestPrepare:
    def test_mortality_layout(self, mortality_bundle, stays_by_domain):
        assert mortality_bundle.task == "mortality"
        assert mortality_bundle.kind == "single_at_24h"
        assert mortality_bundle.n_hours == 24
        for domain_id, prep in mortality_bundle.domains.items():
            assert 0 < prep.n_stays <= len(stays_by_domain[domain_id])
            assert prep.base_report.n_input == 70
            for grid, lab, msk in zip(prep.grids, prep.labels, prep.masks):
                assert grid.n_hours == 24
                assert msk.sum() == 1 and msk[-1]
                assert lab[-1] in (0.0, 1.0)

    def test_exclusions_applied(self, mortality_bundle):
        prep = mortality_bundle.domains["siteA"]
        assert prep.base_report.n_included == prep.task_report.n_input
        assert prep.task_report.n_included == prep.n_stays
        prep.base_report.check_partition()
        prep.task_report.check_partition()

    def test_hourly_layout(self, aki_bundle):
        prep = aki_bundle.domains["siteH"]
        assert aki_bundle.kind == "hourly"
        for grid, lab, msk in zip(prep.grids, prep.labels, prep.masks):
            assert grid.n_hours == len(lab) == len(msk)
            assert 1 <= len(lab) <= 168
            assert msk.any()
        labels_seen = {v for lab in prep.labels for v in lab}
        assert labels_seen <= {0.0, 1.0} and 1.0 in labels_seen

    def test_unknown_task(self, stays_by_domain):
        with pytest.raises(ValueError, match="unknown task"):
            prepare_task_data(stays_by_domain, "readmission", CATALOG)


class TestStack:
    def test_padding_and_alignment(self, aki_bundle):
        prep = aki_bundle.domains["siteH"]
        stats = fit_norm_stats(list(prep.grids))
        t_pad = aki_bundle.n_hours
        data = stack_domain(prep, stats, t_pad)
        assert data.inputs.shape == (prep.n_stays, t_pad, 104)
        assert data.labels.shape == data.mask.shape == (prep.n_stays, t_pad)
        for i in range(prep.n_stays):
            t_i = len(prep.labels[i])
            assert np.array_equal(data.labels[i, :t_i], prep.labels[i])
            assert not data.mask[i, t_i:].any()
            assert not data.inputs[i, prep.grids[i].n_hours:].any()


class TestPlanCells:
    def test_single_and_oracle_share_models(self):
        cells = _plan_cells(SITES, ("single", "oracle"), SITES, SITES, merge=True)
        assert set(cells) == {((d,), False) for d in SITES}
        assert ("oracle", "siteA") in cells[(("siteA",), False)]
        assert ("single", "siteB") in cells[(("siteA",), False)]

    def test_pooled_complement(self):
        cells = _plan_cells(SITES, ("pooled",), SITES, ("siteC",), merge=True)
        assert cells == {(("siteA", "siteB"), True): [("pooled", "siteC")]}

    def test_all_setting_trains_once(self):
        cells = _plan_cells(SITES, ("all",), SITES, SITES, merge=False)
        assert list(cells) == [(SITES, False)]
        assert len(cells[(SITES, False)]) == 3

    def test_pooled_needs_two_domains(self):
        with pytest.raises(ValueError, match="second domain"):
            _plan_cells(("only",), ("pooled",), ("only",), ("only",), merge=True)

    def test_unknown_protocol(self):
        with pytest.raises(ValueError, match="unknown protocol"):
            _plan_cells(SITES, ("leave_one_out",), SITES, SITES, merge=True)

    def test_cell_label(self):
        assert cell_label(("a", "b"), merged=True) == "a+b@pool"
        assert cell_label(("a",), merged=False) == "a"


class TestEvalReport:
    def test_mean_and_se(self):
        r = EvalReport("mortality", "single", ("a",), "b", (0.5, 0.6, 0.7, 0.8, 0.9))
        assert r.mean_auroc == pytest.approx(0.7)
        assert r.se == pytest.approx(np.std([0.5, 0.6, 0.7, 0.8, 0.9], ddof=1) / np.sqrt(5))

    def test_single_fold_se_zero(self):
        assert EvalReport("t", "s", ("a",), "b", (0.8,)).se == 0.0


class TestRunMatrix:
    def test_report_grid_complete(self, matrix_result):
        result, _ = matrix_result
        assert len(result.reports) == 18  # 9 single + 3 each pooled/all/oracle
        settings = {(r.setting, r.train_domains, r.test_domain) for r in result.reports}
        assert len(settings) == 18
        for r in result.reports:
            assert len(r.fold_aurocs) == 5
            assert all(0.0 <= a <= 1.0 for a in r.fold_aurocs)
            assert r.se >= 0.0

    def test_oracle_matches_in_domain_single(self, matrix_result):
        result, _ = matrix_result
        by_key = {(r.setting, r.train_domains, r.test_domain): r for r in result.reports}
        for d in SITES:
            oracle = by_key[("oracle", (d,), d)]
            single = by_key[("single", (d,), d)]
            assert oracle.fold_aurocs == single.fold_aurocs

    def test_histories_cover_distinct_cells(self, matrix_result):
        result, _ = matrix_result
        # 3 single cells + 3 pooled complements + 1 all, each with 5 folds.
        assert len(result.histories) == 7 * 5
        assert ("mortality", "siteA", 0) in result.histories
        assert ("mortality", "siteA+siteB@pool", 2) in result.histories
        assert ("mortality", "siteA+siteB+siteC@pool", 4) in result.histories

    def test_checkpoints_reload_identically(self, matrix_result, mortality_bundle, quick_config):
        result, ckdir = matrix_result
        again = run_matrix(
            mortality_bundle, ("single", "pooled", "all", "oracle"), quick_config,
            split_seed=5, checkpoint_dir=str(ckdir), mode="load",
        )
        assert again.reports == result.reports
        assert again.histories == {}

    def test_checkpoint_extra_describes_cell(self, matrix_result):
        _, ckdir = matrix_result
        _, extra = load_checkpoint(str(ckdir / "mortality" / "siteA" / "fold0.ckpt"))
        assert extra["task"] == "mortality"
        assert extra["train_domains"] == ["siteA"]
        assert extra["fold"] == 0
        assert extra["config"]["objective"] == "erm"
        assert "best_val_loss" in extra

    def test_missing_checkpoint_names_cell(self, mortality_bundle, quick_config, tmp_path):
        with pytest.raises(MissingCheckpointError, match=r"task=mortality cell=siteA fold=0"):
            run_matrix(
                mortality_bundle, ("oracle",), quick_config, split_seed=5,
                checkpoint_dir=str(tmp_path / "empty"), mode="load",
            )

    def test_load_mode_without_directory_rejected(self, mortality_bundle, quick_config):
        with pytest.raises(MissingCheckpointError):
            run_matrix(mortality_bundle, ("oracle",), quick_config, split_seed=5, mode="load")

    def test_deterministic_repeat(self, mortality_bundle, quick_config):
        kwargs = dict(split_seed=9, test_domains=("siteB",))
        a = run_matrix(mortality_bundle, ("pooled",), quick_config, **kwargs)
        b = run_matrix(mortality_bundle, ("pooled",), quick_config, **kwargs)
        assert a.reports == b.reports
        assert a.calibrations == b.calibrations

    def test_workers_do_not_change_results(self, mortality_bundle, quick_config):
        kwargs = dict(split_seed=9, train_domains=("siteA", "siteB"))
        a = run_matrix(mortality_bundle, ("single",), quick_config, workers=1, **kwargs)
        b = run_matrix(mortality_bundle, ("single",), quick_config, workers=2, **kwargs)
        assert a.reports == b.reports

    def test_pooled_merge_off_keeps_domains_separate(self, mortality_bundle, quick_config):
        result = run_matrix(
            mortality_bundle, ("pooled",), quick_config, split_seed=5,
            test_domains=("siteC",), pooled_merge=False,
        )
        assert ("mortality", "siteA+siteB", 0) in result.histories
        assert all("@pool" not in key[1] for key in result.histories)

    def test_unknown_domain_rejected(self, mortality_bundle, quick_config):
        with pytest.raises(ValueError, match="unknown domain"):
            run_matrix(
                mortality_bundle, ("single",), quick_config, split_seed=5,
                train_domains=("siteZ",),
            )

    def test_unknown_mode_rejected(self, mortality_bundle, quick_config):
        with pytest.raises(ValueError, match="unknown mode"):
            run_matrix(mortality_bundle, ("single",), quick_config, split_seed=5, mode="eval")

    def test_search_winner_is_used(self, mortality_bundle, quick_config, monkeypatch):
        chosen = TrainConfig(
            hidden_dim=3, batch_size=16, max_epochs=2, patience=2, dropout=0.0, seed=1,
        )
        seen = {}

        def fake_search(folds, base, n_draws, seed):
            seen["n_draws"], seen["seed"], seen["n_folds"] = n_draws, seed, len(folds)
            return SearchResult(best=chosen, best_mean_val_loss=0.0, table=())

        monkeypatch.setattr(protocol, "random_search", fake_search)
        result = run_matrix(
            mortality_bundle, ("oracle",), quick_config, split_seed=5,
            test_domains=("siteA",), search_draws=4,
        )
        assert seen["n_draws"] == 4 and seen["n_folds"] == 5
        assert len(result.reports) == 1


class TestHourlyScoring:
    def test_pooled_hours_and_per_stay_variant(self, aki_bundle, quick_config):
        kwargs = dict(split_seed=3, n_folds=2)
        pooled = run_matrix(aki_bundle, ("oracle",), quick_config, **kwargs)
        n_test = len(aki_bundle.domains["siteH"].stay_ids) // 5
        assert pooled.calibrations[0].n_predictions > n_test  # many hours per stay
        staywise = run_matrix(aki_bundle, ("oracle",), quick_config, per_stay=True, **kwargs)
        assert staywise.calibrations[0].n_predictions == n_test
        assert len(pooled.reports[0].fold_aurocs) == 2


class TestOutputs:
    def test_results_csv(self, matrix_result):
        result, _ = matrix_result
        buf = io.StringIO()
        write_results_csv(buf, result.reports)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "task,setting,train_domains,test_domain,fold,auroc"
        assert len(lines) == 1 + 18 * 5
        task, setting, trains, test, fold, value = lines[1].split(",")
        assert (task, setting, trains, test, fold) == (
            "mortality", "all", "siteA+siteB+siteC", "siteA", "0",
        )
        assert 0.0 <= float(value) <= 1.0

    def test_summary_csv(self, matrix_result):
        result, _ = matrix_result
        buf = io.StringIO()
        write_summary_csv(buf, result.reports)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "task,setting,train_domains,test_domain,mean_auroc,se"
        assert len(lines) == 1 + 18
        first = result.reports[0]
        assert float(lines[1].split(",")[4]) == first.mean_auroc

    def test_calibration_csv(self, matrix_result):
        result, _ = matrix_result
        buf = io.StringIO()
        write_calibration_csv(buf, result.calibrations)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "task,setting,train_domains,test_domain,bin_mean_pred,bin_frac_pos,n"
        assert len(lines) > 18  # at least one bin per record
        for record in result.calibrations:
            assert sum(p[2] for p in record.points) <= record.n_predictions
            for mean_pred, frac_pos, _ in record.points:
                assert 0.0 <= frac_pos <= 1.0

    def test_csv_bytes_reproducible(self, mortality_bundle, quick_config):
        outs = []
        for _ in range(2):
            result = run_matrix(
                mortality_bundle, ("oracle",), quick_config, split_seed=4,
                test_domains=("siteA",),
            )
            buf = io.StringIO()
            write_results_csv(buf, result.reports)
            write_summary_csv(buf, result.reports)
            write_calibration_csv(buf, result.calibrations)
            outs.append(buf.getvalue())
        assert outs[0] == outs[1]

    def test_paired_pvalue(self):
        a = EvalReport("t", "single", ("a",), "b", (0.6, 0.7, 0.8, 0.9, 0.75))
        assert paired_fold_pvalue(a, a) == 1.0
        short = EvalReport("t", "single", ("a",), "b", (0.6,))
        with pytest.raises(ValueError, match="fold counts"):
            paired_fold_pvalue(a, short)
