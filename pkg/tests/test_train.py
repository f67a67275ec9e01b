"""Tests for the experiment orchestration: training loop, arms, reports."""

import json

import numpy as np
import pytest
import torch

import lefm.train as train_mod
from lefm.data import AugmentationConfig, generate_synthetic
from lefm.errors import ConfigurationError, DataError
from lefm.network import expansion_parameter_increase, load_checkpoint, model_from_checkpoint
from lefm.train import (
    TrainConfig,
    arm_name,
    evaluate_model,
    read_runs_csv,
    report_coefficients,
    run_experiment,
    summarize_metric,
    train_one,
)


def tiny_dataset(n=12, rule="PRODUCT", seed=0, size=16):
    return generate_synthetic(n, size, size, rule, noise_sigma=0.02, seed=seed, smoothness=3.0)


def tiny_config(**overrides):
    kwargs = dict(
        max_epochs=3,
        batch_size=4,
        m=2,
        seeds=(0, 1),
        patch_size=16,
        patch_stride=16,
        test_fraction=0.25,
        augmentation=AugmentationConfig(probability=0.0),
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


class TestTrainConfig:
    def test_defaults_match_schedule(self):
        config = TrainConfig()
        assert config.max_epochs == 30000
        assert config.lr0 == 1e-3
        assert config.plateau_patience == 20
        assert config.lr_factor == 0.5
        assert config.lr_min == 1e-6
        assert config.weight_decay == 1e-4
        assert config.early_stop_patience == 40
        assert config.batch_size == 8
        assert config.val_fraction == 0.2
        assert config.augmentation.shift_limit == 0.2
        assert config.augmentation.scale_limit == 0.2
        assert config.augmentation.rotation_limit == 30.0
        assert config.augmentation.probability == 0.5

    def test_file_roundtrip(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# comment\n"
            "max_epochs=50\n"
            "lr0=0.002\n"
            "m=3\n"
            "seeds=0, 1, 2\n"
            "augmentation.probability=0.25\n"
            "use_batch_norm=true\n"
        )
        config = TrainConfig.from_file(path)
        assert config.max_epochs == 50
        assert config.lr0 == 0.002
        assert config.m == 3
        assert config.seeds == (0, 1, 2)
        assert config.augmentation.probability == 0.25
        assert config.use_batch_norm is True

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_mapping({"not_a_field": "1"})

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_mapping({"use_batch_norm": "maybe"})
        with pytest.raises(ConfigurationError):
            TrainConfig.from_mapping({"lr_min": "0.1", "lr0": "0.001"})

    def test_unusual_order_warns(self):
        with pytest.warns(UserWarning):
            TrainConfig(m=5).validate()

    def test_hash_tracks_content(self):
        a = tiny_config()
        b = tiny_config()
        c = tiny_config(lr0=2e-3)
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != c.config_hash()
        assert len(a.config_hash()) == 12


class TestTrainOne:
    def test_basic_run(self, tmp_path):
        result = train_one(tiny_config(), tiny_dataset(), seed=0, out_dir=tmp_path)
        report = result.report
        assert report.status == "ok"
        assert report.model == "lefm_m2"
        assert report.epochs <= 3
        assert 0.0 <= report.bacc <= 1.0
        report.validate()
        assert result.checkpoint_path is not None and result.checkpoint_path.exists()
        assert all(1e-6 <= lr <= 1e-3 for lr in result.lr_history)
        payload = load_checkpoint(result.checkpoint_path)
        assert payload["seed"] == 0
        assert payload["table"]["D"] == 10
        assert payload["config_hash"] == tiny_config().config_hash()

    def test_seeded_runs_are_bit_reproducible(self):
        config = tiny_config()
        dataset = tiny_dataset()
        a = train_one(config, dataset, seed=3)
        b = train_one(config, dataset, seed=3)
        assert a.report.report_payload() == b.report.report_payload()
        for key in a.checkpoint["params"]:
            assert torch.equal(a.checkpoint["params"][key], b.checkpoint["params"][key])
        assert a.val_history == b.val_history

    def test_different_seeds_differ(self):
        dataset = tiny_dataset()
        a = train_one(tiny_config(), dataset, seed=0)
        b = train_one(tiny_config(), dataset, seed=1)
        assert a.val_history != b.val_history

    def test_early_stop_patience_semantics(self):
        # epoch-1 validation optimal, patience 1: stop at epoch 2
        curve = {1: 0.2, 2: 0.3, 3: 0.25, 4: 0.24}
        result = train_one(
            tiny_config(max_epochs=10, early_stop_patience=1),
            tiny_dataset(),
            seed=0,
            val_loss_override=lambda model, epoch: curve[epoch],
        )
        assert result.report.epochs == 2
        assert result.checkpoint["best_epoch"] == 1

    def test_restored_best_contract(self):
        # synthetic curve with the optimum at epoch 2
        curve = {1: 0.5, 2: 0.2, 3: 0.3, 4: 0.4, 5: 0.45}
        config = tiny_config(max_epochs=10, early_stop_patience=3)
        dataset = tiny_dataset()
        result = train_one(config, dataset, seed=0, val_loss_override=lambda model, epoch: curve[epoch])
        assert result.report.epochs == 5
        assert result.checkpoint["best_epoch"] == 2
        changed = any(
            not torch.equal(result.checkpoint["params"][k], result.checkpoint["best_params"][k])
            for k in result.checkpoint["params"]
        )
        assert changed, "last and best weights should differ after further epochs"
        # test metrics must come from the best-epoch weights, not the last ones
        payload = dict(result.checkpoint)
        payload["format_version"] = 1
        best_model = model_from_checkpoint(payload, which="best")
        split_ids = set(result.checkpoint["split"]["test_ids"])
        test_samples = [s for s in dataset if s.sample_id in split_ids]
        counts = evaluate_model(best_model, test_samples, config.patch_size, config.batch_size)
        assert (counts.tp, counts.tn, counts.fp, counts.fn) == (
            result.report.counts.tp, result.report.counts.tn,
            result.report.counts.fp, result.report.counts.fn,
        )

    def test_lr_halved_after_twenty_flat_epochs(self):
        result = train_one(
            tiny_config(max_epochs=22, early_stop_patience=40),
            tiny_dataset(),
            seed=0,
            val_loss_override=lambda model, epoch: 0.5,
        )
        lrs = result.lr_history
        assert lrs[19] == pytest.approx(1e-3)   # after epoch 20: 19 stale epochs
        assert lrs[20] == pytest.approx(5e-4)   # after epoch 21: 20 stale epochs
        assert lrs[21] == pytest.approx(5e-4)

    def test_nan_loss_records_failed_run(self, monkeypatch):
        calls = {"n": 0}
        real = train_mod.dice_loss

        def exploding(pred, target):
            calls["n"] += 1
            if calls["n"] >= 3:
                return real(pred, target) * float("nan")
            return real(pred, target)

        monkeypatch.setattr(train_mod, "dice_loss", exploding)
        result = train_one(tiny_config(), tiny_dataset(), seed=0)
        assert result.report.status == "failed"
        assert "finite" in result.report.note
        assert result.checkpoint_path is None

    def test_resume_is_bit_exact(self, tmp_path):
        dataset = tiny_dataset()
        short = tiny_config(max_epochs=2)
        full = tiny_config(max_epochs=4)
        first = train_one(short, dataset, seed=5, out_dir=tmp_path)
        resumed = train_one(full, dataset, seed=5, resume_from=first.checkpoint_path)
        straight = train_one(full, dataset, seed=5)
        assert resumed.report.report_payload() == straight.report.report_payload()
        for key in straight.checkpoint["params"]:
            assert torch.equal(resumed.checkpoint["params"][key], straight.checkpoint["params"][key])
        assert resumed.val_history == straight.val_history

    def test_resume_rejects_mismatched_structure(self, tmp_path):
        dataset = tiny_dataset()
        first = train_one(tiny_config(max_epochs=1), dataset, seed=0, out_dir=tmp_path)
        with pytest.raises(ConfigurationError):
            train_one(tiny_config(max_epochs=2, m=3), dataset, seed=0, resume_from=first.checkpoint_path)


class TestRunExperiment:
    def test_summary_structure_and_outputs(self, tmp_path):
        config = tiny_config(seeds=(0, 1))
        summary = run_experiment(config, tiny_dataset(), out_dir=tmp_path, workers=1)
        assert set(summary["arms"]) == {"baseline", "lefm_m2"}
        assert summary["arms"]["lefm_m2"]["parameter_increase"] == expansion_parameter_increase(3, 2)
        assert summary["arms"]["baseline"]["complete"]
        assert len(summary["anova"]) == 3
        for verdict in summary["anova"]:
            assert verdict["groups"] == ["baseline", "lefm_m2"]
            assert 0.0 <= verdict["p"] <= 1.0
        rows = read_runs_csv(tmp_path / "runs.csv")
        assert len(rows) == 4
        assert {row["model"] for row in rows} == {"baseline", "lefm_m2"}
        assert (tmp_path / "summary.json").exists()
        assert (tmp_path / "summary.md").exists()
        assert (tmp_path / "anova.json").exists()
        for row in rows:
            assert row["status"] == "ok"
        report_file = tmp_path / "report_baseline_seed0.json"
        payload = json.loads(report_file.read_text())
        assert payload["model"] == "baseline"
        assert "wall_time_s" not in payload

    def test_rerun_reports_byte_identical(self, tmp_path):
        config = tiny_config(seeds=(0, 1), max_epochs=2)
        dataset = tiny_dataset()
        run_experiment(config, dataset, out_dir=tmp_path / "a", workers=1)
        run_experiment(config, dataset, out_dir=tmp_path / "b", workers=1)
        for name in ["summary.json", "summary.md", "anova.json",
                     "report_baseline_seed0.json", "report_lefm_m2_seed1.json"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_single_seed_rejected(self):
        with pytest.raises(ConfigurationError):
            run_experiment(tiny_config(seeds=(0,)), tiny_dataset(), workers=1)

    def test_identical_groups_not_significant(self):
        verdicts = [v for v in run_experiment(
            tiny_config(seeds=(0, 1), max_epochs=1, m=2),
            tiny_dataset(),
            workers=1,
            arms=[0, 0, 2],
        )["anova"]]
        assert all(v["groups"][0] == "baseline" for v in verdicts)

    def test_csv_appends_across_experiments(self, tmp_path):
        config = tiny_config(seeds=(0, 1), max_epochs=1)
        dataset = tiny_dataset()
        run_experiment(config, dataset, out_dir=tmp_path, workers=1)
        run_experiment(config, dataset, out_dir=tmp_path, workers=1)
        assert len(read_runs_csv(tmp_path / "runs.csv")) == 8

    def test_split_and_anova_files(self, tmp_path):
        config = tiny_config(seeds=(0, 1), max_epochs=1)
        run_experiment(config, tiny_dataset(), out_dir=tmp_path, workers=1)
        split = json.loads((tmp_path / "split.json").read_text())
        assert not set(split["train_ids"]) & set(split["test_ids"])
        anova = json.loads((tmp_path / "anova.json").read_text())
        assert anova["config_hash"] == config.config_hash()
        assert len(anova["verdicts"]) == 3

    def test_failed_runs_mark_arm_incomplete(self, tmp_path, monkeypatch):
        real = train_mod.train_one

        def flaky(config, dataset, seed, **kwargs):
            result = real(config, dataset, seed, **kwargs)
            if config.m == 2 and seed == 1:
                result.report.status = "failed"
                result.report.note = "injected failure"
            return result

        monkeypatch.setattr(train_mod, "train_one", flaky)
        summary = run_experiment(tiny_config(seeds=(0, 1), max_epochs=1), tiny_dataset(),
                                 out_dir=tmp_path, workers=1)
        assert summary["arms"]["baseline"]["complete"]
        assert not summary["arms"]["lefm_m2"]["complete"]
        assert summary["arms"]["lefm_m2"]["failed_seeds"] == [1]
        # only non-failed runs feed the statistics
        assert len(summary["arms"]["lefm_m2"]["metrics"]["bacc"]["values"]) == 1
        note = [v for v in summary["anova"] if v.get("note")]
        assert note and all(v["p"] is None for v in note)
        rows = read_runs_csv(tmp_path / "runs.csv")
        assert [r["status"] for r in rows].count("failed") == 1

    def test_worker_cap_respects_environment(self, monkeypatch):
        from lefm.train import _max_workers

        monkeypatch.setenv("LEFM_THREADS", "3")
        assert _max_workers(10, None) == 3
        assert _max_workers(2, None) == 2
        monkeypatch.delenv("LEFM_THREADS")
        assert _max_workers(1, None) == 1
        assert _max_workers(10, 4) == 4


class TestSummaries:
    def test_mean_and_sample_std(self):
        stats = summarize_metric([0.88, 0.90])
        assert stats["mean"] == pytest.approx(0.89)
        assert stats["std"] == pytest.approx(0.014142135623730952, rel=1e-12)

    def test_single_value_has_zero_std(self):
        assert summarize_metric([0.5])["std"] == 0.0

    def test_arm_names(self):
        assert arm_name(0) == "baseline"
        assert arm_name(2) == "lefm_m2"
        assert arm_name(3) == "lefm_m3"


class TestCoefficientReport:
    def test_report_contents_and_roundtrip(self, tmp_path):
        result = train_one(tiny_config(max_epochs=2), tiny_dataset(), seed=0, out_dir=tmp_path)
        report = report_coefficients(result.checkpoint_path)
        assert report["m"] == 2 and report["d"] == 3 and report["D"] == 10
        labels = {t["label"] for t in report["terms"]}
        assert {"RG", "RB", "GB"} <= labels
        importances = [t["importance"] for t in report["terms"]]
        assert importances == sorted(importances, reverse=True)
        assert sum(importances) == pytest.approx(1.0, abs=1e-12)
        for term in report["terms"]:
            assert term["magnitude"] == pytest.approx(abs(term["coefficient"]), abs=0)
        # json round-trip is lossless
        blob = json.dumps(report)
        assert json.loads(blob) == report

    def test_l1_normalization_example(self):
        table_payload = {
            "best_params": {"expansion.coefficients": torch.tensor([1.0, -2.0, 0.0])},
            "m": 1,
            "config_hash": "x",
            "table": {"d": 2, "m": 1, "D": 3, "exponents": [[0, 0], [1, 0], [0, 1]]},
        }
        report = report_coefficients(table_payload, channel_names=["u", "v"])
        by_index = {t["index"]: t for t in report["terms"]}
        assert by_index[0]["importance"] == pytest.approx(1 / 3)
        assert by_index[1]["importance"] == pytest.approx(2 / 3)
        assert by_index[2]["importance"] == 0.0
        assert [t["index"] for t in report["terms"]] == [1, 0, 2]

    def test_baseline_checkpoint_rejected(self):
        result = train_one(tiny_config(max_epochs=1, m=0), tiny_dataset(), seed=0)
        with pytest.raises(DataError):
            report_coefficients(result.checkpoint)
