"""
Tests for trainer.py: the step skeleton, determinism, paging transparency,
resuming, output files, pretraining and the comparison drivers.
"""

import csv

import numpy as np
import pytest

from vpt_dml import trainer as trainer_module
from vpt_dml.checkpoint import CheckpointError, inspect_checkpoint, save_checkpoint
from vpt_dml.config import ModelConfig, SyntheticConfig, config_for_method
from vpt_dml.data import Batch
from vpt_dml.loss import NonFiniteLossError
from vpt_dml.peft import _trainable_names
from vpt_dml.trainer import (
    CHECKPOINT_NAME,
    BatchPrefetcher,
    Experiment,
    Trainer,
    TrainingAborted,
    bench,
    compare,
    load_backbone,
    load_splits,
    pretrain,
    resume_step,
    save_backbone,
    train_step,
)
from vpt_dml.vit import ViTModel

from .conftest import make_tiny_config


def _losses(config, steps=None):
    if steps is not None:
        config.run.steps = steps
    return Trainer(Experiment.build(config)).run().losses


def _rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.reader(f))


def _batch(experiment, step):
    labels = experiment.train_set.labels
    indices = np.concatenate([np.flatnonzero(labels == c)[:2] for c in (0, 1)])
    images = np.stack([experiment.train_set.images[i] for i in indices])
    return Batch(images, labels[indices].copy(), step)


class TestTrainStep:
    """One optimization step."""

    def test_result_fields(self, tiny_config):
        experiment = Experiment.build(tiny_config)
        result = train_step(_batch(experiment, 0), experiment)
        assert np.isfinite(result.loss)
        assert result.grad_norm > 0
        assert set(result.timings) == {"forward_ms", "backward_ms", "update_ms", "step_ms"}
        assert result.page_ins == experiment.paging.stats.page_ins

    def test_frozen_backbone_gets_no_gradient(self, tiny_config):
        experiment = Experiment.build(tiny_config)
        for step in range(3):
            result = train_step(_batch(experiment, step), experiment)
            assert result.grad_norms["frozen"] == 0.0
            assert result.grad_norms["prompts"] > 0.0

    def test_linear_probe_changes_only_head(self, tiny_config):
        experiment = Experiment.build(config_for_method(tiny_config, "linear_probe"))
        before = experiment.model.params.state_dict()
        for step in range(2):
            train_step(_batch(experiment, step), experiment)
        after = experiment.model.params.state_dict()
        for name, value in before.items():
            if name.startswith("head."):
                continue
            assert after[name].tobytes() == value.tobytes(), name
        assert any(after[n].tobytes() != before[n].tobytes() for n in before
                   if n.startswith("head."))

    def test_semantic_rows_of_absent_classes_unchanged(self, tiny_config):
        experiment = Experiment.build(tiny_config)
        before = experiment.proxies.semantic.copy()
        train_step(_batch(experiment, 0), experiment)
        after = experiment.proxies.semantic
        np.testing.assert_array_equal(after[2:], before[2:])
        assert not np.array_equal(after[:2], before[:2])

    def test_non_finite_loss_aborts(self, tiny_config, monkeypatch):
        def broken(*args, **kwargs):
            raise NonFiniteLossError(float("nan"))

        monkeypatch.setattr(trainer_module, "training_loss", broken)
        experiment = Experiment.build(tiny_config)
        with pytest.raises(TrainingAborted) as exc_info:
            train_step(_batch(experiment, 5), experiment)
        assert exc_info.value.step == 5


FREEZE_CASES = [
    ("linear_head", "linear_probe", False),
    ("bitfit", "bitfit", False),
    ("adapter", "adapter", False),
    ("vpt", "vpt", False),
    ("combine_bitfit", "vpt+bitfit", False),
    ("combine_adapter", "vpt", True),
]


@pytest.mark.slow
class TestFreezeContract:
    """Parameters outside a method's trainable set never move."""

    @pytest.mark.parametrize(
        ("method", "combine_adapter"),
        [case[1:] for case in FREEZE_CASES],
        ids=[case[0] for case in FREEZE_CASES],
    )
    def test_frozen_bytes_unchanged_after_100_steps(self, tiny_config, method,
                                                      combine_adapter):
        config = config_for_method(tiny_config, method)
        if combine_adapter:
            config.peft.combine_adapter = True
            config.peft.adapter.layers = [0, 1]
        config.run.steps = 100
        config.run.eval_every = 100
        experiment = Experiment.build(config)
        model = experiment.model
        with_adapters = config.peft.method == "adapter" or combine_adapter
        trainable = _trainable_names(model, config.peft, with_adapters)
        frozen = [name for name in model.params if name not in trainable]
        assert frozenset(frozen) == experiment.peft.freeze_mask
        assert frozen
        before = {name: model.params[name].data.tobytes() for name in frozen}
        tuned = {name: model.params[name].data.tobytes() for name in trainable}

        Trainer(experiment).run()

        for name in frozen:
            assert model.params[name].data.tobytes() == before[name], name
        assert any(model.params[name].data.tobytes() != value
                   for name, value in tuned.items())

class TestDeterminism:
    """Same seed, same numbers."""

    def test_identical_runs(self, tiny_config):
        assert _losses(tiny_config) == _losses(tiny_config)

    def test_prefetch_does_not_change_results(self, tiny_config):
        sequential = _losses(tiny_config)
        tiny_config.run.prefetch = True
        assert _losses(tiny_config) == sequential

    def test_seed_changes_results(self, tiny_config):
        first = _losses(tiny_config)
        tiny_config.run.seed = 1
        assert _losses(tiny_config) != first

    @pytest.mark.slow
    @pytest.mark.parametrize("method", ["vptsp_m", "vptsp_g"])
    def test_paging_is_transparent(self, tiny_config, method):
        config = config_for_method(tiny_config, method)
        resident = _losses(config, steps=50)
        config.run.buffer_capacity = config.data.classes_per_batch
        assert _losses(config, steps=50) == resident


class TestPaging:
    """Buffer counters over a run."""

    def test_small_buffer_pages_every_batch(self, tiny_config):
        tiny_config.run.buffer_capacity = tiny_config.data.classes_per_batch
        experiment = Experiment.build(tiny_config)
        initial = experiment.paging.stats.page_ins
        Trainer(experiment).run()
        assert experiment.paging.stats.page_ins > initial
        assert len(experiment.proxies.class_prompts.resident_classes) == 2

    def test_full_buffer_never_pages(self, tiny_config):
        experiment = Experiment.build(tiny_config)
        initial = experiment.paging.stats.page_ins
        Trainer(experiment).run()
        assert experiment.paging.stats.page_ins == initial
        assert experiment.paging.stats.page_outs == 0

    def test_no_buffer_without_class_prompts(self, tiny_config):
        assert Experiment.build(config_for_method(tiny_config, "vpt")).paging is None


class TestParamCounts:
    """Tunable parameters per comparison method."""

    def test_gru_adds_one_shared_weight_set(self, tiny_config):
        def tunable(method):
            return Experiment.build(config_for_method(tiny_config, method)).param_count().tunable

        dim = tiny_config.model.head_out_dim
        assert tunable("vptsp_g") - tunable("vptsp_m") == 6 * dim * dim + 3 * dim

    def test_linear_probe_is_smallest(self, tiny_config):
        counts = {
            method: Experiment.build(config_for_method(tiny_config, method)).param_count().tunable
            for method in ("full", "linear_probe", "bitfit", "adapter", "vpt", "vptsp_g")
        }
        assert min(counts, key=counts.get) == "linear_probe"


class TestTrainerOutputs:
    """CSV files, checkpoint and config written by a run."""

    def test_files(self, tiny_config, tmp_path):
        out = tmp_path / "out"
        summary = Trainer(Experiment.build(tiny_config), out).run()
        train_rows = _rows(out / "metrics.csv")
        assert train_rows[0] == ["step", "loss", "grad_norm", "page_ins", "step_ms"]
        assert [r[0] for r in train_rows[1:]] == ["1", "2", "3", "4"]
        assert all(r[4] == "" for r in train_rows[1:])
        eval_rows = _rows(out / "metrics_eval.csv")
        assert eval_rows[0] == ["step", "R@1", "R@2", "R@4", "MAP@R"]
        assert [r[0] for r in eval_rows[1:]] == ["2", "4"]
        assert (out / "config.yaml").exists()
        assert [s for s, _ in summary.reports] == [2, 4]

    def test_step_ms_recorded_on_request(self, tiny_config, tmp_path):
        tiny_config.run.record_step_ms = True
        Trainer(Experiment.build(tiny_config), tmp_path).run()
        assert all(float(r[4]) > 0 for r in _rows(tmp_path / "metrics.csv")[1:])

    def test_zero_steps_evaluates_once(self, tiny_config, tmp_path):
        tiny_config.run.steps = 0
        summary = Trainer(Experiment.build(tiny_config), tmp_path).run()
        assert len(_rows(tmp_path / "metrics.csv")) == 1
        eval_rows = _rows(tmp_path / "metrics_eval.csv")
        assert len(eval_rows) == 2 and eval_rows[1][0] == "0"
        assert summary.losses == []

    def test_final_eval_when_steps_not_multiple(self, tiny_config, tmp_path):
        tiny_config.run.steps = 3
        Trainer(Experiment.build(tiny_config), tmp_path).run()
        assert [r[0] for r in _rows(tmp_path / "metrics_eval.csv")[1:]] == ["2", "3"]

    def test_checkpoint_names_match_state(self, tiny_config, tmp_path):
        experiment = Experiment.build(tiny_config)
        Trainer(experiment, tmp_path).run()
        entries = inspect_checkpoint(tmp_path / CHECKPOINT_NAME)
        names = [e.name for e in entries]
        assert names == list(experiment.state_dict(4))
        dtypes = {e.name: e.dtype for e in entries}
        assert dtypes["meta.step"] == "i64"
        assert all(dtypes[n] == "i64" for n in names if n.endswith(".step"))
        assert any(n.startswith("proxy.class_prompts.") for n in names)
        assert any(n.startswith("optim.") for n in names)

    def test_peak_resident_bytes(self, tiny_config):
        experiment = Experiment.build(tiny_config)
        summary = Trainer(experiment).run()
        assert summary.peak_resident_bytes >= experiment.model.params.nbytes


class TestResume:
    """A resumed run continues the same trajectory."""

    def test_continuation_is_identical(self, tiny_config, tmp_path):
        uninterrupted = _losses(tiny_config)

        tiny_config.run.steps = 2
        first = Trainer(Experiment.build(tiny_config), tmp_path).run()
        tiny_config.run.steps = 4
        experiment = Experiment.build(tiny_config)
        start = resume_step(experiment, tmp_path / CHECKPOINT_NAME)
        second = Trainer(experiment, tmp_path).run(start)

        assert start == 2
        assert first.losses + second.losses == uninterrupted
        assert [r[0] for r in _rows(tmp_path / "metrics.csv")[1:]] == ["1", "2", "3", "4"]

    def test_mismatched_checkpoint(self, tiny_config, tmp_path):
        path = tmp_path / "bad.vpck"
        save_checkpoint(path, {"patch_embed.weight": np.zeros((1, 1), dtype=np.float32)})
        with pytest.raises(CheckpointError):
            resume_step(Experiment.build(tiny_config), path)


class TestPretrain:
    """Classifier pretraining and backbone initialization."""

    def test_losses_and_round_trip(self, tiny_config, tmp_path):
        model, losses = pretrain(tiny_config)
        assert len(losses) == 3
        assert all(np.isfinite(losses))
        path = tmp_path / "backbone.vpck"
        save_backbone(model, path)
        fresh = ViTModel(tiny_config.model, seed=7)
        load_backbone(fresh, path)
        for name in model.params:
            np.testing.assert_array_equal(fresh.params[name].data, model.params[name].data)

    def test_init_checkpoint_used_by_build(self, tiny_config, tmp_path):
        model, _ = pretrain(tiny_config)
        path = tmp_path / "backbone.vpck"
        save_backbone(model, path)
        tiny_config.run.init_checkpoint = str(path)
        experiment = Experiment.build(tiny_config)
        np.testing.assert_array_equal(experiment.model.params["patch_embed.weight"].data,
                                      model.params["patch_embed.weight"].data)

    def test_reserved_classes_are_disjoint_from_tuning(self, tiny_config):
        tiny_config.pretrain.classes = 2
        splits = load_splits(tiny_config)
        assert splits.pretrain.class_names == ["class_000", "class_001"]
        assert splits.train.class_names == ["class_002", "class_003", "class_004"]
        assert splits.eval.class_names == ["class_005", "class_006", "class_007"]
        experiment = Experiment.build(tiny_config)
        assert experiment.train_set.class_names == splits.train.class_names
        _, losses = pretrain(tiny_config)
        assert len(losses) == tiny_config.pretrain.steps

    def test_without_reserved_classes_pretrain_uses_train_split(self, tiny_config):
        splits = load_splits(tiny_config)
        assert splits.pretrain is splits.train

    def test_missing_tensor(self, tiny_config, tmp_path):
        path = tmp_path / "partial.vpck"
        save_checkpoint(path, {"cls_token": np.zeros((1, 1, 8), dtype=np.float32)})
        with pytest.raises(CheckpointError):
            load_backbone(ViTModel(tiny_config.model), path)

    def test_unexpected_tensor(self, tiny_config, tmp_path):
        model = ViTModel(tiny_config.model)
        state = model.params.state_dict()
        state["mystery"] = np.zeros(1, dtype=np.float32)
        path = tmp_path / "extra.vpck"
        save_checkpoint(path, state)
        with pytest.raises(CheckpointError):
            load_backbone(model, path)


class TestBatchPrefetcher:
    """Background batch production."""

    def test_order(self):
        def produce(step):
            return Batch(np.zeros((1, 1, 1, 3)), np.array([step]), step)

        prefetcher = BatchPrefetcher(produce, range(3, 7))
        try:
            assert [b.step for b in prefetcher] == [3, 4, 5, 6]
        finally:
            prefetcher.close()

    def test_worker_error_is_raised(self):
        def produce(step):
            if step == 1:
                raise RuntimeError("bad batch")
            return Batch(np.zeros((1, 1, 1, 3)), np.array([0]), step)

        prefetcher = BatchPrefetcher(produce, range(3))
        try:
            with pytest.raises(RuntimeError, match="bad batch"):
                list(prefetcher)
        finally:
            prefetcher.close()


@pytest.mark.integration
class TestDrivers:
    """Method comparison and step timing."""

    def test_compare(self, tiny_config, tmp_path):
        tiny_config.run.steps = 2
        rows = compare(tiny_config, ["linear_probe", "vptsp_g"], tmp_path)
        assert [r.method for r in rows] == ["linear_probe", "vptsp_g"]
        for row in rows:
            expected = Experiment.build(config_for_method(tiny_config, row.method)).param_count()
            assert row.tunable_params == expected.tunable
            assert 0.0 <= row.recall_at_1 <= 1.0
            assert (tmp_path / row.method / CHECKPOINT_NAME).exists()
        assert rows[0].tunable_params < rows[1].tunable_params

    def test_bench(self, tiny_config):
        rows = bench(tiny_config, ["linear_probe", "full"], steps=3)
        assert [r.method for r in rows] == ["linear_probe", "full"]
        assert all(r.median_ms > 0 for r in rows)


@pytest.mark.slow
class TestBenchOrdering:
    """Step latency follows the amount of backward work each method does."""

    def test_median_ordering(self, tiny_config):
        tiny_config.model = ModelConfig(image_size=16, patch_size=4, layers=4, hidden_dim=32,
                                        heads=4, head_out_dim=16)
        tiny_config.data.synthetic = SyntheticConfig(classes=8, per_class=4, image_size=16,
                                                     cluster_separation=1.0, noise_std=0.05)
        tiny_config.validate()
        rows = {r.method: r.median_ms for r in bench(tiny_config, ["linear_probe", "vpt", "full"],
                                                      steps=30)}
        tolerance = 1.25
        assert rows["linear_probe"] <= rows["vpt"] * tolerance
        assert rows["vpt"] <= rows["full"] * tolerance


def acceptance_config(seed, output_dir):
    """Twelve noise-free classes: four to pretrain on, four to tune on, four to evaluate."""
    config = make_tiny_config(str(output_dir))
    config.data.synthetic = SyntheticConfig(classes=12, per_class=4, image_size=8,
                                            cluster_separation=1.0, noise_std=0.0)
    config.data.train_classes = 4
    config.pretrain.classes = 4
    config.pretrain.steps = 30
    config.run.steps = 20
    config.run.eval_every = 20
    config.run.seed = seed
    config.validate()
    return config


@pytest.mark.slow
@pytest.mark.integration
class TestAcceptance:
    """Pretrain on one class set, tune on a disjoint one, retrieve unseen classes."""

    def test_semantic_proxies_match_or_beat_linear_head(self, tmp_path):
        recalls = {"linear_probe": [], "vptsp_g": []}
        for seed in range(5):
            config = acceptance_config(seed, tmp_path / f"seed{seed}")
            splits = load_splits(config)
            pretrain_classes = set(splits.pretrain.class_names)
            assert not pretrain_classes & set(splits.train.class_names)
            assert not pretrain_classes & set(splits.eval.class_names)

            model, _ = pretrain(config)
            backbone = tmp_path / f"backbone{seed}.vpck"
            save_backbone(model, backbone)
            config.run.init_checkpoint = str(backbone)
            for row in compare(config, ["linear_probe", "vptsp_g"]):
                recalls[row.method].append(row.recall_at_1)

        assert min(recalls["vptsp_g"]) >= 0.9
        assert np.mean(recalls["vptsp_g"]) >= np.mean(recalls["linear_probe"])
