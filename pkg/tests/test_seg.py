"""Segmentation harness: training, selection, evaluation hygiene."""

from dataclasses import replace

import numpy as np
import pytest
import torch

from echoadapt.data import DatasetManifest
from echoadapt.errors import (
    ConfigError,
    EmptySplit,
    PlanMismatch,
    ShapeMismatch,
    SyntheticInEvaluation,
)
from echoadapt.phantom import SOURCE_SPACE, TARGET_SPACE, make_corpus
from echoadapt.reporting import load_run_log, loss_series
from echoadapt.seg import (
    SegConfig,
    SegNet,
    delta_report,
    evaluate_segmenter,
    load_segmenter,
    predict,
    soft_dice_loss,
    synthetic_entries,
    train_segmenter,
)

RES = 32


@pytest.fixture(scope="module")
def tgt_corpus(tmp_path_factory):
    return make_corpus(
        n=16, modality="target", out_dir=tmp_path_factory.mktemp("segtgt"),
        resolution=RES, seed=31,
    )


def mirrored(manifest: DatasetManifest) -> DatasetManifest:
    """Tiny-set variant whose val split repeats the train images."""
    train = manifest.split("train")
    val = [replace(r, split="val") for r in train]
    return DatasetManifest(
        root=manifest.root, entries=list(train) + val, meta=dict(manifest.meta)
    )


def seg_config(**kwargs) -> SegConfig:
    defaults = dict(
        classes=TARGET_SPACE, resolution=RES, base_channels=8,
        epochs=4, lr=2e-3, batch_size=4, seed=0,
    )
    defaults.update(kwargs)
    return SegConfig(**defaults)


class TestSegConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"epochs": 0}, {"batch_size": 0}, {"lr": 0.0}, {"base_channels": 0}],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ConfigError):
            seg_config(**kwargs)

    def test_dict_roundtrip(self):
        config = seg_config(epochs=7, lr=5e-4)
        assert SegConfig.from_dict(config.to_dict()) == config


class TestSegNet:
    def test_output_shape(self):
        net = SegNet(seg_config())
        x = torch.randn(2, 1, RES, RES)
        assert net(x).shape == (2, len(TARGET_SPACE.classes) + 1, RES, RES)

    def test_input_shape_guard(self):
        net = SegNet(seg_config())
        with pytest.raises(ShapeMismatch):
            net(torch.randn(2, 3, RES, RES))

    def test_predict_returns_class_ids(self):
        net = SegNet(seg_config())
        ids = predict(net, torch.randn(3, 1, RES, RES))
        assert ids.shape == (3, RES, RES)
        valid = {0} | set(TARGET_SPACE.class_ids)
        assert set(np.unique(ids).tolist()) <= valid


class TestSoftDice:
    def test_perfect_prediction_near_zero(self):
        target = torch.randint(0, 3, (2, 8, 8))
        logits = torch.nn.functional.one_hot(target, 5).permute(0, 3, 1, 2).float() * 50
        assert soft_dice_loss(logits, target).item() == pytest.approx(0.0, abs=1e-4)

    def test_total_miss_near_one(self):
        target = torch.ones(1, 8, 8, dtype=torch.long)
        logits = torch.zeros(1, 3, 8, 8)
        logits[:, 2] = 50.0  # confidently predicts class 2 everywhere, truth is 1
        assert soft_dice_loss(logits, target).item() == pytest.approx(1.0, abs=1e-4)

    def test_all_background_contributes_nothing(self):
        target = torch.zeros(1, 8, 8, dtype=torch.long)
        logits = torch.randn(1, 3, 8, 8)
        assert soft_dice_loss(logits, target).item() == 0.0

    def test_hand_computed_half_overlap(self):
        # one foreground class; prediction covers half the true pixels, hard logits
        target = torch.zeros(1, 1, 4, dtype=torch.long)
        target[0, 0, :2] = 1
        logits = torch.full((1, 2, 1, 4), -50.0)
        logits[0, 1, 0, 0] = 50.0  # predict class 1 on exactly one of two true pixels
        logits[0, 0, 0, 1:] = 50.0
        # soft dice = 2*1/(1+2) = 2/3 -> loss 1/3
        assert soft_dice_loss(logits, target).item() == pytest.approx(1 / 3, abs=1e-4)


@pytest.fixture(scope="module")
def run(tgt_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("seg_run")
    config = seg_config(epochs=5)
    checkpoint = train_segmenter(config, tgt_corpus, out)
    return config, checkpoint, out


@pytest.fixture(scope="module")
def checkpoint(tgt_corpus, tmp_path_factory):
    return train_segmenter(seg_config(epochs=3), tgt_corpus, tmp_path_factory.mktemp("ev"))


@pytest.mark.slow
class TestTraining:
    def test_best_checkpoint_is_validation_argmax(self, run):
        _, checkpoint, out = run
        _, entries = load_run_log(out / "seg_log.jsonl")
        curve = [e["val_global_dice"] for e in entries if "val_global_dice" in e]
        _, payload = load_segmenter(checkpoint)
        assert payload["best_val_global_dice"] == pytest.approx(max(curve))
        assert payload["best_epoch"] == int(np.argmax(curve))

    def test_training_loss_logged_every_epoch(self, run):
        config, _, out = run
        steps, _ = loss_series(out / "seg_log.jsonl")
        assert steps.tolist() == list(range(config.epochs))

    def test_same_seed_identical_metrics(self, tgt_corpus, tmp_path):
        config = seg_config(epochs=3)
        reports = []
        for name in ("a", "b"):
            checkpoint = train_segmenter(config, tgt_corpus, tmp_path / name)
            reports.append(evaluate_segmenter(checkpoint, tgt_corpus, split="test"))
        assert reports[0]["global"] == reports[1]["global"]
        assert reports[0]["per_class"] == reports[1]["per_class"]

    def test_memorizes_tiny_set(self, tgt_corpus, tmp_path):
        tiny = mirrored(tgt_corpus)
        config = seg_config(epochs=60, base_channels=16, lr=2e-3)
        checkpoint = train_segmenter(config, tiny, tmp_path)
        report = evaluate_segmenter(checkpoint, tiny, split="train")
        assert report["global"] > 0.95

    def test_vocabulary_guard(self, tgt_corpus, tmp_path):
        config = seg_config(classes=SOURCE_SPACE)
        with pytest.raises(PlanMismatch):
            train_segmenter(config, tgt_corpus, tmp_path)


@pytest.mark.slow
class TestEvaluation:
    def test_report_structure_and_order(self, checkpoint, tgt_corpus):
        report = evaluate_segmenter(checkpoint, tgt_corpus, split="test")
        assert list(report["per_class"].keys()) == ["LA", "LV", "RV", "RA"]
        assert 0.0 <= report["global"] <= 1.0
        assert report["split"] == "test"
        assert report["n_images"] == len(tgt_corpus.split("test"))

    def test_delta_against_itself_is_zero(self, checkpoint, tgt_corpus):
        report = evaluate_segmenter(checkpoint, tgt_corpus, split="test")
        delta = delta_report(report, report)
        assert delta["global"] == 0.0
        assert delta["class_weighted"] == 0.0
        assert all(v in (0.0, None) for v in delta["per_class"].values())

    def test_named_baseline_embedded(self, checkpoint, tgt_corpus):
        baseline = evaluate_segmenter(checkpoint, tgt_corpus, split="test")
        report = evaluate_segmenter(
            checkpoint, tgt_corpus, split="test", baseline=baseline, baseline_name="real-only"
        )
        assert report["baseline"] == "real-only"
        assert report["delta"]["global"] == 0.0

    def test_refuses_fully_synthetic_corpus(self, checkpoint, tgt_corpus, tmp_path):
        fake = DatasetManifest(
            root=tgt_corpus.root,
            entries=[replace(r, split="test") for r in tgt_corpus.split("train")],
            meta={**tgt_corpus.meta, "synthetic": True},
        )
        with pytest.raises(SyntheticInEvaluation):
            evaluate_segmenter(checkpoint, fake, split="test")

    def test_refuses_synthetic_entry_smuggled_into_test(self, checkpoint, tgt_corpus, tmp_path):
        # a mixed-style manifest whose "test" split points into the synthetic root
        synth_dir = tmp_path / "synth"
        (synth_dir / "images").mkdir(parents=True)
        (synth_dir / "masks").mkdir(parents=True)
        import shutil

        sample = tgt_corpus.split("train")[0]
        shutil.copy(tgt_corpus.root / sample.image, synth_dir / "images" / "s.png")
        shutil.copy(tgt_corpus.root / sample.mask, synth_dir / "masks" / "s.png")
        import os

        smuggled = replace(
            sample,
            image=os.path.relpath(synth_dir / "images" / "s.png", tgt_corpus.root),
            mask=os.path.relpath(synth_dir / "masks" / "s.png", tgt_corpus.root),
            split="test",
        )
        manifest = DatasetManifest(
            root=tgt_corpus.root,
            entries=list(tgt_corpus.entries) + [smuggled],
            meta={
                **tgt_corpus.meta,
                "synthetic_root": os.path.relpath(synth_dir, tgt_corpus.root),
            },
        )
        assert len(synthetic_entries(manifest, "test")) == 1
        with pytest.raises(SyntheticInEvaluation):
            evaluate_segmenter(checkpoint, manifest, split="test")

    def test_empty_split(self, checkpoint, tgt_corpus):
        train_only = DatasetManifest(
            root=tgt_corpus.root,
            entries=tgt_corpus.split("train"),
            meta=dict(tgt_corpus.meta),
        )
        with pytest.raises(EmptySplit):
            evaluate_segmenter(checkpoint, train_only, split="test")

    def test_train_requires_val_split(self, checkpoint, tgt_corpus, tmp_path):
        train_only = DatasetManifest(
            root=tgt_corpus.root,
            entries=tgt_corpus.split("train"),
            meta=dict(tgt_corpus.meta),
        )
        with pytest.raises(EmptySplit):
            train_segmenter(seg_config(epochs=1), train_only, tmp_path)
