"""Tests for utivad.models — specs, training, inference, persistence."""

from fractions import Fraction

import numpy as np
import pytest

from utivad.config import DEFAULT_CONFIG
from utivad.dsp import MelStats
from utivad.errors import ValidationError
from utivad.metrics import roc_auc
from utivad.models import (ModelSpec, SampleSet, TrainConfig, build_model, classify_frames, evaluate_loss,
                           load_model, predict_melspec, preset_spec, save_model, sidecar_path, train)
from utivad.pipeline import evaluate_classifier
from utivad.prep import UtiSequence, make_windows
from utivad.report import classification_report, write_report

SMALL_VAD = ModelSpec("vad_cnn2d", "1/8", (8, 16))
SMALL_SSI = ModelSpec("ssi_conv3d", "1/5", (64, 32))


def toy_vad_sets(rng, n=24):
    """Bright frames are speech, dark frames silence."""
    labels = np.arange(n) % 2
    frames = rng.uniform(-1, 0, size=(n, 8, 16)) + labels[:, None, None]
    return SampleSet.for_vad([frames[: n // 2]], [labels[: n // 2]]), \
        SampleSet.for_vad([frames[n // 2:]], [labels[n // 2:]])


class TestModelSpec:

    def test_presets(self):
        spec = preset_spec("vad_cnn2d")
        assert spec.width_scale == Fraction(1, 4)
        assert spec.image_shape == (32, 64)
        assert preset_spec("ssi_conv3d", "paper_exact").width_scale == 1
        assert preset_spec("vad_cnn2d", "full") == preset_spec("vad_cnn2d", "paper_exact")

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            ModelSpec("transformer")

    def test_dict_round_trip(self):
        assert ModelSpec.from_dict(SMALL_VAD.to_dict()) == SMALL_VAD

    def test_loss_by_kind(self):
        assert SMALL_VAD.loss == "bce"
        assert SMALL_SSI.loss == "mse"
        assert SMALL_SSI.input_shape == (25, 64, 32, 1)

    def test_predict_checks_shape(self):
        model = build_model(SMALL_VAD)
        with pytest.raises(ValidationError):
            model.predict(np.zeros((2, 16, 8, 1)))


class TestTrainConfig:

    def test_for_vad(self):
        cfg = TrainConfig.for_kind("vad_cnn2d", DEFAULT_CONFIG)
        assert (cfg.optimizer, cfg.learning_rate, cfg.batch_size) == ("sgd", 0.001, 64)

    def test_for_ssi_with_override(self):
        cfg = TrainConfig.for_kind("ssi_conv3d", DEFAULT_CONFIG, max_epochs=2, seed=5)
        assert (cfg.optimizer, cfg.learning_rate, cfg.batch_size) == ("adam", 0.0002, 16)
        assert cfg.max_epochs == 2
        assert cfg.seed == 5

    def test_rejects_bad_values(self):
        with pytest.raises(ValidationError):
            TrainConfig(optimizer="lbfgs")
        with pytest.raises(ValidationError):
            TrainConfig(patience=0)
        with pytest.raises(ValidationError):
            TrainConfig(silence_mode="everything")


class TestSampleSet:

    def test_vad_batches(self, rng):
        frames = rng.standard_normal((5, 8, 16))
        data = SampleSet.for_vad([frames], [np.array([0, 1, 1, 0, 1])])
        x, y = data.batch([1, 3])
        assert x.shape == (2, 8, 16, 1)
        np.testing.assert_array_equal(y, [[1.0], [0.0]])

    def test_label_count_mismatch(self, rng):
        with pytest.raises(ValidationError):
            SampleSet.for_vad([rng.standard_normal((5, 8, 16))], [np.zeros(4)])

    def test_ssi_windows(self, rng):
        frames = rng.standard_normal((30, 4, 4))
        mel = rng.standard_normal((30, 80))
        data = SampleSet.for_ssi([frames], [mel], [np.ones(30)])
        assert [s.center for s in data.samples] == [12, 13, 14, 15, 16, 17]
        x, y = data.batch([0])
        assert x.shape == (1, 25, 4, 4, 1)
        np.testing.assert_array_equal(x[0, :, :, :, 0], frames[0:25])
        np.testing.assert_array_equal(y[0], mel[12])


class TestTraining:

    def test_memorizes_one_sample(self, rng):
        frame = rng.standard_normal((1, 8, 16))
        data = SampleSet.for_vad([frame], [np.array([1])])
        model = build_model(SMALL_VAD, seed=0)
        cfg = TrainConfig(optimizer="adam", learning_rate=0.05, batch_size=1, max_epochs=100, patience=100)
        result = train(model, data, data, cfg)
        assert result.best_dev_loss < 0.1
        assert classify_frames(model, UtiSequence(frame)).labels[0] == 1

    def test_epoch_zero_is_untrained(self, rng):
        train_set, dev_set = toy_vad_sets(rng)
        model = build_model(SMALL_VAD, seed=1)
        result = train(model, train_set, dev_set, TrainConfig(max_epochs=0))
        assert len(result.history) == 1
        assert result.best_epoch == 0

    def test_dev_loss_improves(self, rng):
        train_set, dev_set = toy_vad_sets(rng)
        model = build_model(SMALL_VAD, seed=1)
        cfg = TrainConfig(optimizer="adam", learning_rate=0.01, batch_size=4, max_epochs=15, patience=15)
        result = train(model, train_set, dev_set, cfg)
        assert result.best_dev_loss < result.history[0]["dev_loss"]

    def test_same_seed_same_history(self):
        histories = []
        for _ in range(2):
            train_set, dev_set = toy_vad_sets(np.random.default_rng(3))
            model = build_model(SMALL_VAD, seed=2)
            result = train(model, train_set, dev_set, TrainConfig(batch_size=4, max_epochs=3, seed=7))
            histories.append(result.history)
        assert histories[0] == histories[1]

    def test_best_weights_restored(self, rng):
        train_set, dev_set = toy_vad_sets(rng)
        model = build_model(SMALL_VAD, seed=1)
        cfg = TrainConfig(optimizer="adam", learning_rate=0.01, batch_size=4, max_epochs=6, patience=6)
        result = train(model, train_set, dev_set, cfg)
        assert evaluate_loss(model, dev_set) == pytest.approx(result.best_dev_loss)

    def test_empty_dev_set(self, rng):
        train_set, _ = toy_vad_sets(rng)
        with pytest.raises(ValidationError):
            train(build_model(SMALL_VAD), train_set, train_set.subset([]), TrainConfig())


class TestInference:

    def test_threshold_extremes(self, rng):
        model = build_model(SMALL_VAD, seed=0)
        seq = UtiSequence(rng.standard_normal((6, 8, 16)))
        assert classify_frames(model, seq, threshold=0.0).labels.all()
        assert not classify_frames(model, seq, threshold=1.01).labels.any()

    def test_probabilities_in_unit_interval(self, rng):
        model = build_model(SMALL_VAD, seed=0)
        track = classify_frames(model, UtiSequence(rng.standard_normal((4, 8, 16))))
        assert ((track.probabilities > 0) & (track.probabilities < 1)).all()

    def test_wrong_image_size(self, rng):
        with pytest.raises(ValidationError):
            classify_frames(build_model(SMALL_VAD), UtiSequence(rng.standard_normal((2, 16, 32))))

    def test_predict_melspec(self, rng):
        model = build_model(SMALL_SSI, seed=0)
        windows = make_windows(UtiSequence(rng.standard_normal((27, 64, 32))))
        mel = predict_melspec(model, windows)
        assert mel.frames.shape == (3, 80)

    def test_zero_head_predicts_zero(self, rng):
        model = build_model(SMALL_SSI, seed=0)
        head = model.net.layers[-1]
        head.kernel.value[...] = 0.0
        head.bias.value[...] = 0.0
        mel = predict_melspec(model, make_windows(UtiSequence(rng.standard_normal((26, 64, 32)))))
        assert mel.n_frames == 2
        assert not mel.frames.any()

    def test_classifier_cannot_predict_mel(self):
        with pytest.raises(ValidationError):
            predict_melspec(build_model(SMALL_VAD), [])


class TestPersistence:

    def test_save_and_load(self, tmp_path, rng):
        model = build_model(SMALL_VAD, seed=4)
        model.threshold = 0.4
        path = str(tmp_path / "vad.wts")
        save_model(path, model)
        assert sidecar_path(path) == str(tmp_path / "vad.json")
        back = load_model(path)
        assert back.spec == model.spec
        assert back.threshold == 0.4
        x = rng.standard_normal((3, 8, 16, 1))
        np.testing.assert_allclose(back.predict(x), model.predict(x), atol=1e-5)

    def test_stats_survive(self, tmp_path):
        model = build_model(SMALL_SSI, seed=0)
        model.stats = MelStats(np.arange(80.0), np.full(80, 2.0))
        path = str(tmp_path / "ssi.wts")
        save_model(path, model)
        back = load_model(path)
        np.testing.assert_array_equal(back.stats.mean, model.stats.mean)
        np.testing.assert_array_equal(back.stats.std, model.stats.std)


class TestSyntheticClassifier:
    """Reduced-width frame classifiers trained on the synthetic corpus."""

    def test_held_out_accuracy_and_auc(self, vad_corpus, trained_vads):
        test = vad_corpus.split("test")
        labels = np.concatenate([u.labels.labels for u in test])
        accuracies, aucs = [], []
        for model in trained_vads:
            tracks = [classify_frames(model, UtiSequence(u.frames, u.raw.fps)) for u in test]
            accuracies.append(np.mean(np.concatenate([t.labels for t in tracks]) == labels))
            aucs.append(roc_auc(labels, np.concatenate([t.probabilities for t in tracks])))
        assert np.mean(accuracies) >= 0.95
        assert np.mean(aucs) >= 0.97

    def test_reruns_are_byte_identical(self, vad_corpus, fit_frame_classifier, tmp_path):
        outputs = []
        for name in ("a", "b"):
            model = fit_frame_classifier(vad_corpus, seed=4, max_epochs=2)
            out = tmp_path / name
            save_model(str(out / "vad_cnn2d.wts"), model)
            matrices, aucs, _ = evaluate_classifier(model, vad_corpus)
            write_report(str(out), "eval_vad", classification_report(matrices, aucs, run_id="eval-vad"))
            outputs.append([(out / f).read_bytes()
                            for f in ("vad_cnn2d.wts", "vad_cnn2d.json", "eval_vad.json", "eval_vad.txt")])
        assert outputs[0] == outputs[1]
