"""Shared fixtures for utivad tests."""

import json

import numpy as np
import pytest

from utivad.config import DEFAULT_CONFIG
from utivad.dsp import Waveform
from utivad.experiments import build_corpus, prepare_utterance
from utivad.models import ModelSpec, SampleSet, TrainConfig, build_model, train
from utivad.synth import SynthConfig, gen_utterance


@pytest.fixture
def sample_config():
    """A valid, fully-populated config dict."""
    return dict(DEFAULT_CONFIG)


@pytest.fixture
def config_file(tmp_path, sample_config):
    """Write sample config to a temp file and return the path."""
    path = tmp_path / "utivad.json"
    path.write_text(json.dumps(sample_config, indent=2), encoding="utf-8")
    return str(path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth_cfg():
    """Short utterances with small images."""
    return SynthConfig(min_duration_s=2.0, max_duration_s=2.5, image_shape=(16, 32))


@pytest.fixture(scope="session")
def tiny_corpus(small_synth_cfg):
    """Three synthetic utterances (one per split) prepared at 16x32."""
    utts = []
    for i, split in enumerate(("train", "dev", "test")):
        wave, seq, truth = gen_utterance(100 + i, small_synth_cfg, f"utt{i}")
        utts.append(prepare_utterance(f"utt{i}", split, wave, seq, (16, 32), dict(DEFAULT_CONFIG), truth))
    return build_corpus(utts, (16, 32))


def _speech_burst(sample_rate=16000, duration_s=2.0, spans=((0.5, 1.5),), amplitude=0.3,
                  noise=0.003, seed=0):
    """Sine bursts over a low noise floor."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    x = rng.normal(0.0, noise, n)
    for start, end in spans:
        inside = (t >= start) & (t < end)
        x[inside] += amplitude * np.sin(2 * np.pi * 220.0 * t[inside])
    return Waveform(np.clip(x, -1.0, 1.0), sample_rate)


@pytest.fixture
def speech_burst():
    return _speech_burst


@pytest.fixture(scope="session")
def vad_corpus(small_synth_cfg):
    """Eight utterances (4 train, 2 dev, 2 test) prepared at 16x32."""
    splits = ["train"] * 4 + ["dev"] * 2 + ["test"] * 2
    utts = []
    for i, split in enumerate(splits):
        wave, seq, truth = gen_utterance(300 + i, small_synth_cfg, f"vad{i}")
        utts.append(prepare_utterance(f"vad{i}", split, wave, seq, (16, 32), dict(DEFAULT_CONFIG), truth))
    return build_corpus(utts, (16, 32))


def _fit_frame_classifier(corpus, seed=0, max_epochs=8):
    """Reduced-width classifier trained on the audio-VAD labels of ``corpus``."""
    sets = {s: SampleSet.for_vad([u.frames for u in corpus.split(s)], [u.labels for u in corpus.split(s)])
            for s in ("train", "dev")}
    model = build_model(ModelSpec("vad_cnn2d", "1/8", corpus.image_shape), seed)
    cfg = TrainConfig(optimizer="adam", learning_rate=0.003, batch_size=16, max_epochs=max_epochs,
                      patience=3, seed=seed)
    train(model, sets["train"], sets["dev"], cfg)
    return model


@pytest.fixture(scope="session")
def fit_frame_classifier():
    return _fit_frame_classifier


@pytest.fixture(scope="session")
def trained_vads(vad_corpus):
    """Classifiers for seeds 0, 1 and 2."""
    return [_fit_frame_classifier(vad_corpus, seed) for seed in (0, 1, 2)]
