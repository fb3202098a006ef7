"""The speech/silence image classifier and the two spectral regression nets.

``vad_cnn2d`` classifies a single preprocessed ultrasound frame.
``ssi_conv3d`` and ``ssi_conv3d_bilstm`` map a 25-frame window to the 80
log-mel values of its centre frame. A ``width_scale`` below one shrinks
every hidden width; the input and output sizes never change.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .containers import read_wts, write_json_atomic, write_wts
from .dsp import MelStats, MelTrack
from .errors import DimensionError, DivergenceError, NonFiniteError, ValidationError
from .losses import get_loss
from .nn import (Activation, BiLSTM, Conv2D, Conv3D, Dense, Dropout, Flatten, MaxPool, Reshape,
                 Sequential)
from .optim import OPTIMIZERS, OptimizerState, optimizer_step
from .prep import IMAGE_SHAPE, UTI_FPS, WINDOW_LEN, LabelTrack, Sample, UtiSequence, window_centers

log = logging.getLogger("utivad.models")

VAD_KIND = "vad_cnn2d"
SSI_KINDS = ("ssi_conv3d", "ssi_conv3d_bilstm")
KINDS = (VAD_KIND,) + SSI_KINDS
N_MEL_OUT = 80
SILENCE_MODES = ("removed", "keep180")

# (width_scale, image shape) per preset; "full" is an alias of "paper_exact"
PRESETS = {
    "paper_exact": {VAD_KIND: (Fraction(1), (64, 128)), "ssi": (Fraction(1), (64, 128))},
    "reduced": {VAD_KIND: (Fraction(1, 4), (32, 64)), "ssi": (Fraction(1, 5), (64, 128))},
}
PRESETS["full"] = PRESETS["paper_exact"]


def parse_scale(value) -> Fraction:
    if isinstance(value, Fraction):
        scale = value
    elif isinstance(value, str):
        scale = Fraction(value)
    else:
        scale = Fraction(value).limit_denominator(1000)
    if not 0 < scale <= 1:
        raise ValidationError(f"width_scale must be in (0, 1], got {value}")
    return scale


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    width_scale: Fraction = Fraction(1)
    image_shape: tuple = IMAGE_SHAPE
    window: int = WINDOW_LEN
    dropout: float = 0.2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "width_scale", parse_scale(self.width_scale))
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))

    @property
    def is_vad(self) -> bool:
        return self.kind == VAD_KIND

    @property
    def input_shape(self) -> tuple:
        h, w = self.image_shape
        if self.is_vad:
            return (h, w, 1)
        return (self.window, h, w, 1)

    @property
    def loss(self) -> str:
        return "bce" if self.is_vad else "mse"

    def width(self, base: int) -> int:
        scaled = base * self.width_scale
        if scaled.denominator != 1:
            raise ValidationError(
                f"width_scale {self.width_scale} gives a non-integer width {float(scaled):g} for {base}")
        return int(scaled)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "width_scale": str(self.width_scale),
            "image_shape": list(self.image_shape),
            "window": self.window,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["kind"], d.get("width_scale", "1"), tuple(d.get("image_shape", IMAGE_SHAPE)),
                   d.get("window", WINDOW_LEN), d.get("dropout", 0.2))


def preset_spec(kind: str, preset: str = "reduced") -> ModelSpec:
    if preset not in PRESETS:
        raise ValidationError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    scale, shape = PRESETS[preset][VAD_KIND if kind == VAD_KIND else "ssi"]
    return ModelSpec(kind, scale, shape)


@dataclass
class Model:
    spec: ModelSpec
    net: Sequential
    threshold: float = 0.5
    stats: MelStats | None = None

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Infer-mode outputs, batched in order."""
        x = np.asarray(x)
        if x.shape[1:] != self.spec.input_shape:
            raise ValidationError(
                f"{self.spec.kind} expects samples of shape {self.spec.input_shape}, got {x.shape[1:]}")
        outs = [self.net.forward(x[i:i + batch_size], training=False) for i in range(0, len(x), batch_size)]
        if not outs:
            return np.zeros((0,) + tuple(self.net.output_shape))
        return np.concatenate(outs, axis=0)


# ============================================================
# Architectures
# ============================================================

def _vad_layers(spec: ModelSpec) -> list:
    layers = []
    for base in (32, 64, 128):
        layers += [Conv2D(spec.width(base), (3, 3), padding="same"), Activation("relu"), MaxPool((2, 2))]
    layers += [Flatten(), Dense(spec.width(128)), Activation("relu"), Dense(1), Activation("sigmoid")]
    return layers


def _ssi_conv_stack(spec: ModelSpec) -> list:
    rate = spec.dropout
    return [
        Conv3D(spec.width(30), (5, 13, 13), (5, 2, 2)), Dropout(rate),
        Conv3D(spec.width(60), (1, 13, 13), (1, 2, 2)), Dropout(rate),
        MaxPool((1, 2, 2)),
        Conv3D(spec.width(90), (1, 13, 13), (1, 2, 1)), Dropout(rate),
        Conv3D(spec.width(85), (1, 13, 13), (1, 2, 2)), Dropout(rate),
        MaxPool((1, 2, 2)),
    ]


def _stack_output_shape(layers: list, input_shape: tuple) -> tuple:
    shape = input_shape
    for layer in layers:
        layer.name = layer.name or "shape_check"
        shape = layer.compute_output_shape(shape)
        layer.name = None
    return shape


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    if spec.is_vad:
        layers = _vad_layers(spec)
    else:
        layers = _ssi_conv_stack(spec)
        steps, h, w, c = _stack_output_shape(layers, spec.input_shape)
        if spec.kind == "ssi_conv3d":
            layers += [Flatten(), Dense(spec.width(500)), Dropout(spec.dropout), Dense(N_MEL_OUT)]
        else:
            layers += [Reshape((steps, h * w * c)), BiLSTM(spec.width(320)), Dense(N_MEL_OUT)]

    net = Sequential(layers, spec.input_shape, seed=seed)

    if spec.width_scale == 1 and spec.image_shape == (64, 128):
        shapes = {layer.kind: layer.output_shape for layer in net.layers}
        if spec.is_vad and shapes["flatten"] != (16384,):
            raise DimensionError("flatten", f"expected 16384 features, got {shapes['flatten']}")
        if spec.kind == "ssi_conv3d_bilstm" and spec.window == WINDOW_LEN and shapes["reshape"] != (5, 340):
            raise DimensionError("reshape", f"expected (5, 340), got {shapes['reshape']}")

    log.debug("built %s (scale %s, input %s): %d parameters",
              spec.kind, spec.width_scale, spec.input_shape, net.n_params())
    return Model(spec, net)


# ============================================================
# Datasets
# ============================================================

@dataclass
class SampleSet:
    """Training examples indexed into per-utterance frame stacks.

    ``frames[u]`` is a preprocessed ``[n, H, W]`` stack. With ``window == 1``
    an example is a single frame with its 0/1 label as target; otherwise it
    is the ``window`` frames around ``center`` with ``targets[u][center]``.
    """

    frames: list
    samples: list[Sample]
    window: int = 1
    targets: list | None = None

    def __post_init__(self):
        if self.window > 1 and self.targets is None:
            raise ValidationError("windowed sample sets need mel targets")

    def __len__(self) -> int:
        return len(self.samples)

    @classmethod
    def for_vad(cls, frames: list, labels: list) -> "SampleSet":
        samples = []
        for u, (stack, lab) in enumerate(zip(frames, labels)):
            lab = np.asarray(getattr(lab, "labels", lab))
            if lab.size != len(stack):
                raise ValidationError(f"utterance {u}: {lab.size} labels for {len(stack)} frames")
            samples += [Sample(u, i, int(v)) for i, v in enumerate(lab)]
        return cls(list(frames), samples, 1)

    @classmethod
    def for_ssi(cls, frames: list, targets: list, labels: list, window: int = WINDOW_LEN) -> "SampleSet":
        samples = []
        for u, (stack, mel, lab) in enumerate(zip(frames, targets, labels)):
            lab = np.asarray(getattr(lab, "labels", lab))
            for c in window_centers(len(stack), window):
                if c < len(mel) and c < lab.size:
                    samples.append(Sample(u, int(c), int(lab[c])))
        return cls(list(frames), samples, window, [np.asarray(t, dtype=np.float64) for t in targets])

    def subset(self, samples: list[Sample]) -> "SampleSet":
        return SampleSet(self.frames, list(samples), self.window, self.targets)

    def inputs(self, indices) -> np.ndarray:
        half = self.window // 2
        chosen = [self.samples[i] for i in indices]
        if self.window == 1:
            x = np.stack([self.frames[s.utt][s.center] for s in chosen])
        else:
            x = np.stack([self.frames[s.utt][s.center - half:s.center - half + self.window] for s in chosen])
        return x.astype(np.float64)[..., None]

    def outputs(self, indices) -> np.ndarray:
        chosen = [self.samples[i] for i in indices]
        if self.window == 1:
            return np.array([[s.label] for s in chosen], dtype=np.float64)
        return np.stack([self.targets[s.utt][s.center] for s in chosen])

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs(indices), self.outputs(indices)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int8)


# ============================================================
# Training
# ============================================================

@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd"
    learning_rate: float = 0.001
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    silence_mode: str = "removed"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ValidationError("learning rate must be > 0")
        if self.patience < 1:
            raise ValidationError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValidationError("batch_size must be >= 1 and max_epochs >= 0")
        if self.silence_mode not in SILENCE_MODES:
            raise ValidationError(f"unknown silence mode {self.silence_mode!r}")

    @classmethod
    def for_kind(cls, kind: str, config: dict, **overrides) -> "TrainConfig":
        if kind == VAD_KIND:
            base = dict(optimizer=config.get("vad_optimizer", "sgd"), learning_rate=config.get("lr_vad", 0.001),
                        batch_size=config.get("batch_size_vad", 64))
        else:
            base = dict(optimizer=config.get("ssi_optimizer", "adam"), learning_rate=config.get("lr_ssi", 0.0002),
                        batch_size=config.get("batch_size_ssi", 16))
        base.update(max_epochs=config.get("max_epochs", 30), patience=config.get("patience", 3))
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainResult:
    model: Model
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_dev_loss(self) -> float:
        return self.history[self.best_epoch]["dev_loss"]


def evaluate_loss(model: Model, data: SampleSet, batch_size: int = 64) -> float:
    """Infer-mode loss over the whole set (mean over every output element)."""
    if not len(data):
        raise ValidationError("cannot evaluate on an empty set")
    loss_fn = get_loss(model.spec.loss)
    preds, targets = [], []
    for start in range(0, len(data), batch_size):
        idx = range(start, min(start + batch_size, len(data)))
        x, y = data.batch(idx)
        preds.append(model.net.forward(x, training=False))
        targets.append(y)
    loss, _ = loss_fn(np.concatenate(preds), np.concatenate(targets))
    return loss


def train(model: Model, train_set: SampleSet, dev_set: SampleSet, cfg: TrainConfig) -> TrainResult:
    """Minibatch training with early stopping on dev loss.

    Epoch 0 records the untrained losses. The weights of the best dev epoch
    (epoch 0 included) are restored before returning.
    """
    if not len(train_set):
        raise ValidationError("training set is empty")
    if not len(dev_set):
        raise ValidationError("dev set is empty; it is needed for early stopping")

    net = model.net
    loss_fn = get_loss(model.spec.loss)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    net.reseed_dropout(cfg.seed)
    state = OptimizerState(cfg.optimizer, cfg.learning_rate)

    log.info("=" * 60)
    log.info("Training %s  samples=%d  dev=%d  params=%d", model.spec.kind, len(train_set),
             len(dev_set), net.n_params())
    log.info("Optimizer: %s lr=%g  batch=%d  epochs<=%d  patience=%d  seed=%d", cfg.optimizer,
             cfg.learning_rate, cfg.batch_size, cfg.max_epochs, cfg.patience, cfg.seed)
    log.info("=" * 60)

    history = [{
        "epoch": 0,
        "train_loss": evaluate_loss(model, train_set, cfg.batch_size),
        "dev_loss": evaluate_loss(model, dev_set, cfg.batch_size),
    }]
    best_epoch, best_loss, best_state = 0, history[0]["dev_loss"], net.state_dict()
    log.info("epoch %3d  train %.6f  dev %.6f", 0, history[0]["train_loss"], best_loss)

    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            x, y = train_set.batch(order[start:start + cfg.batch_size])
            try:
                out = net.forward(x, training=True)
                loss, grad = loss_fn(out, y)
                if not math.isfinite(loss):
                    raise DivergenceError(epoch, b, loss)
                net.zero_grad()
                net.backward(grad)
                optimizer_step(net.params(), state)
            except NonFiniteError as e:
                log.error("non-finite values at epoch %d batch %d: %s", epoch, b, e)
                raise DivergenceError(epoch, b, float("nan")) from e
            losses.append(loss)

        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "dev_loss": evaluate_loss(model, dev_set, cfg.batch_size),
        }
        history.append(record)
        log.info("epoch %3d  train %.6f  dev %.6f", epoch, record["train_loss"], record["dev_loss"])

        if record["dev_loss"] < best_loss:
            best_epoch, best_loss, best_state = epoch, record["dev_loss"], net.state_dict()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop after epoch %d (best epoch %d, dev %.6f)", epoch, best_epoch, best_loss)
                break

    net.load_state_dict(best_state)
    return TrainResult(model, history, best_epoch)


# ============================================================
# Inference
# ============================================================

def frame_probabilities(model: Model, seq: UtiSequence, batch_size: int = 64) -> np.ndarray:
    if not model.spec.is_vad:
        raise ValidationError(f"{model.spec.kind} is not a frame classifier")
    if seq.image_shape != model.spec.image_shape:
        raise ValidationError(
            f"frames are {seq.image_shape}, the classifier expects {model.spec.image_shape}; preprocess first")
    x = seq.frames.astype(np.float64)[..., None]
    return model.predict(x, batch_size)[:, 0]


def classify_frames(model: Model, seq: UtiSequence, threshold: float | None = None) -> LabelTrack:
    """Per-frame speech probability and its thresholded label."""
    threshold = model.threshold if threshold is None else threshold
    probs = frame_probabilities(model, seq)
    return LabelTrack((probs >= threshold).astype(np.int8), probs, threshold)


def predict_melspec(model: Model, windows, fps: float = UTI_FPS, batch_size: int = 16) -> MelTrack:
    """One 80-band vector per window, in the standardized target domain.

    ``windows`` is the list from ``make_windows`` or a stacked array.
    """
    if model.spec.is_vad:
        raise ValidationError("the frame classifier does not predict mel spectra")
    if isinstance(windows, list):
        if not windows:
            return MelTrack(np.zeros((0, N_MEL_OUT)), fps, model.stats)
        windows = np.stack([w for w, _ in windows])
    return MelTrack(model.predict(np.asarray(windows, dtype=np.float64), batch_size), fps, model.stats)


# ============================================================
# Persistence
# ============================================================

def sidecar_path(path: str) -> str:
    return os.path.splitext(path)[0] + ".json"


def save_model(path: str, model: Model) -> None:
    """Weights to ``.wts`` (float32) and the spec to a JSON sidecar."""
    write_wts(path, model.net.state_dict())
    write_json_atomic(sidecar_path(path), {
        **model.spec.to_dict(),
        "input_shape": list(model.spec.input_shape),
        "threshold": model.threshold,
        "stats": model.stats.to_dict() if model.stats is not None else None,
    })


def load_model(path: str) -> Model:
    with open(sidecar_path(path), "r", encoding="utf-8") as f:
        meta = json.load(f)
    spec = ModelSpec.from_dict(meta)
    model = build_model(spec)
    model.net.load_state_dict(read_wts(path))
    model.threshold = float(meta.get("threshold", 0.5))
    if meta.get("stats"):
        model.stats = MelStats.from_dict(meta["stats"])
    return model
