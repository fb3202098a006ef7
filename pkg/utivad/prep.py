"""Align audio VAD with ultrasound frames and prepare images for the networks."""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .containers import read_utiz, write_utiz
from .errors import ValidationError
from .vad import VadTrack, read_decisions_csv, write_decisions_csv

log = logging.getLogger("utivad.prep")

UTI_FPS = 81.5
IMAGE_SHAPE = (64, 128)
WINDOW_LEN = 25
KEEP_PAD_MS = 180.0
SILENCE_MODES = ("remove_silence", "keep_padded")
CUBIC_A = -0.5


@dataclass
class UtiSequence:
    frames: np.ndarray
    fps: float = UTI_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3:
            raise ValidationError(f"ultrasound frames must be [n, height, width], got {self.frames.shape}")
        if not self.fps > 0:
            raise ValidationError(f"fps must be > 0, got {self.fps}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    @property
    def source_dtype(self) -> str:
        return "u8" if self.frames.dtype == np.uint8 else "f32"


@dataclass
class LabelTrack:
    """Per-frame 0/1 labels, optionally with the probabilities they came from."""

    labels: np.ndarray
    probabilities: np.ndarray | None = None
    threshold: float = 0.5

    def __post_init__(self):
        self.labels = np.asarray(self.labels).astype(np.int8)
        if self.labels.ndim != 1 or not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValidationError("labels must be a 1-D array of 0/1")
        if self.probabilities is not None:
            self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
            if self.probabilities.shape != self.labels.shape:
                raise ValidationError("probabilities and labels differ in length")
            if np.any((self.probabilities < 0) | (self.probabilities > 1)):
                raise ValidationError("probabilities must lie in [0, 1]")
            if np.any(self.labels != (self.probabilities >= self.threshold)):
                raise ValidationError("labels disagree with probabilities at the threshold")

    def __len__(self) -> int:
        return self.labels.size


def read_uti(path: str) -> UtiSequence:
    frames, fps = read_utiz(path)
    return UtiSequence(frames, fps)


def write_uti(path: str, seq: UtiSequence) -> None:
    write_utiz(path, seq.frames, seq.fps)


def write_label_csv(path: str, track: LabelTrack) -> None:
    write_decisions_csv(path, track.labels)


def read_label_csv(path: str) -> LabelTrack:
    return LabelTrack(read_decisions_csv(path))


def label_ratio(labels) -> float | None:
    """Speech-to-silence frame ratio; None when there is no silence."""
    labels = np.asarray(labels)
    silence = int(np.count_nonzero(labels == 0))
    if not silence:
        return None
    return int(np.count_nonzero(labels == 1)) / silence


# ============================================================
# VAD -> ultrasound labels
# ============================================================

def labels_from_vad(track: VadTrack, fps_uti: float, n_uti_frames: int,
                    audio_offset_s: float = 0.0) -> LabelTrack:
    """Majority vote of the VAD frames overlapping each ultrasound frame.

    Ultrasound frame ``i`` spans ``[i/fps, (i+1)/fps)`` shifted by
    ``audio_offset_s`` into audio time. VAD frames past either end of the
    track count as silence. Ties go to speech.
    """
    if n_uti_frames <= 0:
        raise ValidationError(f"n_uti_frames must be > 0, got {n_uti_frames}")
    if not fps_uti > 0:
        raise ValidationError(f"fps must be > 0, got {fps_uti}")
    step = track.frame_ms / 1000.0
    i = np.arange(n_uti_frames)
    start = (i / fps_uti + audio_offset_s) / step
    stop = ((i + 1) / fps_uti + audio_offset_s) / step
    lo = np.floor(start + 1e-9).astype(np.int64)
    hi = np.maximum(np.ceil(stop - 1e-9).astype(np.int64), lo + 1)

    cum = np.concatenate([[0], np.cumsum(track.decisions, dtype=np.int64)])
    n = track.n_frames
    speech = cum[np.clip(hi, 0, n)] - cum[np.clip(lo, 0, n)]
    total = hi - lo
    return LabelTrack((2 * speech >= total).astype(np.int8))


# ============================================================
# Image preprocessing
# ============================================================

def minmax_normalize(img) -> np.ndarray:
    """Map to [-1, 1]; a constant image maps to zeros."""
    x = np.asarray(img, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.zeros_like(x)
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def cubic_kernel(t, a: float = CUBIC_A) -> np.ndarray:
    t = np.abs(np.asarray(t, dtype=np.float64))
    near = (a + 2.0) * t ** 3 - (a + 3.0) * t ** 2 + 1.0
    far = a * t ** 3 - 5.0 * a * t ** 2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """``[n_out, n_in]`` interpolation matrix, pixel-centre aligned, edge-clamped."""
    dst = np.arange(n_out)
    src = (dst + 0.5) * n_in / n_out - 0.5
    base = np.floor(src).astype(np.int64)
    weights = np.zeros((n_out, n_in))
    for k in range(-1, 3):
        idx = base + k
        np.add.at(weights, (dst, np.clip(idx, 0, n_in - 1)), cubic_kernel(src - idx))
    return weights


def bicubic_resize(img, out_shape: tuple[int, int] = IMAGE_SHAPE) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"bicubic_resize expects a 2-D image, got {x.shape}")
    if min(x.shape) < 2:
        raise ValidationError(f"image must be at least 2x2, got {x.shape}")
    wy = resize_weights(x.shape[0], out_shape[0])
    wx = resize_weights(x.shape[1], out_shape[1])
    return wy @ x @ wx.T


def preprocess_sequence(seq: UtiSequence, out_shape: tuple[int, int] = IMAGE_SHAPE) -> UtiSequence:
    """Per-frame minmax to [-1, 1], then bicubic resize. Returns float32 frames."""
    if min(seq.image_shape) < 2:
        raise ValidationError(f"image must be at least 2x2, got {seq.image_shape}")
    frames = seq.frames.astype(np.float64)
    lo = frames.min(axis=(1, 2), keepdims=True)
    span = frames.max(axis=(1, 2), keepdims=True) - lo
    normed = np.where(span > 0, 2.0 * (frames - lo) / np.where(span > 0, span, 1.0) - 1.0, 0.0)
    wy = resize_weights(seq.image_shape[0], out_shape[0])
    wx = resize_weights(seq.image_shape[1], out_shape[1])
    resized = np.einsum("yh,nhw,xw->nyx", wy, normed, wx)
    return UtiSequence(resized.astype(np.float32), seq.fps)


# ============================================================
# Windows and silence filtering
# ============================================================

def window_centers(n_frames: int, length: int = WINDOW_LEN, stride: int = 1) -> np.ndarray:
    if length < 1 or stride < 1:
        raise ValidationError("window length and stride must be >= 1")
    if n_frames < length:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, n_frames - length + 1, stride) + length // 2


def make_windows(seq: UtiSequence, length: int = WINDOW_LEN,
                 stride: int = 1) -> list[tuple[np.ndarray, int]]:
    """Sliding ``[length, H, W, 1]`` windows paired with their centre frame index."""
    centers = window_centers(seq.n_frames, length, stride)
    if not centers.size:
        log.warning("sequence of %d frames is shorter than the %d-frame window", seq.n_frames, length)
        return []
    view = sliding_window_view(seq.frames, length, axis=0)[::stride]
    return [(np.moveaxis(v, -1, 0)[..., None], int(c)) for v, c in zip(view, centers)]


def pad_frames(fps: float = UTI_FPS, pad_ms: float = KEEP_PAD_MS) -> int:
    return math.ceil(pad_ms / 1000.0 * fps - 1e-9)


def silence_keep_mask(labels, mode: str, fps: float = UTI_FPS, pad_ms: float = KEEP_PAD_MS) -> np.ndarray:
    """Per-frame keep decisions for one utterance's label track."""
    labels = np.asarray(getattr(labels, "labels", labels)).astype(bool)
    if mode == "remove_silence":
        return labels.copy()
    if mode == "keep_padded":
        pad = pad_frames(fps, pad_ms)
        if not labels.any() or pad == 0:
            return labels.copy()
        return ndimage.binary_dilation(labels, structure=np.ones(2 * pad + 1, dtype=bool))
    raise ValidationError(f"unknown silence mode {mode!r}; expected one of {SILENCE_MODES}")


@dataclass(frozen=True)
class Sample:
    """One training example: utterance index, centre frame and its label."""

    utt: int
    center: int
    label: int


def filter_corpus_by_labels(samples: list[Sample], mode: str, fps: float = UTI_FPS,
                            pad_ms: float = KEEP_PAD_MS) -> list[Sample]:
    """Drop silence samples, optionally keeping those near speech.

    ``keep_padded`` keeps a silence sample when its centre lies within
    ``ceil(pad_ms * fps)`` frames of a speech sample's centre in the same
    utterance. Input order is preserved.
    """
    if mode not in SILENCE_MODES:
        raise ValidationError(f"unknown silence mode {mode!r}; expected one of {SILENCE_MODES}")
    if mode == "remove_silence":
        return [s for s in samples if s.label == 1]

    pad = pad_frames(fps, pad_ms)
    speech_centers: dict[int, list[int]] = defaultdict(list)
    for s in samples:
        if s.label == 1:
            speech_centers[s.utt].append(s.center)
    sorted_centers = {utt: np.sort(np.asarray(c)) for utt, c in speech_centers.items()}

    kept = []
    for s in samples:
        if s.label == 1:
            kept.append(s)
            continue
        centers = sorted_centers.get(s.utt)
        if centers is None:
            continue
        pos = np.searchsorted(centers, s.center)
        near = [abs(int(centers[j]) - s.center) for j in (pos - 1, pos) if 0 <= j < centers.size]
        if min(near) <= pad:
            kept.append(s)
    return kept
