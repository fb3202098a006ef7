"""Audio framing, log-mel analysis, mel-cepstra, MCD and Griffin-Lim.

Mel frames use a hop of ``round(sample_rate / fps)`` samples so that one
mel frame pairs with one ultrasound frame. Analysis is a centred STFT
(zero padding of ``n_fft // 2`` at both ends), giving ``1 + N // hop``
frames for ``N`` samples.
"""

import io
import logging
import math
from collections.abc import Iterable
from dataclasses import dataclass

import librosa
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct
from scipy.io import wavfile
from scipy.signal import get_window

from .containers import read_melz, write_bytes_atomic, write_melz
from .errors import ValidationError

log = logging.getLogger("utivad.dsp")

N_MELS = 80
N_CEPSTRA = 13
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8
MCD_SCALE = 10.0 / math.log(10.0)


# ============================================================
# Types
# ============================================================

@dataclass
class Waveform:
    """Mono samples in [-1, 1]. An empty waveform marks "no speech kept"."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValidationError(f"waveform must be mono, got shape {self.samples.shape}")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValidationError(f"sample rate must be a positive integer, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0:
            raise ValidationError("waveform samples must lie in [-1, 1]")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def rms(self) -> float:
        if not self.samples.size:
            return 0.0
        return float(np.sqrt(np.mean(self.samples ** 2)))


@dataclass
class MelStats:
    """Per-band mean and (floored) standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValidationError("mel stats need matching 1-D mean and std")
        if np.any(self.std <= 0):
            raise ValidationError("mel stats std must be > 0")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MelStats":
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]))


@dataclass
class MelTrack:
    """Log-mel frames ``[n_frames, n_mels]``; ``stats`` is set when standardized."""

    frames: np.ndarray
    fps: float
    stats: MelStats | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValidationError(f"mel frames must be 2-D, got shape {self.frames.shape}")
        if not self.fps > 0:
            raise ValidationError(f"fps must be > 0, got {self.fps}")
        if self.stats is not None and self.stats.mean.shape != (self.frames.shape[1],):
            raise ValidationError("mel stats do not match the number of bands")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    @property
    def standardized(self) -> bool:
        return self.stats is not None


@dataclass
class CepstraTrack:
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] < 2:
            raise ValidationError("cepstra need at least c0 and c1 per frame")
        if not np.all(np.isfinite(self.frames)):
            raise ValidationError("cepstra contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


# ============================================================
# WAV I/O
# ============================================================

def read_wav(path: str) -> Waveform:
    """Read a mono WAV. PCM16 is scaled by 1/32768."""
    sample_rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValidationError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype.kind == "f":
        samples = np.clip(data.astype(np.float64), -1.0, 1.0)
    else:
        raise ValidationError(f"{path}: unsupported sample format {data.dtype}")
    if not samples.size:
        raise ValidationError(f"{path}: empty audio")
    return Waveform(samples, sample_rate)


def write_wav(path: str, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    buf = io.BytesIO()
    wavfile.write(buf, w.sample_rate, pcm)
    write_bytes_atomic(path, buf.getvalue())


# ============================================================
# Framing and mel analysis
# ============================================================

def frame_length(frame_ms: float, sample_rate: int) -> int:
    return int(round(frame_ms * sample_rate / 1000.0))


def frame_signal(w: Waveform, frame_ms: float, hop_samples: int | None = None,
                 window: str = "rect") -> np.ndarray:
    """Split into frames ``[n_frames, frame_len]``; the last partial frame is dropped.

    ``hop_samples`` defaults to the frame length (non-overlapping).
    """
    n = frame_length(frame_ms, w.sample_rate)
    hop = n if hop_samples is None else int(hop_samples)
    if n < 1 or hop < 1:
        raise ValidationError("frame length and hop must be at least one sample")
    if w.samples.size < n:
        return np.zeros((0, n))
    frames = sliding_window_view(w.samples, n)[::hop]
    if window == "rect":
        return frames.copy()
    if window == "hann":
        return frames * get_window("hann", n)
    raise ValidationError(f"unknown window {window!r}; expected 'hann' or 'rect'")


def hop_for_fps(sample_rate: int, fps: float) -> int:
    return int(round(sample_rate / fps))


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """HTK-scale triangular filters ``[n_mels, 1 + n_fft // 2]`` with unit peaks."""
    nyquist = sample_rate / 2.0
    fmax = nyquist if fmax is None else float(fmax)
    if fmax > nyquist:
        raise ValidationError(f"fmax {fmax} Hz exceeds the Nyquist frequency {nyquist} Hz")
    if not 0.0 <= fmin < fmax:
        raise ValidationError(f"need 0 <= fmin < fmax, got fmin={fmin} fmax={fmax}")
    return librosa.filters.mel(
        sr=sample_rate, n_fft=n_fft, n_mels=n_mels, fmin=fmin, fmax=fmax, htk=True, norm=None,
        dtype=np.float64,
    )


def mel_band_centers(sample_rate: int, n_mels: int = N_MELS, fmin: float = 0.0,
                     fmax: float | None = None) -> np.ndarray:
    fmax = sample_rate / 2.0 if fmax is None else fmax
    return librosa.mel_frequencies(n_mels=n_mels + 2, fmin=fmin, fmax=fmax, htk=True)[1:-1]


def power_spectrogram(w: Waveform, hop: int, n_fft: int) -> np.ndarray:
    """Centred Hann STFT power ``[1 + n_fft // 2, n_frames]``."""
    spec = librosa.stft(w.samples, n_fft=n_fft, hop_length=hop, window="hann",
                        center=True, pad_mode="constant")
    return np.abs(spec) ** 2


def melspectrogram(w: Waveform, fps: float, n_fft: int = 512, n_mels: int = N_MELS,
                   fmin: float = 0.0, fmax: float | None = None,
                   log_floor: float = LOG_FLOOR) -> MelTrack:
    hop = hop_for_fps(w.sample_rate, fps)
    if hop < 1:
        raise ValidationError(f"fps {fps} is too high for sample rate {w.sample_rate}")
    if n_fft < hop:
        raise ValidationError(f"n_fft {n_fft} must be >= hop {hop}")
    fb = mel_filterbank(w.sample_rate, n_fft, n_mels, fmin, fmax)
    if not w.samples.size:
        return MelTrack(np.zeros((0, n_mels)), fps)
    mel = fb @ power_spectrogram(w, hop, n_fft)
    return MelTrack(np.log(np.maximum(mel, log_floor)).T, fps)


def read_mel_track(path: str) -> MelTrack:
    frames, fps = read_melz(path)
    return MelTrack(frames, fps)


def write_mel_track(path: str, m: MelTrack) -> None:
    write_melz(path, m.frames, m.fps)


# ============================================================
# Standardization
# ============================================================

def compute_mel_stats(tracks: Iterable[MelTrack | np.ndarray]) -> MelStats:
    """Per-band statistics over every frame of ``tracks``."""
    mats = [t.frames if isinstance(t, MelTrack) else np.asarray(t, dtype=np.float64) for t in tracks]
    if not mats or not sum(m.shape[0] for m in mats):
        raise ValidationError("cannot compute mel statistics from zero frames")
    frames = np.concatenate(mats, axis=0)
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    constant = np.ptp(frames, axis=0) == 0
    mean[constant] = frames[0, constant]
    low = std < STD_FLOOR
    if np.any(low):
        log.warning("zero-variance mel band(s) %s; std floored at %g",
                    np.flatnonzero(low).tolist(), STD_FLOOR)
        std[low] = STD_FLOOR
    return MelStats(mean, std)


def standardize(m: MelTrack, stats: MelStats | None = None) -> MelTrack:
    """Per-band zero mean and unit variance. Own statistics when ``stats`` is None."""
    if m.standardized:
        raise ValidationError("mel track is already standardized")
    if stats is None:
        stats = compute_mel_stats([m])
    if stats.mean.shape != (m.n_mels,):
        raise ValidationError(f"stats cover {stats.mean.size} bands, track has {m.n_mels}")
    return MelTrack((m.frames - stats.mean) / stats.std, m.fps, stats)


def destandardize(m: MelTrack) -> MelTrack:
    if not m.standardized:
        raise ValidationError("mel track is not standardized")
    return MelTrack(m.frames * m.stats.std + m.stats.mean, m.fps)


# ============================================================
# Cepstra and MCD
# ============================================================

def mel_cepstra(m: MelTrack, n_coeffs: int = N_CEPSTRA) -> CepstraTrack:
    """Orthonormal DCT-II over the log-mel bands, keeping c0..c{n_coeffs-1}."""
    if m.standardized:
        raise ValidationError("mel cepstra need a raw log-mel track; destandardize first")
    if not 2 <= n_coeffs <= m.n_mels:
        raise ValidationError(f"n_coeffs must be in [2, {m.n_mels}], got {n_coeffs}")
    return CepstraTrack(dct(m.frames, type=2, norm="ortho", axis=1)[:, :n_coeffs])


def mcd_per_frame(ref: CepstraTrack, est: CepstraTrack) -> np.ndarray:
    if ref.frames.shape != est.frames.shape:
        raise ValidationError(
            f"cepstra shapes differ: {ref.frames.shape} vs {est.frames.shape}")
    diff = ref.frames[:, 1:] - est.frames[:, 1:]
    return MCD_SCALE * np.sqrt(2.0 * np.sum(diff * diff, axis=1))


def mcd(ref: CepstraTrack, est: CepstraTrack, mask=None) -> float:
    """Mean mel-cepstral distortion in dB, c0 excluded.

    ``mask`` is a boolean per-frame array or anything with a ``labels``
    attribute; only frames where it is true are averaged.
    """
    per_frame = mcd_per_frame(ref, est)
    if mask is not None:
        keep = np.asarray(getattr(mask, "labels", mask)).astype(bool)
        if keep.shape != per_frame.shape:
            raise ValidationError(f"mask length {keep.size} != frame count {per_frame.size}")
        per_frame = per_frame[keep]
        if not per_frame.size:
            raise ValidationError("MCD mask selects no frames")
    if not per_frame.size:
        raise ValidationError("MCD over zero frames")
    return float(np.mean(per_frame))


# ============================================================
# Griffin-Lim resynthesis
# ============================================================

def griffin_lim(m: MelTrack, sample_rate: int, n_fft: int = 512, n_iters: int = 60, seed: int = 0,
                length: int | None = None, fmin: float = 0.0, fmax: float | None = None) -> Waveform:
    """Invert a raw log-mel track to audio with a seeded random phase start."""
    if m.standardized:
        raise ValidationError("griffin_lim needs a raw log-mel track; destandardize first")
    if n_iters < 1:
        raise ValidationError("griffin_lim needs at least one iteration")
    if not m.n_frames:
        return Waveform(np.zeros(0), sample_rate)
    hop = hop_for_fps(sample_rate, m.fps)
    fmax = sample_rate / 2.0 if fmax is None else fmax
    magnitude = librosa.feature.inverse.mel_to_stft(
        np.exp(m.frames.T), sr=sample_rate, n_fft=n_fft, power=2.0,
        fmin=fmin, fmax=fmax, htk=True, norm=None,
    )
    y = librosa.griffinlim(
        magnitude, n_iter=n_iters, hop_length=hop, win_length=n_fft, n_fft=n_fft,
        window="hann", center=True, length=length, pad_mode="constant",
        momentum=0.99, init="random", random_state=seed,
    )
    return Waveform(np.clip(y, -1.0, 1.0), sample_rate)
