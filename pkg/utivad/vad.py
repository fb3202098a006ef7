"""Energy + zero-crossing voice activity detector with hangover and trimming.

Decisions are made on non-overlapping frames (10 ms by default). The
energy threshold adapts to the recording: it sits ``energy_offset_db``
above the median energy of the quietest frames, so decisions do not depend
on input gain. Only when the recording has no frames quieter than the
loudest by that offset (no pause at all) is the threshold capped at
``max_threshold_db``, so such recordings are still detected.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

from .containers import write_text_atomic
from .dsp import Waveform, frame_length, frame_signal
from .errors import ValidationError

log = logging.getLogger("utivad.vad")

ENERGY_EPS = 1e-12
CSV_HEADER = ("frame_index", "decision")


@dataclass(frozen=True)
class VadConfig:
    frame_ms: float = 10.0
    energy_offset_db: float = 9.0
    zcr_threshold: float = 0.35
    onset_min_frames: int = 3
    offset_min_frames: int = 5
    keep_ms: float = 180.0
    max_threshold_db: float = -30.0
    quiet_fraction: float = 0.1
    rescue_margin_db: float = 3.0

    def __post_init__(self):
        if not self.frame_ms > 0:
            raise ValidationError(f"vad frame_ms must be > 0, got {self.frame_ms}")
        if self.onset_min_frames < 1 or self.offset_min_frames < 1:
            raise ValidationError("vad min-run lengths must be >= 1")
        if self.keep_ms < 0:
            raise ValidationError(f"vad keep_ms must be >= 0, got {self.keep_ms}")
        if not 0.0 < self.quiet_fraction <= 1.0:
            raise ValidationError("vad quiet_fraction must be in (0, 1]")

    @classmethod
    def from_config(cls, config: dict) -> "VadConfig":
        """Pick ``vad_<field>`` keys out of a flat pipeline config."""
        kwargs = {}
        for f in fields(cls):
            key = f"vad_{f.name}"
            if key in config:
                kwargs[f.name] = config[key]
        return cls(**kwargs)


@dataclass
class VadTrack:
    decisions: np.ndarray
    frame_ms: float = 10.0

    def __post_init__(self):
        self.decisions = np.asarray(self.decisions, dtype=bool)
        if self.decisions.ndim != 1:
            raise ValidationError("vad decisions must be 1-D")

    @property
    def n_frames(self) -> int:
        return self.decisions.size

    def speech_fraction(self) -> float:
        return float(self.decisions.mean()) if self.decisions.size else 0.0


# ============================================================
# Features and decisions
# ============================================================

def frame_features(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Energy in dB and zero-crossing rate for every row of ``frames``."""
    frames = np.asarray(frames, dtype=np.float64)
    energy_db = 10.0 * np.log10(np.mean(frames * frames, axis=1) + ENERGY_EPS)
    n = frames.shape[1]
    if n < 2:
        return energy_db, np.zeros(frames.shape[0])
    crossings = np.count_nonzero(frames[:, :-1] * frames[:, 1:] < 0, axis=1)
    return energy_db, crossings / (n - 1)


def vad_features(frame) -> tuple[float, float]:
    frame = np.asarray(frame, dtype=np.float64)
    if not frame.size:
        raise ValidationError("vad_features needs a non-empty frame")
    energy, zcr = frame_features(frame[None, :])
    return float(energy[0]), float(zcr[0])


def adaptive_threshold(energy_db: np.ndarray, cfg: VadConfig) -> float:
    """Offset above the quiet-frame floor; the absolute cap only applies when
    the loudest frames sit less than the offset above that floor."""
    ordered = np.sort(energy_db)
    k = max(1, math.ceil(cfg.quiet_fraction * ordered.size))
    floor = float(np.median(ordered[:k]))
    peak = float(np.median(ordered[-k:]))
    threshold = floor + cfg.energy_offset_db
    if peak - floor < cfg.energy_offset_db:
        return min(threshold, cfg.max_threshold_db)
    return threshold


def apply_hangover(raw: np.ndarray, onset_min_frames: int, offset_min_frames: int) -> np.ndarray:
    """Drop speech runs shorter than the onset, then fill short interior gaps."""
    out = np.asarray(raw, dtype=bool).copy()
    labels, _ = ndimage.label(out)
    for run in ndimage.find_objects(labels):
        if run[0].stop - run[0].start < onset_min_frames:
            out[run] = False
    labels, _ = ndimage.label(~out)
    for run in ndimage.find_objects(labels):
        start, stop = run[0].start, run[0].stop
        if start > 0 and stop < out.size and stop - start < offset_min_frames:
            out[run] = True
    return out


def vad_decide(w: Waveform, cfg: VadConfig | None = None) -> VadTrack:
    cfg = cfg or VadConfig()
    frames = frame_signal(w, cfg.frame_ms, window="rect")
    if not frames.shape[0]:
        return VadTrack(np.zeros(0, dtype=bool), cfg.frame_ms)
    energy, zcr = frame_features(frames)
    threshold = adaptive_threshold(energy, cfg)
    raw = (energy > threshold) | (
        (energy > threshold - cfg.rescue_margin_db) & (zcr > cfg.zcr_threshold))
    decisions = apply_hangover(raw, cfg.onset_min_frames, cfg.offset_min_frames)
    log.debug("vad: %d frames, threshold %.1f dB, raw speech %d, smoothed speech %d",
              energy.size, threshold, int(raw.sum()), int(decisions.sum()))
    return VadTrack(decisions, cfg.frame_ms)


# ============================================================
# Trimming
# ============================================================

def trim_bounds(w: Waveform, track: VadTrack, keep_ms: float) -> tuple[int, int] | None:
    """Sample range kept by ``trim_silence``; None when no speech was detected."""
    if keep_ms < 0:
        raise ValidationError(f"keep_ms must be >= 0, got {keep_ms}")
    frame_len = frame_length(track.frame_ms, w.sample_rate)
    if track.n_frames != w.samples.size // frame_len:
        raise ValidationError(
            f"vad track has {track.n_frames} frames, waveform framing gives {w.samples.size // frame_len}")
    speech = np.flatnonzero(track.decisions)
    if not speech.size:
        return None
    keep = int(round(keep_ms * w.sample_rate / 1000.0))
    start = max(0, int(speech[0]) * frame_len - keep)
    end = min(w.samples.size, (int(speech[-1]) + 1) * frame_len + keep)
    return start, end


def trim_silence(w: Waveform, track: VadTrack, keep_ms: float = 0.0) -> Waveform:
    """Cut leading and trailing silence, keeping ``keep_ms`` at each end.

    Interior silence is left in place.
    """
    bounds = trim_bounds(w, track, keep_ms)
    if bounds is None:
        log.warning("no speech detected; trimming yields an empty waveform")
        return Waveform(np.zeros(0), w.sample_rate)
    start, end = bounds
    return Waveform(w.samples[start:end].copy(), w.sample_rate)


def variant_name(keep_ms: float) -> str:
    if keep_ms == 0:
        return "trimmed"
    return f"trimmed_keep{int(round(keep_ms))}"


def silence_variants(w: Waveform, track: VadTrack | None = None,
                     keeps: tuple = (0, 180), cfg: VadConfig | None = None) -> dict[str, Waveform]:
    """One trimmed waveform per retained-silence amount, in ``keeps`` order."""
    if track is None:
        track = vad_decide(w, cfg)
    return {variant_name(k): trim_silence(w, track, k) for k in keeps}


# ============================================================
# CSV export
# ============================================================

def decisions_to_csv(decisions) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for i, d in enumerate(np.asarray(decisions, dtype=bool)):
        writer.writerow((i, int(d)))
    return buf.getvalue()


def write_decisions_csv(path: str, decisions) -> None:
    write_text_atomic(path, decisions_to_csv(decisions))


def read_decisions_csv(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise ValidationError(f"{path}: expected header {','.join(CSV_HEADER)}")
        rows = [(int(i), int(d)) for i, d in reader]
    for expected, (i, d) in enumerate(rows):
        if i != expected or d not in (0, 1):
            raise ValidationError(f"{path}: bad row {expected + 2}")
    return np.array([d for _, d in rows], dtype=bool)


def write_vad_csv(path: str, track: VadTrack) -> None:
    write_decisions_csv(path, track.decisions)


def read_vad_csv(path: str, frame_ms: float = 10.0) -> VadTrack:
    return VadTrack(read_decisions_csv(path), frame_ms)
