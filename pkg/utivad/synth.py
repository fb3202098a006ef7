"""Deterministic synthetic parallel corpus: audio, ultrasound and segment truth.

Each utterance alternates silence and speech. Speech audio is a harmonic
stack at a fixed amplitude whose pitch and spectral tilt follow smooth
random trajectories. Those two and a third trajectory move a bright
parabolic arc (the synthetic tongue) across a speckle background. In
silence the arc rests at a fixed pose, so a frame's class can be read from the image alone.
"""

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .containers import write_json_atomic
from .dsp import Waveform, write_wav
from .errors import ValidationError
from .prep import UTI_FPS, UtiSequence, write_uti

log = logging.getLogger("utivad.synth")

SPLITS = ("train", "dev", "test")
SPEECH = "speech"
SILENCE = "silence"


@dataclass(frozen=True)
class SynthConfig:
    sample_rate: int = 16000
    fps: float = UTI_FPS
    min_duration_s: float = 2.0
    max_duration_s: float = 6.0
    image_shape: tuple = (48, 80)
    n_harmonics: int = 5
    amplitude: float = 0.3
    noise_std: float = 0.003
    ramp_ms: float = 20.0
    min_speech_s: float = 0.3
    min_silence_s: float = 0.1
    max_speech_runs: int = 3
    silence_fraction: tuple = (0.26, 0.31)
    speckle_scale: float = 0.08
    arc_sigma: float = 1.5
    all_silence: bool = False

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValidationError("invalid synth config: " + "; ".join(problems))

    def problems(self) -> list[str]:
        problems = []
        if self.sample_rate <= 0:
            problems.append("sample_rate must be > 0")
        if not self.fps > 0:
            problems.append("fps must be > 0")
        if not 2.0 <= self.min_duration_s <= self.max_duration_s <= 6.0:
            problems.append("durations must satisfy 2 <= min_duration_s <= max_duration_s <= 6")
        if len(self.image_shape) != 2 or min(self.image_shape) < 8:
            problems.append("image_shape must be (height, width) with both >= 8")
        lo, hi = self.silence_fraction
        if not 0.0 < lo <= hi < 1.0:
            problems.append("silence_fraction must satisfy 0 < lo <= hi < 1")
        if self.max_speech_runs < 1:
            problems.append("max_speech_runs must be >= 1")
        if self.n_harmonics < 1:
            problems.append("n_harmonics must be >= 1")
        if not 0.0 < self.amplitude < 1.0:
            problems.append("amplitude must be in (0, 1)")
        if not problems:
            # worst case: shortest utterance, most runs, fewest silence seconds
            d = self.min_duration_s
            if (1.0 - hi) * d < self.max_speech_runs * self.min_speech_s:
                problems.append("speech time cannot hold max_speech_runs runs of min_speech_s")
            if lo * d < (self.max_speech_runs + 1) * self.min_silence_s:
                problems.append("silence time cannot hold the lead, trail and interior pieces")
        return problems

    @classmethod
    def from_config(cls, config: dict) -> "SynthConfig":
        return cls(sample_rate=config.get("sample_rate", 16000), fps=config.get("fps", UTI_FPS))


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    kind: str


@dataclass
class UtteranceTruth:
    segments: list[Segment]
    seed: int
    duration_s: float
    id: str = ""

    def __post_init__(self):
        if not self.segments:
            raise ValidationError("truth needs at least one segment")
        if self.segments[0].start != 0.0 or abs(self.segments[-1].end - self.duration_s) > 1e-9:
            raise ValidationError("segments must tile [0, duration]")
        for a, b in zip(self.segments, self.segments[1:]):
            if a.end != b.start:
                raise ValidationError("segments must be contiguous and non-overlapping")
        for s in self.segments:
            if s.kind not in (SPEECH, SILENCE) or not s.end > s.start:
                raise ValidationError(f"bad segment {s}")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "duration_s": self.duration_s,
            "seed": self.seed,
            "segments": [asdict(s) for s in self.segments],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UtteranceTruth":
        return cls([Segment(**s) for s in d["segments"]], d["seed"], d["duration_s"], d.get("id", ""))

    def speech_seconds(self) -> float:
        return sum(s.end - s.start for s in self.segments if s.kind == SPEECH)

    def frame_labels(self, frame_s: float, n_frames: int) -> np.ndarray:
        """1 where a frame's centre lies inside a speech segment."""
        centers = (np.arange(n_frames) + 0.5) * frame_s
        out = np.zeros(n_frames, dtype=np.int8)
        for s in self.segments:
            if s.kind == SPEECH:
                out[(centers >= s.start) & (centers < s.end)] = 1
        return out


def near_boundary(labels, margin: int = 1) -> np.ndarray:
    """Frames within ``margin`` of a label change."""
    labels = np.asarray(labels)
    out = np.zeros(labels.size, dtype=bool)
    for i in np.flatnonzero(np.diff(labels) != 0):
        out[max(0, i + 1 - margin):i + 1 + margin] = True
    return out


def utterance_seed(corpus_seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{corpus_seed}:{index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# ============================================================
# Generation
# ============================================================

def _split_lengths(rng, total: float, count: int, minimum: float) -> np.ndarray:
    spare = total - count * minimum
    return minimum + spare * rng.dirichlet(np.ones(count))


def _layout(rng, duration: float, cfg: SynthConfig) -> list[tuple[float, str]]:
    """Alternating (length_s, kind) pieces starting and ending with silence."""
    if cfg.all_silence:
        return [(duration, SILENCE)]
    runs = int(rng.integers(1, cfg.max_speech_runs + 1))
    silence_total = duration * rng.uniform(*cfg.silence_fraction)
    silences = _split_lengths(rng, silence_total, runs + 1, cfg.min_silence_s)
    speeches = _split_lengths(rng, duration - silence_total, runs, cfg.min_speech_s)
    pieces = []
    for i in range(runs):
        pieces.append((silences[i], SILENCE))
        pieces.append((speeches[i], SPEECH))
    pieces.append((silences[-1], SILENCE))
    return pieces


def _trajectory(freqs, phases, t: np.ndarray) -> np.ndarray:
    """Smooth curve in [0, 1] from two sinusoids."""
    (f1, f2), (p1, p2) = freqs, phases
    return 0.5 + 0.25 * np.sin(2 * np.pi * f1 * t + p1) + 0.25 * np.sin(2 * np.pi * f2 * t + p2)


def _render_arcs(rows: np.ndarray, cols: np.ndarray, curv: np.ndarray, shape, sigma: float) -> np.ndarray:
    h, w = shape
    y = np.arange(h)[None, :, None]
    x = np.arange(w)[None, None, :]
    xn = (x - cols[:, None, None]) / w
    arc_row = rows[:, None, None] + curv[:, None, None] * h * xn * xn
    return np.exp(-((y - arc_row) ** 2) / (2.0 * sigma * sigma))


def gen_utterance(seed: int, cfg: SynthConfig | None = None,
                  utt_id: str = "") -> tuple[Waveform, UtiSequence, UtteranceTruth]:
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    sr, fps = cfg.sample_rate, cfg.fps
    n_samples = int(round(rng.uniform(cfg.min_duration_s, cfg.max_duration_s) * sr))
    duration = n_samples / sr
    n_uti = int(round(duration * fps))

    bounds = [0]
    kinds = []
    acc = 0.0
    for length, kind in _layout(rng, duration, cfg):
        acc += length
        bounds.append(min(n_samples, int(round(acc * sr))))
        kinds.append(kind)
    bounds[-1] = n_samples
    segments = [Segment(bounds[i] / sr, bounds[i + 1] / sr, kinds[i]) for i in range(len(kinds))]
    truth = UtteranceTruth(segments, int(seed), duration, utt_id)

    # a: apex height, u: pitch and curvature, v: tilt and apex column
    params = [(rng.uniform(1.5, 4.0, size=2), rng.uniform(0.0, 2.0 * np.pi, size=2)) for _ in range(3)]

    def traj(k: int, t: np.ndarray) -> np.ndarray:
        return _trajectory(*params[k], t)

    # audio
    t = np.arange(n_samples) / sr
    env = np.zeros(n_samples)
    ramp = max(1, int(round(cfg.ramp_ms * sr / 1000.0)))
    for i, kind in enumerate(kinds):
        if kind != SPEECH:
            continue
        lo, hi = bounds[i], bounds[i + 1]
        k = np.arange(hi - lo)
        env[lo:hi] = np.minimum(1.0, np.minimum(k + 1, hi - lo - k) / ramp)
    u, v = traj(1, t), traj(2, t)
    phase = 2.0 * np.pi * np.cumsum(100.0 + 60.0 * u) / sr
    centre = 1.0 + (cfg.n_harmonics - 1) * v
    harmonics = np.arange(1, cfg.n_harmonics + 1)[:, None]
    weights = np.exp(-0.5 * (harmonics - centre[None, :]) ** 2)
    voiced = np.sum(weights * np.sin(harmonics * phase[None, :]), axis=0) / np.sum(weights, axis=0)
    speech = cfg.amplitude * env * voiced
    noise = rng.normal(0.0, cfg.noise_std, n_samples)
    wave = Waveform(np.clip(speech + noise, -1.0, 1.0), sr)

    # ultrasound
    h, w = cfg.image_shape
    tf = (np.arange(n_uti) + 0.5) / fps
    moving = truth.frame_labels(1.0 / fps, n_uti).astype(bool)
    fa, fu, fv = traj(0, tf), traj(1, tf), traj(2, tf)
    rows = np.where(moving, h * (0.30 + 0.20 * fa), 0.70 * h)
    cols = np.where(moving, w * (0.35 + 0.30 * fv), 0.50 * w)
    curv = np.where(moving, 0.4 + 1.2 * fu, 0.8)
    arcs = _render_arcs(rows, cols, curv, (h, w), cfg.arc_sigma)
    speckle = rng.rayleigh(cfg.speckle_scale, size=(n_uti, h, w))
    images = np.clip(0.05 + speckle + 0.8 * arcs, 0.0, 1.0)
    seq = UtiSequence(np.round(images * 255.0).astype(np.uint8), fps)

    return wave, seq, truth


def rest_pose(cfg: SynthConfig | None = None) -> np.ndarray:
    """Noise-free rest-pose image in [0, 1] (arc plus the speckle mean)."""
    cfg = cfg or SynthConfig()
    h, w = cfg.image_shape
    arc = _render_arcs(np.array([0.70 * h]), np.array([0.50 * w]), np.array([0.8]), (h, w), cfg.arc_sigma)[0]
    speckle_mean = cfg.speckle_scale * np.sqrt(np.pi / 2.0)
    return np.clip(0.05 + speckle_mean + 0.8 * arc, 0.0, 1.0)


# ============================================================
# Corpus on disk
# ============================================================

@dataclass
class ManifestEntry:
    id: str
    wav: str
    uti: str
    truth: str | None
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"utterance {self.id}: unknown split {self.split!r}")


def split_counts(n: int, fractions: tuple = (0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    if n < 3:
        raise ValidationError(f"need at least 3 utterances for train/dev/test, got {n}")
    n_dev = max(1, int(round(fractions[1] * n)))
    n_test = max(1, int(round(fractions[2] * n)))
    return n - n_dev - n_test, n_dev, n_test


def _write_one(job: tuple) -> dict:
    out_dir, index, utt_seed, split, cfg = job
    utt_id = f"utt{index:04d}"
    wave, seq, truth = gen_utterance(utt_seed, cfg, utt_id)
    entry = {
        "id": utt_id,
        "wav": f"{utt_id}.wav",
        "uti": f"{utt_id}.utiz",
        "truth": f"{utt_id}.truth.json",
        "split": split,
    }
    write_wav(os.path.join(out_dir, entry["wav"]), wave)
    write_uti(os.path.join(out_dir, entry["uti"]), seq)
    write_json_atomic(os.path.join(out_dir, entry["truth"]), truth.to_dict())
    return entry


def gen_corpus(out_dir: str, n_train: int, n_dev: int, n_test: int, seed: int,
               cfg: SynthConfig | None = None, workers: int = 1) -> str:
    """Write every utterance plus ``manifest.json``; returns the manifest path."""
    cfg = cfg or SynthConfig()
    if min(n_train, n_dev, n_test) < 1:
        raise ValidationError("each split needs at least one utterance")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise ValidationError(f"cannot create corpus directory {out_dir}: {e}") from e

    splits = ["train"] * n_train + ["dev"] * n_dev + ["test"] * n_test
    jobs = [(out_dir, i, utterance_seed(seed, i), split, cfg) for i, split in enumerate(splits)]
    log.info("Generating %d utterances (train %d, dev %d, test %d) into %s",
             len(jobs), n_train, n_dev, n_test, out_dir)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            manifest = list(pool.map(_write_one, jobs))
    else:
        manifest = [_write_one(job) for job in jobs]

    path = os.path.join(out_dir, "manifest.json")
    write_json_atomic(path, manifest)
    return path


def load_manifest(path: str) -> list[ManifestEntry]:
    """Read a manifest; relative file paths resolve against its directory."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, list):
        raise ValidationError(f"{path}: manifest must be a JSON list")

    def resolve(p):
        return p if p is None or os.path.isabs(p) else os.path.join(base, p)

    entries = []
    for item in raw:
        try:
            entries.append(ManifestEntry(
                id=item["id"], wav=resolve(item["wav"]), uti=resolve(item["uti"]),
                truth=resolve(item.get("truth")), split=item["split"],
            ))
        except KeyError as e:
            raise ValidationError(f"{path}: manifest entry missing {e}") from None
    ids = [e.id for e in entries]
    if len(ids) != len(set(ids)):
        raise ValidationError(f"{path}: duplicate utterance ids")
    return entries


def load_truth(path: str) -> UtteranceTruth:
    with open(path, "r", encoding="utf-8") as f:
        return UtteranceTruth.from_dict(json.load(f))
