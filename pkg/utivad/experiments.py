"""Corpus assembly and the two multi-run experiments.

``run_silence_ablation`` trains an SSI net with silence removed and with
180 ms of silence kept around speech, labels coming from the audio VAD or
from a trained image classifier. ``run_resynthesis_mcd`` measures how the
amount of retained silence moves MCD through a plain analysis-synthesis
loop, with no network involved.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .dsp import (MelStats, MelTrack, Waveform, compute_mel_stats, frame_length, griffin_lim,
                  hop_for_fps, mcd_per_frame, mel_cepstra, melspectrogram, read_wav, standardize)
from .errors import ValidationError
from .models import (SSI_KINDS, Model, ModelSpec, SampleSet, TrainConfig, build_model, classify_frames,
                     evaluate_loss, preset_spec, train)
from .prep import (KEEP_PAD_MS, WINDOW_LEN, LabelTrack, UtiSequence, filter_corpus_by_labels,
                   labels_from_vad, preprocess_sequence, read_uti, silence_keep_mask)
from .synth import SPLITS, load_manifest, load_truth
from .vad import VadConfig, VadTrack, trim_bounds, vad_decide

log = logging.getLogger("utivad.experiments")

NET_ALIASES = {"conv3d": "ssi_conv3d", "bilstm": "ssi_conv3d_bilstm"}
VAD_SOURCES = ("audio_vad", "image_vad")
ABLATION_MODES = {"removed": "remove_silence", "keep180": "keep_padded"}
RESYNTHESIS_KEEPS = (0, 180, 360, 540)


def resolve_net(name: str) -> str:
    kind = NET_ALIASES.get(name, name)
    if kind not in SSI_KINDS:
        raise ValidationError(f"unknown SSI net {name!r}; expected one of {sorted(NET_ALIASES)} or {SSI_KINDS}")
    return kind


def mel_options(config: dict) -> dict:
    return {
        "n_fft": config.get("n_fft", 512),
        "n_mels": config.get("n_mels", 80),
        "fmin": config.get("fmin", 0.0),
        "fmax": config.get("fmax"),
        "log_floor": config.get("log_floor", 1e-10),
    }


# ============================================================
# Corpus
# ============================================================

@dataclass
class Utterance:
    """One utterance with everything the experiments need, aligned per ultrasound frame."""

    id: str
    split: str
    raw: UtiSequence
    frames: np.ndarray
    mel: MelTrack
    vad: VadTrack
    labels: LabelTrack
    truth: object = None

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class Corpus:
    utterances: list[Utterance]
    stats: MelStats
    image_shape: tuple

    def split(self, name: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == name]

    def targets(self, utts: list[Utterance]) -> list[np.ndarray]:
        return [standardize(u.mel, self.stats).frames for u in utts]

    @property
    def fps(self) -> float:
        return self.utterances[0].raw.fps


def prepare_utterance(utt_id: str, split: str, wave: Waveform, seq: UtiSequence, image_shape: tuple,
                      config: dict, truth=None) -> Utterance:
    """VAD labels, preprocessed frames and a log-mel track cut to the ultrasound frame count."""
    track = vad_decide(wave, VadConfig.from_config(config))
    labels = labels_from_vad(track, seq.fps, seq.n_frames)
    mel = melspectrogram(wave, seq.fps, **mel_options(config))
    n = min(seq.n_frames, mel.n_frames)
    if n < seq.n_frames:
        log.warning("%s: %d mel frames for %d ultrasound frames; truncating", utt_id, mel.n_frames, seq.n_frames)
    frames = preprocess_sequence(seq, image_shape).frames[:n]
    return Utterance(
        id=utt_id,
        split=split,
        raw=UtiSequence(seq.frames[:n], seq.fps),
        frames=frames,
        mel=MelTrack(mel.frames[:n], mel.fps),
        vad=track,
        labels=LabelTrack(labels.labels[:n]),
        truth=truth,
    )


def build_corpus(utterances: list[Utterance], image_shape: tuple) -> Corpus:
    """Standardization statistics come from the train split only."""
    train_mels = [u.mel for u in utterances if u.split == "train"]
    if not train_mels:
        raise ValidationError("corpus has no train utterances")
    return Corpus(list(utterances), compute_mel_stats(train_mels), tuple(image_shape))


def load_corpus(manifest_path: str, image_shape: tuple, config: dict, splits=SPLITS) -> Corpus:
    entries = [e for e in load_manifest(manifest_path) if e.split in splits]
    log.info("Loading %d utterances from %s (images %s)", len(entries), manifest_path, image_shape)
    utts = []
    for e in entries:
        truth = load_truth(e.truth) if e.truth else None
        utts.append(prepare_utterance(e.id, e.split, read_wav(e.wav), read_uti(e.uti), image_shape, config, truth))
    return build_corpus(utts, image_shape)


# ============================================================
# Silence ablation
# ============================================================

def image_vad_labels(corpus: Corpus, vad_model: Model) -> dict[str, LabelTrack]:
    """Per-utterance labels from the image classifier, used in place of the audio VAD."""
    out = {}
    for u in corpus.utterances:
        seq = preprocess_sequence(u.raw, vad_model.spec.image_shape)
        out[u.id] = classify_frames(vad_model, seq)
    return out


def keep_disagreement(corpus: Corpus, labels_by_id: dict, split: str = "dev",
                      mode: str = "keep_padded") -> float:
    """Fraction of frames whose keep/drop decision differs from the audio-VAD one."""
    differ = total = 0
    for u in corpus.split(split):
        a = silence_keep_mask(u.labels, mode, u.raw.fps, KEEP_PAD_MS)
        b = silence_keep_mask(labels_by_id[u.id], mode, u.raw.fps, KEEP_PAD_MS)
        differ += int(np.count_nonzero(a != b))
        total += a.size
    if not total:
        raise ValidationError(f"no {split} frames to compare")
    return differ / total


def mode_sets(corpus: Corpus, labels_by_id: dict, mode: str, window: int = WINDOW_LEN) -> dict[str, SampleSet]:
    """Windowed train/dev/test sets filtered by one silence mode."""
    sets = {}
    for split in SPLITS:
        utts = corpus.split(split)
        full = SampleSet.for_ssi([u.frames for u in utts], corpus.targets(utts),
                                 [labels_by_id[u.id] for u in utts], window)
        kept = filter_corpus_by_labels(full.samples, ABLATION_MODES[mode], corpus.fps)
        sets[split] = full.subset(kept)
        log.debug("%s/%s: %d of %d windows kept", mode, split, len(kept), len(full))
    return sets


def predicted_mcd(model: Model, data: SampleSet, stats: MelStats, fps: float, batch_size: int = 16) -> float:
    """Mel-cepstral distortion between predicted and reference frames, in raw log-mel units."""
    if not len(data):
        raise ValidationError("cannot compute MCD on an empty set")
    per_frame = []
    for start in range(0, len(data), batch_size):
        idx = range(start, min(start + batch_size, len(data)))
        x, y = data.batch(idx)
        pred = model.net.forward(x, training=False)
        ref = mel_cepstra(MelTrack(y * stats.std + stats.mean, fps))
        est = mel_cepstra(MelTrack(pred * stats.std + stats.mean, fps))
        per_frame.append(mcd_per_frame(ref, est))
    return float(np.mean(np.concatenate(per_frame)))


def _ablation_seed(job: tuple) -> dict:
    corpus, spec, labels_by_id, seed, cfg_kwargs = job
    result = {}
    for mode in ABLATION_MODES:
        sets = mode_sets(corpus, labels_by_id, mode, spec.window)
        model = build_model(spec, seed)
        model.stats = corpus.stats
        cfg = TrainConfig(seed=seed, silence_mode=mode, **cfg_kwargs)
        trained = train(model, sets["train"], sets["dev"], cfg)
        bs = cfg.batch_size
        result[mode] = {
            "mse_train": evaluate_loss(trained.model, sets["train"], bs),
            "mse_dev": evaluate_loss(trained.model, sets["dev"], bs),
            "mse_test": evaluate_loss(trained.model, sets["test"], bs),
            "mcd": predicted_mcd(trained.model, sets["test"], corpus.stats, corpus.fps, bs),
            "best_epoch": trained.best_epoch,
            "n_train": len(sets["train"]),
        }
        log.info("seed %d %-8s mse dev %.4f test %.4f  mcd %.3f dB", seed, mode,
                 result[mode]["mse_dev"], result[mode]["mse_test"], result[mode]["mcd"])
    return result


def run_silence_ablation(corpus: Corpus, net_kind: str, vad_source: str = "audio_vad",
                         preset: str = "reduced", seeds=(0,), config: dict | None = None,
                         vad_model: Model | None = None, spec: ModelSpec | None = None,
                         workers: int = 1, **train_overrides) -> dict:
    """Train one SSI net in both silence modes for every seed and average the metrics.

    Returns ``{net, vad_source, removed: {...}, keep180: {...}, per_seed: [...]}``
    where each mode holds mean ``mse_train``, ``mse_dev``, ``mse_test``
    (standardized units) and ``mcd`` (dB).
    """
    config = config or {}
    kind = resolve_net(net_kind)
    if vad_source not in VAD_SOURCES:
        raise ValidationError(f"unknown vad source {vad_source!r}; expected one of {VAD_SOURCES}")
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValidationError("at least one seed is needed")
    spec = spec or preset_spec(kind, preset)
    if spec.kind != kind:
        raise ValidationError(f"model spec is {spec.kind}, ablation asked for {kind}")
    if spec.image_shape != corpus.image_shape:
        raise ValidationError(f"corpus images are {corpus.image_shape}, {kind} expects {spec.image_shape}")

    row = {"net": kind, "vad_source": vad_source}
    if vad_source == "image_vad":
        if vad_model is None:
            raise ValidationError("image_vad needs a trained frame classifier")
        labels_by_id = image_vad_labels(corpus, vad_model)
        row["keep_disagreement"] = {
            mode: keep_disagreement(corpus, labels_by_id, "dev", ABLATION_MODES[mode]) for mode in ABLATION_MODES
        }
    else:
        labels_by_id = {u.id: u.labels for u in corpus.utterances}

    cfg_kwargs = asdict(TrainConfig.for_kind(kind, config, **train_overrides))
    for key in ("seed", "silence_mode"):
        cfg_kwargs.pop(key)

    log.info("=" * 60)
    log.info("Silence ablation: %s (scale %s)  labels from %s  seeds %s", kind, spec.width_scale, vad_source, seeds)
    log.info("=" * 60)

    jobs = [(corpus, spec, labels_by_id, seed, cfg_kwargs) for seed in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_ablation_seed, jobs))
    else:
        per_seed = [_ablation_seed(job) for job in jobs]

    for mode in ABLATION_MODES:
        row[mode] = {
            key: float(np.mean([r[mode][key] for r in per_seed]))
            for key in ("mse_train", "mse_dev", "mse_test", "mcd")
        }
    row["keep180_lower_dev"] = sum(r["keep180"]["mse_dev"] < r["removed"]["mse_dev"] for r in per_seed)
    row["per_seed"] = [{"seed": s, **r} for s, r in zip(seeds, per_seed)]
    return row


# ============================================================
# Analysis-synthesis MCD
# ============================================================

def speech_frame_mask(track: VadTrack, start: int, n_frames: int, hop: int, sample_rate: int) -> np.ndarray:
    """VAD decision for each mel frame of a segment starting at sample ``start``."""
    frame_len = frame_length(track.frame_ms, sample_rate)
    idx = (start + np.arange(n_frames) * hop) // frame_len
    mask = np.zeros(n_frames, dtype=bool)
    valid = idx < track.n_frames
    mask[valid] = track.decisions[idx[valid]]
    return mask


def analysis_synthesis(w: Waveform, fps: float, config: dict, seed: int = 0) -> tuple[MelTrack, Waveform]:
    """Mel analysis followed by Griffin-Lim; the output has the input's length."""
    opts = mel_options(config)
    mel = melspectrogram(w, fps, **opts)
    y = griffin_lim(mel, w.sample_rate, n_fft=opts["n_fft"], n_iters=config.get("griffin_lim_iters", 60),
                    seed=seed, length=len(w), fmin=opts["fmin"], fmax=opts["fmax"])
    return mel, y


def _frame_mcd(ref: MelTrack, y: Waveform, fps: float, config: dict) -> np.ndarray:
    est = melspectrogram(y, fps, **mel_options(config))
    return mcd_per_frame(mel_cepstra(ref), mel_cepstra(est))


def _summary(per_frame: list, masks: list) -> dict:
    values = np.concatenate(per_frame) if per_frame else np.zeros(0)
    mask = np.concatenate(masks) if masks else np.zeros(0, dtype=bool)
    return {
        "mcd_all": float(values.mean()) if values.size else None,
        "mcd_speech": float(values[mask].mean()) if mask.any() else None,
        "n_frames": int(values.size),
    }


def run_resynthesis_mcd(waves: list[tuple[str, Waveform]], config: dict | None = None, fps: float = 81.5,
                        keeps=RESYNTHESIS_KEEPS, seed: int = 0) -> dict:
    """MCD of trimmed audio against its own Griffin-Lim resynthesis.

    A keeps no silence, B keeps 180 ms at each end, C cuts the
    resynthesis of B back to A's span and runs a second analysis-synthesis
    pass before comparing with A. ``trend`` repeats A/B for every entry
    of ``keeps``. MCD is pooled over frames, all frames and speech frames.
    """
    config = config or {}
    vcfg = VadConfig.from_config(config)
    keeps = sorted(set(int(k) for k in keeps) | {0, 180})
    frames = {k: ([], []) for k in keeps}
    frames_c = ([], [])
    used = 0

    log.info("=" * 60)
    log.info("Analysis-synthesis MCD over %d utterances, keeps %s ms", len(waves), keeps)
    log.info("=" * 60)

    for utt_id, w in waves:
        track = vad_decide(w, vcfg)
        bounds = {k: trim_bounds(w, track, k) for k in keeps}
        if bounds[0] is None:
            log.warning("%s: no speech detected; skipped", utt_id)
            continue
        hop = hop_for_fps(w.sample_rate, fps)
        resynth = {}
        for k in keeps:
            start, end = bounds[k]
            seg = Waveform(w.samples[start:end], w.sample_rate)
            mel, y = analysis_synthesis(seg, fps, config, seed)
            resynth[k] = (mel, y)
            frames[k][0].append(_frame_mcd(mel, y, fps, config))
            frames[k][1].append(speech_frame_mask(track, start, mel.n_frames, hop, w.sample_rate))

        (a_start, a_end), (b_start, _) = bounds[0], bounds[180]
        y_b = resynth[180][1]
        cut = Waveform(y_b.samples[a_start - b_start:a_end - b_start], w.sample_rate)
        _, y_c = analysis_synthesis(cut, fps, config, seed)
        mel_a = resynth[0][0]
        frames_c[0].append(_frame_mcd(mel_a, y_c, fps, config))
        frames_c[1].append(speech_frame_mask(track, a_start, mel_a.n_frames, hop, w.sample_rate))
        used += 1
        log.debug("%s: A %.3f dB  B %.3f dB", utt_id, frames[0][0][-1].mean(), frames[180][0][-1].mean())

    result = {
        "configs": {
            "A": _summary(*frames[0]),
            "B": _summary(*frames[180]),
            "C": _summary(*frames_c),
        },
        "trend": [{"keep_ms": k, **_summary(*frames[k])} for k in keeps],
        "n_utterances": used,
    }
    log.info("MCD A %s  B %s  C %s", result["configs"]["A"]["mcd_all"], result["configs"]["B"]["mcd_all"],
             result["configs"]["C"]["mcd_all"])
    return result
