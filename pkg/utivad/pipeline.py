"""Pipeline stages behind the CLI subcommands.

Every stage reads its inputs from a manifest (or explicit files), writes its
artifacts under ``out_dir`` with atomic replacement, and leaves a
``run.<stage>.json`` metadata file next to them. Only the metadata file
holds wall time, so model and report files are reproducible byte for byte.
"""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from importlib.metadata import PackageNotFoundError, version

import numpy as np

from . import report
from .containers import write_json_atomic
from .dsp import (MelTrack, destandardize, griffin_lim, mcd, mel_cepstra, read_mel_track, read_wav,
                  write_mel_track, write_wav)
from .errors import ValidationError
from .experiments import (ABLATION_MODES, VAD_SOURCES, image_vad_labels, load_corpus,
                          mode_sets, predicted_mcd, resolve_net, run_resynthesis_mcd, run_silence_ablation)
from .metrics import PUBLISHED_CONFUSION, best_f1_threshold, confusion, roc_auc, roc_curve
from .models import (PRESETS, VAD_KIND, SampleSet, TrainConfig, build_model, classify_frames, evaluate_loss,
                     frame_probabilities, load_model, predict_melspec, preset_spec, save_model, train)
from .prep import (UtiSequence, label_ratio, labels_from_vad, make_windows, read_label_csv, read_uti,
                   write_label_csv, write_uti)
from .synth import SPLITS, SynthConfig, gen_corpus, load_manifest, split_counts
from .vad import VadConfig, read_vad_csv, silence_variants, vad_decide, write_vad_csv

log = logging.getLogger("utivad.pipeline")

PACKAGES = ("utivad", "numpy", "scipy", "librosa", "scikit-learn")
FIXTURES = ("table6", "published")


@dataclass
class RunConfig:
    """What a stage was asked to do. ``validate`` lists every problem at once."""

    command: str
    out_dir: str
    manifest: str | None = None
    preset: str = "reduced"
    seed: int | None = None
    silence_mode: str = "keep180"
    vad_source: str = "audio_vad"
    inputs: list[str] = field(default_factory=list)

    def validate(self, needs_manifest: bool = False, needs_seed: bool = False) -> list[str]:
        problems = []
        if not self.out_dir:
            problems.append("an output directory is required")
        if needs_manifest and not self.manifest:
            problems.append("--manifest is required")
        if self.manifest and not os.path.isfile(self.manifest):
            problems.append(f"manifest not found: {self.manifest}")
        for path in self.inputs:
            if path and not os.path.exists(path):
                problems.append(f"input not found: {path}")
        if self.preset not in PRESETS:
            problems.append(f"preset must be one of {sorted(PRESETS)}")
        if needs_seed and self.seed is None:
            problems.append("--seed is required for training")
        if self.silence_mode not in ABLATION_MODES:
            problems.append(f"silence mode must be one of {sorted(ABLATION_MODES)}")
        if self.vad_source not in VAD_SOURCES:
            problems.append(f"vad source must be one of {VAD_SOURCES}")
        return problems

    def check(self, **kwargs) -> None:
        problems = self.validate(**kwargs)
        if problems:
            raise ValidationError("; ".join(problems))


def package_versions() -> dict:
    out = {}
    for name in PACKAGES:
        try:
            out[name] = version(name)
        except PackageNotFoundError:
            out[name] = None
    return out


def write_run_metadata(run: RunConfig, config: dict, started: float, extra: dict | None = None) -> str:
    path = os.path.join(run.out_dir, f"run.{run.command}.json")
    write_json_atomic(path, {
        "run": asdict(run),
        "config": config,
        "seed": run.seed,
        "versions": package_versions(),
        "wall_time_s": round(time.monotonic() - started, 3),
        **(extra or {}),
    })
    return path


def _banner(title: str, run: RunConfig, **fields) -> None:
    log.info("=" * 60)
    log.info("%s", title)
    log.info("Output:      %s", os.path.abspath(run.out_dir))
    if run.manifest:
        log.info("Manifest:    %s", run.manifest)
    for key, value in fields.items():
        log.info("%-12s %s", key + ":", value)
    log.info("=" * 60)


def _split_entries(manifest: str, split: str | None = None) -> list:
    entries = load_manifest(manifest)
    return [e for e in entries if split is None or e.split == split]


def _image_shape(kind: str, preset: str) -> tuple:
    return preset_spec(kind, preset).image_shape


# ---------------------------------------------------------------------------
# Corpus and labels
# ---------------------------------------------------------------------------

def stage_synth(run: RunConfig, config: dict, n: int, workers: int = 1) -> str:
    started = time.monotonic()
    if run.seed is None:
        raise ValidationError("--seed is required for synth")
    n_train, n_dev, n_test = split_counts(n)
    _banner("Synthetic corpus", run, utterances=n, seed=run.seed, workers=workers)
    path = gen_corpus(run.out_dir, n_train, n_dev, n_test, run.seed, SynthConfig.from_config(config), workers)
    write_run_metadata(run, config, started, {"manifest": path})
    return path


def stage_vad_audio(run: RunConfig, config: dict, keeps: tuple = ()) -> list[str]:
    """Frame decisions per utterance, optionally with trimmed WAV variants."""
    started = time.monotonic()
    run.check(needs_manifest=True)
    entries = _split_entries(run.manifest)
    cfg = VadConfig.from_config(config)
    _banner("Speech VAD", run, utterances=len(entries), frame_ms=cfg.frame_ms, keeps=list(keeps))
    written = []
    for e in entries:
        w = read_wav(e.wav)
        track = vad_decide(w, cfg)
        path = os.path.join(run.out_dir, f"{e.id}.vad.csv")
        write_vad_csv(path, track)
        written.append(path)
        for name, trimmed in silence_variants(w, track, tuple(keeps)).items():
            if len(trimmed):
                write_wav(os.path.join(run.out_dir, f"{e.id}.{name}.wav"), trimmed)
        log.debug("%s: speech fraction %.3f", e.id, track.speech_fraction())
    log.info("wrote %d VAD tracks", len(written))
    write_run_metadata(run, config, started)
    return written


def stage_labels(run: RunConfig, config: dict, vad_dir: str | None = None) -> dict:
    """Ultrasound-frame labels from the speech VAD, plus speech:silence ratios."""
    started = time.monotonic()
    run.check(needs_manifest=True)
    entries = _split_entries(run.manifest)
    if not entries:
        raise ValidationError(f"{run.manifest} lists no utterances")
    cfg = VadConfig.from_config(config)
    _banner("Ultrasound labels", run, utterances=len(entries), vad_dir=vad_dir or "(recompute)")
    per_split = {s: [] for s in SPLITS}
    for e in entries:
        seq = read_uti(e.uti)
        vad_csv = os.path.join(vad_dir, f"{e.id}.vad.csv") if vad_dir else None
        if vad_csv and os.path.isfile(vad_csv):
            track = read_vad_csv(vad_csv, cfg.frame_ms)
        else:
            track = vad_decide(read_wav(e.wav), cfg)
        labels = labels_from_vad(track, seq.fps, seq.n_frames)
        write_label_csv(os.path.join(run.out_dir, f"{e.id}.labels.csv"), labels)
        per_split[e.split].append(labels.labels)

    summary = {"splits": {}}
    for split, tracks in per_split.items():
        if tracks:
            labels = np.concatenate(tracks)
            summary["splits"][split] = {"frames": int(labels.size), "speech_ratio": label_ratio(labels)}
    everything = np.concatenate([t for tracks in per_split.values() for t in tracks])
    ratio = label_ratio(everything)
    summary["corpus"] = {"frames": int(everything.size), "speech_ratio": ratio,
                         "in_expected_range": ratio is not None and 2.0 <= ratio <= 3.0}
    if not summary["corpus"]["in_expected_range"]:
        log.warning("corpus speech:silence ratio %s is outside [2, 3]", ratio)
    log.info("speech:silence ratio %s over %d frames", ratio, everything.size)
    write_json_atomic(os.path.join(run.out_dir, "labels_summary.json"), summary)
    write_run_metadata(run, config, started)
    return summary


def stage_prep(run: RunConfig, config: dict, kind: str = "ssi_conv3d") -> dict:
    """Preprocessed frames and raw log-mel tracks, with train-split mel statistics."""
    started = time.monotonic()
    run.check(needs_manifest=True)
    shape = _image_shape(kind, run.preset)
    _banner("Preprocessing", run, preset=run.preset, image_shape=shape)
    corpus = load_corpus(run.manifest, shape, config)
    for u in corpus.utterances:
        write_uti(os.path.join(run.out_dir, f"{u.id}.prep.utiz"), UtiSequence(u.frames, u.raw.fps))
        write_mel_track(os.path.join(run.out_dir, f"{u.id}.mel.melz"), u.mel)
    stats = corpus.stats.to_dict()
    write_json_atomic(os.path.join(run.out_dir, "mel_stats.json"), stats)
    write_run_metadata(run, config, started)
    return stats


# ---------------------------------------------------------------------------
# Frame classifier
# ---------------------------------------------------------------------------

def stage_train_vad(run: RunConfig, config: dict, **train_overrides) -> str:
    started = time.monotonic()
    run.check(needs_manifest=True, needs_seed=True)
    spec = preset_spec(VAD_KIND, run.preset)
    _banner("Train frame classifier", run, preset=run.preset, seed=run.seed, image_shape=spec.image_shape)
    corpus = load_corpus(run.manifest, spec.image_shape, config)
    sets = {s: SampleSet.for_vad([u.frames for u in corpus.split(s)], [u.labels for u in corpus.split(s)])
            for s in ("train", "dev")}
    model = build_model(spec, run.seed)
    cfg = TrainConfig.for_kind(VAD_KIND, config, seed=run.seed, **train_overrides)
    result = train(model, sets["train"], sets["dev"], cfg)

    dev = corpus.split("dev")
    probs = np.concatenate([frame_probabilities(result.model, UtiSequence(u.frames, u.raw.fps)) for u in dev])
    labels = np.concatenate([u.labels.labels for u in dev])
    info = {"history": result.history, "best_epoch": result.best_epoch}
    if np.unique(labels).size == 2:
        threshold, f1 = best_f1_threshold(labels, probs)
        info["best_f1_threshold_dev"] = {"threshold": threshold, "f1": f1, "applied": False}
        log.info("F1-optimal dev threshold %.3f (F1 %.4f); keeping %.2f", threshold, f1, result.model.threshold)

    path = os.path.join(run.out_dir, f"{VAD_KIND}.wts")
    save_model(path, result.model)
    write_json_atomic(os.path.join(run.out_dir, f"{VAD_KIND}.history.json"), info)
    write_run_metadata(run, config, started, {"model": path})
    return path


def evaluate_classifier(model, corpus, splits=("dev", "test")) -> tuple[dict, dict, dict]:
    """Confusion matrices, AUCs and ROC points against the audio-VAD labels."""
    matrices, aucs, rocs = {}, {}, {}
    for split in splits:
        utts = corpus.split(split)
        if not utts:
            continue
        tracks = [classify_frames(model, UtiSequence(u.frames, u.raw.fps)) for u in utts]
        labels = np.concatenate([u.labels.labels for u in utts])
        preds = np.concatenate([t.labels for t in tracks])
        probs = np.concatenate([t.probabilities for t in tracks])
        matrices[split] = confusion(labels, preds)
        if np.unique(labels).size == 2:
            aucs[split] = roc_auc(labels, probs)
            rocs[split] = roc_curve(labels, probs)
        else:
            log.warning("%s split has a single class; AUC undefined", split)
            aucs[split] = None
    return matrices, aucs, rocs


def stage_eval_vad(run: RunConfig, config: dict, model_path: str | None = None,
                   fixtures: str | None = None) -> tuple[dict, str]:
    """Classification report; ``fixtures="table6"`` (alias ``"published"``) evaluates the embedded
    reference matrices."""
    started = time.monotonic()
    if fixtures is not None:
        if fixtures not in FIXTURES:
            raise ValidationError(f"unknown fixtures {fixtures!r}; expected one of {FIXTURES}")
        rep = report.classification_report(dict(PUBLISHED_CONFUSION), run_id="eval-vad-fixtures")
        text = report.render_classification(rep)
    else:
        run.inputs = [model_path] if model_path else []
        run.check(needs_manifest=True)
        if not model_path:
            raise ValidationError("--model is required without --fixtures")
        model = load_model(model_path)
        _banner("Evaluate frame classifier", run, model=model_path, threshold=model.threshold)
        corpus = load_corpus(run.manifest, model.spec.image_shape, config, splits=SPLITS)
        matrices, aucs, rocs = evaluate_classifier(model, corpus)
        rep = report.classification_report(matrices, aucs, run_id="eval-vad",
                                           config={"model": os.path.basename(model_path),
                                                   "threshold": model.threshold})
        for split in matrices:
            rep["metrics"][split]["speech_ratio"] = label_ratio(
                np.concatenate([u.labels.labels for u in corpus.split(split)]))
        for split, (fpr, tpr, thr) in rocs.items():
            report.write_csv(os.path.join(run.out_dir, f"roc_{split}.csv"), ["fpr", "tpr", "threshold"],
                             zip(fpr, tpr, thr))
        text = report.render_classification(rep)
    report.write_report(run.out_dir, "eval_vad", rep, text)
    write_run_metadata(run, config, started)
    return rep, text


# ---------------------------------------------------------------------------
# Spectral regression
# ---------------------------------------------------------------------------

def _labels_by_source(run: RunConfig, corpus, vad_model_path: str | None) -> dict:
    if run.vad_source == "image_vad":
        if not vad_model_path:
            raise ValidationError("--vad-model is required with --vad-source image_vad")
        return image_vad_labels(corpus, load_model(vad_model_path))
    return {u.id: u.labels for u in corpus.utterances}


def stage_train_ssi(run: RunConfig, config: dict, net: str, vad_model_path: str | None = None,
                    **train_overrides) -> str:
    started = time.monotonic()
    run.inputs = [vad_model_path] if vad_model_path else []
    run.check(needs_manifest=True, needs_seed=True)
    kind = resolve_net(net)
    spec = preset_spec(kind, run.preset)
    _banner("Train spectral regression", run, net=kind, preset=run.preset, seed=run.seed,
            silence=run.silence_mode, labels=run.vad_source)
    corpus = load_corpus(run.manifest, spec.image_shape, config)
    sets = mode_sets(corpus, _labels_by_source(run, corpus, vad_model_path), run.silence_mode, spec.window)
    model = build_model(spec, run.seed)
    model.stats = corpus.stats
    cfg = TrainConfig.for_kind(kind, config, seed=run.seed, silence_mode=run.silence_mode, **train_overrides)
    result = train(model, sets["train"], sets["dev"], cfg)

    path = os.path.join(run.out_dir, f"{kind}.{run.silence_mode}.wts")
    save_model(path, result.model)
    write_json_atomic(os.path.join(run.out_dir, f"{kind}.{run.silence_mode}.history.json"),
                      {"history": result.history, "best_epoch": result.best_epoch})
    write_run_metadata(run, config, started, {"model": path})
    return path


def stage_eval_ssi(run: RunConfig, config: dict, model_path: str, vad_model_path: str | None = None,
                   synthesize: bool = False) -> dict:
    """MSE on the filtered dev/test sets, MCD on test, and predicted tracks per test utterance."""
    started = time.monotonic()
    run.inputs = [p for p in (model_path, vad_model_path) if p]
    run.check(needs_manifest=True)
    model = load_model(model_path)
    if model.spec.is_vad or model.stats is None:
        raise ValidationError(f"{model_path} is not a spectral regression model")
    _banner("Evaluate spectral regression", run, model=model_path, silence=run.silence_mode)
    corpus = load_corpus(run.manifest, model.spec.image_shape, config)
    corpus.stats = model.stats
    sets = mode_sets(corpus, _labels_by_source(run, corpus, vad_model_path), run.silence_mode, model.spec.window)
    bs = config.get("batch_size_ssi", 16)
    metrics = {
        "mse_dev": evaluate_loss(model, sets["dev"], bs),
        "mse_test": evaluate_loss(model, sets["test"], bs),
        "mcd": predicted_mcd(model, sets["test"], model.stats, corpus.fps, bs),
    }

    for u in corpus.split("test"):
        windows = make_windows(UtiSequence(u.frames, u.raw.fps), model.spec.window)
        if not windows:
            continue
        pred = destandardize(predict_melspec(model, windows, u.raw.fps, bs))
        write_mel_track(os.path.join(run.out_dir, f"{u.id}.pred.melz"), pred)
        if synthesize:
            y = griffin_lim(pred, config.get("sample_rate", 16000), n_fft=config.get("n_fft", 512),
                            n_iters=config.get("griffin_lim_iters", 60), seed=run.seed or 0)
            write_wav(os.path.join(run.out_dir, f"{u.id}.pred.wav"), y)

    rep = report.build_report([{"name": run.silence_mode, "metrics": metrics}], "eval-ssi",
                              {"model": os.path.basename(model_path), "vad_source": run.vad_source})
    report.write_report(run.out_dir, "eval_ssi", rep)
    write_run_metadata(run, config, started)
    return metrics


def stage_mcd(run: RunConfig, config: dict, ref: str | None = None, est: str | None = None,
              mask: str | None = None, keeps: tuple = (0, 180, 360, 540)) -> dict:
    """Direct MCD between two mel tracks, or the analysis-synthesis experiment over the test split."""
    started = time.monotonic()
    if ref or est:
        run.inputs = [p for p in (ref, est, mask) if p]
        run.check()
        if not (ref and est):
            raise ValidationError("--ref and --est go together")
        ref_track, est_track = read_mel_track(ref), read_mel_track(est)
        n = min(ref_track.n_frames, est_track.n_frames)
        if n != max(ref_track.n_frames, est_track.n_frames):
            log.warning("frame counts differ (%d vs %d); comparing the first %d",
                        ref_track.n_frames, est_track.n_frames, n)
        ref_c = mel_cepstra(MelTrack(ref_track.frames[:n], ref_track.fps))
        est_c = mel_cepstra(MelTrack(est_track.frames[:n], est_track.fps))
        result = {"mcd_all": mcd(ref_c, est_c), "n_frames": n}
        if mask:
            labels = read_label_csv(mask).labels[:n]
            result["mcd_speech"] = mcd(ref_c, est_c, np.pad(labels, (0, n - labels.size)).astype(bool))
        rep = report.build_report([{"name": "mcd", "metrics": result}], "mcd",
                                  {"ref": os.path.basename(ref), "est": os.path.basename(est)})
        text = report.render_text(rep)
    else:
        run.check(needs_manifest=True)
        entries = _split_entries(run.manifest, "test")
        _banner("Analysis-synthesis MCD", run, utterances=len(entries), keeps=list(keeps))
        waves = [(e.id, read_wav(e.wav)) for e in entries]
        result = run_resynthesis_mcd(waves, config, config.get("fps", 81.5), keeps, run.seed or 0)
        text = report.render_resynthesis(result)
        rep = report.build_report([{"name": name, "metrics": m} for name, m in result["configs"].items()],
                                  "mcd", {"keeps": list(keeps)},
                                  {"resynthesis_mcd": report.PUBLISHED_RESYNTHESIS_MCD})
        rep["trend"] = result["trend"]
    report.write_report(run.out_dir, "mcd", rep, text)
    write_run_metadata(run, config, started)
    return result


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def stage_ablation(run: RunConfig, config: dict, nets: list[str], seeds: list[int],
                   vad_model_path: str | None = None, workers: int = 1, **train_overrides) -> tuple[list, str]:
    """Silence ablation for each net; the report holds one row per net."""
    started = time.monotonic()
    run.inputs = [vad_model_path] if vad_model_path else []
    run.check(needs_manifest=True)
    kinds = [resolve_net(n) for n in nets]
    shapes = {_image_shape(k, run.preset) for k in kinds}
    _banner("Silence ablation", run, nets=kinds, seeds=seeds, preset=run.preset, labels=run.vad_source)
    corpus = load_corpus(run.manifest, shapes.pop(), config)
    vad_model = load_model(vad_model_path) if vad_model_path else None
    if run.vad_source == "image_vad" and vad_model is None:
        raise ValidationError("--vad-model is required with --vad-source image_vad")

    rows = [run_silence_ablation(corpus, k, run.vad_source, run.preset, seeds, config, vad_model,
                                 workers=workers, **train_overrides) for k in kinds]
    text = report.render_ablation(rows, run.vad_source)
    rep = report.build_report(
        [{"name": row["net"], "metrics": row} for row in rows], "ablation",
        {"preset": run.preset, "seeds": list(seeds), "vad_source": run.vad_source},
        {"ssi": report.PUBLISHED_SSI.get(run.vad_source, {})},
    )
    report.write_report(run.out_dir, f"ablation_{run.vad_source}", rep, text)
    write_run_metadata(run, config, started)
    return rows, text


def stage_paper_report(run: RunConfig, config: dict, measured_paths: list[str] = ()) -> tuple[dict, str]:
    """Reference tables, with measured ablation/MCD reports merged in when given."""
    started = time.monotonic()
    run.inputs = list(measured_paths)
    run.check()
    measured = {}
    for path in measured_paths:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        if data.get("run_id") == "ablation":
            source = data["config"].get("vad_source", "audio_vad")
            measured.setdefault(source, []).extend(data["metrics"].values())
        elif data.get("run_id") == "mcd" and "trend" in data:
            measured["resynthesis"] = {"configs": data["metrics"], "trend": data["trend"]}
        else:
            log.warning("%s is not an ablation or resynthesis report; ignored", path)
    rep, text = report.paper_report(measured)
    report.write_report(run.out_dir, "paper_report", rep, text)
    write_run_metadata(run, config, started)
    return rep, text
