"""Configuration loader for the utivad pipeline."""

import json
import os
import sys

from .containers import write_json_atomic
from .errors import ValidationError
from .models import PRESETS
from .optim import OPTIMIZERS
from .vad import VadConfig

DEFAULT_CONFIG = {
    # ---- signal ----
    "sample_rate": 16000,
    "fps": 81.5,
    "n_fft": 512,
    "n_mels": 80,
    "fmin": 0.0,
    "fmax": None,          # None = sample_rate / 2
    "log_floor": 1e-10,
    "griffin_lim_iters": 60,

    # ---- speech VAD ----
    "vad_frame_ms": 10.0,
    "vad_energy_offset_db": 9.0,
    "vad_zcr_threshold": 0.35,
    "vad_onset_min_frames": 3,
    "vad_offset_min_frames": 5,
    "vad_keep_ms": 180.0,
    "vad_max_threshold_db": -30.0,

    # ---- networks ----
    # Image shapes and widths come from the preset (see utivad.models.PRESETS).
    "preset": "reduced",
    "window_len": 25,
    "batch_size_vad": 64,
    "batch_size_ssi": 16,
    "max_epochs": 30,
    "patience": 3,
    "vad_optimizer": "sgd",
    "lr_vad": 0.001,
    "ssi_optimizer": "adam",
    "lr_ssi": 0.0002,

    # ---- runtime ----
    # Worker processes for synth and ablation. 1 keeps runs byte-identical.
    "threads": 1,
    "log_dir": "",
    "log_max_hours": 24,
}


def _default_config_path() -> str:
    return os.path.join(os.getcwd(), "utivad.json")


def load_config(path: str | None = None) -> dict:
    """Load config from file. Falls back to defaults if missing."""
    if path is None:
        path = os.environ.get("UTIVAD_CONFIG", _default_config_path())

    config = dict(DEFAULT_CONFIG)

    if os.path.isfile(path):
        try:
            with open(path, "r", encoding="utf-8") as f:
                user_config = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(user_config, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
        config.update(user_config)

    threads = os.environ.get("UTIVAD_THREADS")
    if threads:
        try:
            config["threads"] = int(threads)
        except ValueError:
            config["threads"] = threads

    return config


def save_config(path: str, cfg: dict) -> None:
    """Write config dict back to the JSON file, replacing it atomically."""
    write_json_atomic(path, cfg)
    print(f"[config] Saved config to {path}", file=sys.stderr)


def validate_config(config: dict) -> list[str]:
    """Return list of config problems. Empty list means OK."""
    problems = []
    sr = config.get("sample_rate", 0)
    fps = config.get("fps", 0)
    if not isinstance(sr, int) or sr <= 0:
        problems.append("sample_rate must be a positive integer")
    if not isinstance(fps, (int, float)) or fps <= 0:
        problems.append("fps must be > 0")
    if not problems and config.get("n_fft", 0) < round(sr / fps):
        problems.append(f"n_fft must be >= the hop of {round(sr / fps)} samples")
    if config.get("n_mels", 0) < 2:
        problems.append("n_mels must be >= 2")
    fmax = config.get("fmax")
    if fmax is not None and isinstance(sr, int) and fmax > sr / 2:
        problems.append(f"fmax {fmax} exceeds the Nyquist frequency {sr / 2}")
    if config.get("griffin_lim_iters", 0) < 1:
        problems.append("griffin_lim_iters must be >= 1")

    try:
        VadConfig.from_config(config)
    except ValidationError as e:
        problems.append(str(e))

    if config.get("preset") not in PRESETS:
        problems.append(f"preset must be one of {sorted(PRESETS)}")
    for key in ("vad_optimizer", "ssi_optimizer"):
        if config.get(key) not in OPTIMIZERS:
            problems.append(f"{key} must be one of {sorted(OPTIMIZERS)}")
    for key in ("lr_vad", "lr_ssi"):
        if not config.get(key, 0) > 0:
            problems.append(f"{key} must be > 0")
    for key in ("batch_size_vad", "batch_size_ssi", "patience", "window_len"):
        if config.get(key, 0) < 1:
            problems.append(f"{key} must be >= 1")
    if config.get("max_epochs", -1) < 0:
        problems.append("max_epochs must be >= 0")
    threads = config.get("threads")
    if not isinstance(threads, int) or threads < 1:
        problems.append("threads (or UTIVAD_THREADS) must be a positive integer")
    return problems
