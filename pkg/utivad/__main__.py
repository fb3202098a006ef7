"""utivad: speech/silence detection for ultrasound-to-speech pipelines.

Usage:
    utivad synth --n 30 --seed 7 --out d/                 # synthetic parallel corpus
    utivad vad-audio --manifest d/manifest.json --out v/  # speech VAD tracks per utterance
    utivad labels --manifest d/manifest.json --out l/     # ultrasound frame labels + class ratio
    utivad prep --manifest d/manifest.json --out p/       # preprocessed frames and log-mel tracks
    utivad train-vad --manifest d/manifest.json --seed 0 --out m/
    utivad eval-vad --manifest d/manifest.json --model m/vad_cnn2d.wts --out e/
    utivad eval-vad --fixtures table6                     # metrics of the embedded reference matrices
    utivad train-ssi --manifest d/manifest.json --net bilstm --seed 0 --silence keep180 --out s/
    utivad eval-ssi --manifest d/manifest.json --model s/ssi_conv3d_bilstm.keep180.wts --out s/
    utivad mcd --ref a.melz --est b.melz [--mask labels.csv]
    utivad mcd --manifest d/manifest.json --out r/        # analysis-synthesis MCD experiment
    utivad ablation --manifest d/manifest.json --net bilstm --preset reduced --seeds 3 --out a/
    utivad train-vad --manifest d/manifest.json --preset paper_exact --seed 0 --out m/
    utivad ablation --manifest d/manifest.json --sweep sweep.json --out a/
    utivad paper-report --out p/ [--measured a/ablation_audio_vad.json r/mcd.json]
    python -m utivad --config /path/to/config.json <command> ...

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
UTIVAD_THREADS caps worker processes (default 1, which keeps runs byte-identical).
"""

import os

# single-threaded BLAS keeps floating-point reductions in a fixed order
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402

from . import __version__  # noqa: E402
from .config import load_config, validate_config  # noqa: E402
from .errors import ValidationError  # noqa: E402
from .log import setup_logging  # noqa: E402
from .models import PRESETS  # noqa: E402
from .pipeline import (FIXTURES, RunConfig, stage_ablation, stage_eval_ssi, stage_eval_vad,  # noqa: E402
                       stage_labels, stage_mcd, stage_paper_report, stage_prep, stage_synth, stage_train_ssi,
                       stage_train_vad, stage_vad_audio)

log = logging.getLogger("utivad.main")

NET_CHOICES = ("conv3d", "bilstm", "both")
COMMAND_ALIASES = {"reference-report": "paper-report"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """Raises instead of exiting so bad flags map to exit code 1."""

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, manifest: bool = True) -> None:
    p.add_argument("--out", "-o", default=".", help="Output directory (default: current directory)")
    if manifest:
        p.add_argument("--manifest", "-m", help="Corpus manifest JSON")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=tuple(PRESETS), default=None,
                   help="Model size preset (default from config)")
    p.add_argument("--seed", type=int, help="Seed for initialisation, dropout and shuffling")
    p.add_argument("--epochs", type=int, help="Override max_epochs")


def _labelling(p: argparse.ArgumentParser) -> None:
    p.add_argument("--silence", choices=("removed", "keep180"), default="keep180",
                   help="Silence handling of the training windows")
    p.add_argument("--vad-source", choices=("audio_vad", "image_vad"), default="audio_vad",
                   help="Where the speech/silence labels come from")
    p.add_argument("--vad-model", help="Trained frame classifier (.wts) for --vad-source image_vad")


def build_parser() -> Parser:
    parser = Parser(prog="utivad", description="Speech/silence detection for ultrasound-to-speech pipelines")
    parser.add_argument("--version", action="version", version=f"utivad {__version__}")
    parser.add_argument("--config", "-c", help="Path to config JSON file")
    parser.add_argument("--log-dir", help="Directory for utivad.log (default: <out>/logs)")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", help="Generate a synthetic parallel corpus")
    _common(p, manifest=False)
    p.add_argument("--n", type=int, default=30, help="Number of utterances, split 80/10/10")
    p.add_argument("--seed", type=int, help="Corpus seed")
    p.add_argument("--workers", type=int, help="Worker processes (capped by UTIVAD_THREADS)")

    p = sub.add_parser("vad-audio", help="Speech VAD decisions per utterance")
    _common(p)
    p.add_argument("--keep", type=float, action="append", default=[],
                   help="Also write WAVs trimmed keeping this many ms of silence (repeatable)")

    p = sub.add_parser("labels", help="Ultrasound frame labels from the speech VAD")
    _common(p)
    p.add_argument("--vad-dir", help="Reuse <id>.vad.csv files from this directory")

    p = sub.add_parser("prep", help="Preprocess frames and compute log-mel tracks")
    _common(p)
    p.add_argument("--preset", choices=tuple(PRESETS), default=None)
    p.add_argument("--for", dest="target", choices=("vad", "ssi"), default="ssi",
                   help="Which network's image size to prepare for")

    p = sub.add_parser("train-vad", help="Train the frame classifier")
    _common(p)
    _training(p)

    p = sub.add_parser("eval-vad", help="Evaluate the frame classifier")
    _common(p)
    p.add_argument("--model", help="Trained classifier (.wts)")
    p.add_argument("--fixtures", choices=FIXTURES, help="Evaluate the embedded reference matrices instead")

    p = sub.add_parser("train-ssi", help="Train a spectral regression net")
    _common(p)
    _training(p)
    _labelling(p)
    p.add_argument("--net", choices=("conv3d", "bilstm"), default="bilstm")

    p = sub.add_parser("eval-ssi", help="Evaluate a spectral regression net")
    _common(p)
    _labelling(p)
    p.add_argument("--model", required=True, help="Trained regression net (.wts)")
    p.add_argument("--synthesize", action="store_true", help="Also write Griffin-Lim WAVs of the predictions")

    p = sub.add_parser("mcd", help="MCD between mel tracks, or the analysis-synthesis experiment")
    _common(p)
    p.add_argument("--ref", help="Reference .melz")
    p.add_argument("--est", help="Estimated .melz")
    p.add_argument("--mask", help="Label CSV selecting speech frames")
    p.add_argument("--keeps", type=float, nargs="+", default=[0, 180, 360, 540],
                   help="Retained-silence steps in ms for the experiment")
    p.add_argument("--seed", type=int, default=0, help="Griffin-Lim phase seed")

    p = sub.add_parser("ablation", help="Train with silence removed vs kept and compare")
    _common(p)
    _training(p)
    p.add_argument("--net", choices=NET_CHOICES, default="both")
    p.add_argument("--seeds", type=int, default=3, help="Number of seeds, starting at --seed (default 0)")
    p.add_argument("--vad-source", choices=("audio_vad", "image_vad"), default="audio_vad")
    p.add_argument("--vad-model", help="Trained frame classifier (.wts) for --vad-source image_vad")
    p.add_argument("--workers", type=int, help="Parallel seeds (capped by UTIVAD_THREADS)")
    p.add_argument("--sweep", help="JSON list of ablation runs overriding these flags")

    p = sub.add_parser("paper-report", aliases=["reference-report"],
                       help="Reference tables with optional measured reports")
    _common(p, manifest=False)
    p.add_argument("--measured", nargs="*", default=[], help="ablation_*.json / mcd.json reports to merge")

    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _workers(requested: int | None, config: dict) -> int:
    cap = int(config.get("threads", 1))
    return max(1, min(requested or cap, cap))


def _nets(name: str) -> list[str]:
    return ["conv3d", "bilstm"] if name == "both" else [name]


def _overrides(args) -> dict:
    return {"max_epochs": args.epochs} if getattr(args, "epochs", None) is not None else {}


def _load_sweep(path: str) -> list[dict]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read sweep {path}: {e}") from None
    runs = data.get("runs") if isinstance(data, dict) else data
    if not isinstance(runs, list) or not all(isinstance(r, dict) for r in runs):
        raise ValidationError(f"{path}: sweep must be a list of objects (or {{\"runs\": [...]}})")
    return runs


def _run_ablation(args, config: dict, preset: str) -> int:
    base = {"net": args.net, "seeds": args.seeds, "seed": args.seed or 0, "vad_source": args.vad_source,
            "vad_model": args.vad_model, "preset": preset, "epochs": args.epochs}
    sweep = _load_sweep(args.sweep) if args.sweep else [{}]
    for i, entry in enumerate(sweep):
        opts = {**base, **entry}
        out = args.out if len(sweep) == 1 else os.path.join(args.out, f"{i:02d}_{opts['net']}_{opts['vad_source']}")
        run = RunConfig("ablation", out, args.manifest, opts["preset"], opts["seed"],
                        vad_source=opts["vad_source"])
        seeds = list(range(opts["seed"], opts["seed"] + int(opts["seeds"])))
        overrides = {"max_epochs": opts["epochs"]} if opts["epochs"] is not None else {}
        _, text = stage_ablation(run, config, _nets(opts["net"]), seeds, opts["vad_model"],
                                 _workers(args.workers, config), **overrides)
        print(text)
    return 0


def dispatch(args, config: dict) -> int:
    cmd = COMMAND_ALIASES.get(args.command, args.command)
    preset = getattr(args, "preset", None) or config.get("preset", "reduced")

    if cmd == "synth":
        run = RunConfig(cmd, args.out, seed=args.seed)
        path = stage_synth(run, config, args.n, _workers(args.workers, config))
        print(path)
    elif cmd == "vad-audio":
        stage_vad_audio(RunConfig(cmd, args.out, args.manifest), config, tuple(args.keep))
    elif cmd == "labels":
        run = RunConfig(cmd, args.out, args.manifest, inputs=[args.vad_dir] if args.vad_dir else [])
        summary = stage_labels(run, config, args.vad_dir)
        print(json.dumps(summary["corpus"], sort_keys=True))
    elif cmd == "prep":
        kind = "vad_cnn2d" if args.target == "vad" else "ssi_conv3d"
        stage_prep(RunConfig(cmd, args.out, args.manifest, preset), config, kind)
    elif cmd == "train-vad":
        print(stage_train_vad(RunConfig(cmd, args.out, args.manifest, preset, args.seed), config,
                              **_overrides(args)))
    elif cmd == "eval-vad":
        run = RunConfig(cmd, args.out, args.manifest, preset)
        _, text = stage_eval_vad(run, config, args.model, args.fixtures)
        print(text)
    elif cmd == "train-ssi":
        run = RunConfig(cmd, args.out, args.manifest, preset, args.seed, args.silence, args.vad_source)
        print(stage_train_ssi(run, config, args.net, args.vad_model, **_overrides(args)))
    elif cmd == "eval-ssi":
        run = RunConfig(cmd, args.out, args.manifest, preset, None, args.silence, args.vad_source)
        metrics = stage_eval_ssi(run, config, args.model, args.vad_model, args.synthesize)
        print(json.dumps(metrics, sort_keys=True))
    elif cmd == "mcd":
        run = RunConfig(cmd, args.out, args.manifest, preset, args.seed)
        result = stage_mcd(run, config, args.ref, args.est, args.mask, tuple(args.keeps))
        print(json.dumps(result, sort_keys=True, default=str))
    elif cmd == "ablation":
        return _run_ablation(args, config, preset)
    elif cmd == "paper-report":
        _, text = stage_paper_report(RunConfig(cmd, args.out), config, args.measured)
        print(text)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1

    try:
        config = load_config(args.config)
        problems = validate_config(config)
        if problems:
            for p in problems:
                print(f"[config] {p}", file=sys.stderr)
            return 1
        setup_logging(args.log_dir or os.path.join(args.out, "logs"), config.get("log_max_hours", 24))
        log.debug("utivad %s: %s", __version__, " ".join(argv if argv is not None else sys.argv[1:]))
        return dispatch(args, config)
    except ValidationError as e:
        log.debug("validation error: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        log.exception("%s failed", args.command)
        return 2


if __name__ == "__main__":
    sys.exit(main())
