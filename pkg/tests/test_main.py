"""Tests for utivad.__main__ — argument handling, exit codes, stage dispatch."""

import json
import logging
import os
from unittest.mock import patch

import numpy as np
import pytest

from utivad.__main__ import _load_sweep, _nets, _workers, build_parser, main
from utivad.dsp import MelTrack, write_mel_track
from utivad.errors import ValidationError
from utivad.prep import LabelTrack, write_label_csv


@pytest.fixture(autouse=True)
def clean_logger():
    """main() installs handlers on the package logger; drop them between tests."""
    yield
    logger = logging.getLogger("utivad")
    for h in list(logger.handlers):
        logger.removeHandler(h)
        h.close()


def run_cli(*argv, tmp_path=None):
    args = list(argv)
    if tmp_path is not None:
        args = ["--log-dir", str(tmp_path / "logs")] + args
    return main(args)


# ---------------------------------------------------------------------------
# Parser and helpers
# ---------------------------------------------------------------------------

class TestParser:
    """Tests for build_parser()."""

    def test_subcommand_required(self, capsys):
        assert main([]) == 1
        assert "error" in capsys.readouterr().err

    def test_unknown_flag_is_usage_error(self, capsys):
        assert main(["synth", "--bogus"]) == 1
        assert "--bogus" in capsys.readouterr().err

    def test_bad_choice(self):
        assert main(["train-ssi", "--net", "transformer"]) == 1

    def test_defaults(self):
        args = build_parser().parse_args(["train-ssi", "--manifest", "m.json"])
        assert args.net == "bilstm"
        assert args.silence == "keep180"
        assert args.vad_source == "audio_vad"
        assert args.out == "."

    def test_repeatable_keep(self):
        args = build_parser().parse_args(["vad-audio", "--keep", "0", "--keep", "180"])
        assert args.keep == [0.0, 180.0]

    def test_mcd_default_keeps(self):
        args = build_parser().parse_args(["mcd"])
        assert args.keeps == [0, 180, 360, 540]


class TestDocumentedInvocations:
    """Command lines from the usage text parse as written."""

    @pytest.mark.parametrize("argv", [
        "synth --n 30 --seed 7 --out d/",
        "vad-audio --manifest d/manifest.json",
        "eval-vad --fixtures table6",
        "ablation --net bilstm --preset reduced --seeds 3",
        "train-vad --manifest d/manifest.json --preset paper_exact --seed 0",
        "prep --manifest d/manifest.json --preset paper_exact",
        "paper-report",
    ])
    def test_parses(self, argv):
        args = build_parser().parse_args(argv.split())
        assert args.command == argv.split()[0]

    def test_example_values(self):
        args = build_parser().parse_args("ablation --net bilstm --preset reduced --seeds 3".split())
        assert (args.net, args.preset, args.seeds) == ("bilstm", "reduced", 3)
        assert build_parser().parse_args(["eval-vad", "--fixtures", "table6"]).fixtures == "table6"
        assert build_parser().parse_args(["train-vad", "--preset", "paper_exact"]).preset == "paper_exact"

    def test_neutral_aliases_still_parse(self):
        assert build_parser().parse_args(["train-vad", "--preset", "full"]).preset == "full"
        assert build_parser().parse_args(["eval-vad", "--fixtures", "published"]).fixtures == "published"
        assert build_parser().parse_args(["reference-report"]).command == "reference-report"

    @patch("utivad.__main__.stage_paper_report", return_value=({}, "tables"))
    def test_report_alias_dispatches_to_paper_report(self, mock_stage, tmp_path):
        assert run_cli("reference-report", "--out", str(tmp_path), tmp_path=tmp_path) == 0
        run = mock_stage.call_args.args[0]
        assert run.command == "paper-report"

    @patch("utivad.__main__.stage_train_vad", return_value="vad_cnn2d.wts")
    def test_paper_exact_preset_reaches_stage(self, mock_stage, tmp_path):
        code = run_cli("train-vad", "--manifest", "m.json", "--preset", "paper_exact", "--seed", "0",
                       "--out", str(tmp_path), tmp_path=tmp_path)
        assert code == 0
        assert mock_stage.call_args.args[0].preset == "paper_exact"


class TestHelpers:

    def test_workers_capped_by_threads(self):
        assert _workers(None, {"threads": 1}) == 1
        assert _workers(8, {"threads": 2}) == 2
        assert _workers(1, {"threads": 4}) == 1
        assert _workers(None, {"threads": 3}) == 3

    def test_nets(self):
        assert _nets("both") == ["conv3d", "bilstm"]
        assert _nets("bilstm") == ["bilstm"]

    def test_sweep_list_or_object(self, tmp_path):
        a = tmp_path / "a.json"
        a.write_text('[{"net": "conv3d"}]', encoding="utf-8")
        b = tmp_path / "b.json"
        b.write_text('{"runs": [{"seeds": 1}, {"seeds": 2}]}', encoding="utf-8")
        assert _load_sweep(str(a)) == [{"net": "conv3d"}]
        assert len(_load_sweep(str(b))) == 2

    def test_sweep_rejects_bad_shapes(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"runs": 3}', encoding="utf-8")
        with pytest.raises(ValidationError):
            _load_sweep(str(path))
        with pytest.raises(ValidationError):
            _load_sweep(str(tmp_path / "missing.json"))


# ---------------------------------------------------------------------------
# Exit codes
# ---------------------------------------------------------------------------

class TestExitCodes:
    """0 success, 1 invalid input, 2 runtime failure."""

    def test_invalid_config(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"preset": "huge", "threads": 0}', encoding="utf-8")
        assert run_cli("--config", str(path), "paper-report", "--out", str(tmp_path), tmp_path=tmp_path) == 1
        err = capsys.readouterr().err
        assert "[config]" in err
        assert "preset" in err

    def test_missing_manifest(self, tmp_path, capsys):
        code = run_cli("labels", "--manifest", str(tmp_path / "missing.json"), "--out", str(tmp_path),
                       tmp_path=tmp_path)
        assert code == 1
        assert "error: manifest not found" in capsys.readouterr().err

    def test_manifest_required(self, tmp_path, capsys):
        assert run_cli("prep", "--out", str(tmp_path), tmp_path=tmp_path) == 1
        assert "--manifest is required" in capsys.readouterr().err

    def test_synth_needs_seed(self, tmp_path, capsys):
        assert run_cli("synth", "--n", "3", "--out", str(tmp_path), tmp_path=tmp_path) == 1
        assert "--seed" in capsys.readouterr().err

    def test_training_needs_seed(self, tmp_path):
        manifest = tmp_path / "manifest.json"
        manifest.write_text("[]", encoding="utf-8")
        code = run_cli("train-vad", "--manifest", str(manifest), "--out", str(tmp_path), tmp_path=tmp_path)
        assert code == 1

    @patch("utivad.__main__.stage_labels", side_effect=RuntimeError("disk on fire"))
    def test_runtime_failure(self, mock_stage, tmp_path):
        code = run_cli("labels", "--manifest", "m.json", "--out", str(tmp_path), tmp_path=tmp_path)
        assert code == 2
        mock_stage.assert_called_once()
        text = (tmp_path / "logs" / "utivad.log").read_text(encoding="utf-8")
        assert "labels failed" in text
        assert "disk on fire" in text

    def test_log_dir_defaults_under_out(self, tmp_path):
        assert run_cli("paper-report", "--out", str(tmp_path / "rep")) == 0
        assert (tmp_path / "rep" / "logs" / "utivad.log").exists()


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

class TestDispatch:

    @patch("utivad.__main__.stage_labels")
    def test_labels_prints_corpus_summary(self, mock_stage, tmp_path, capsys):
        mock_stage.return_value = {"corpus": {"frames": 10, "speech_ratio": 2.5}}
        assert run_cli("labels", "--manifest", "m.json", "--out", str(tmp_path), tmp_path=tmp_path) == 0
        run, config, vad_dir = mock_stage.call_args.args
        assert run.command == "labels"
        assert run.manifest == "m.json"
        assert vad_dir is None
        assert json.loads(capsys.readouterr().out) == {"frames": 10, "speech_ratio": 2.5}

    @patch("utivad.__main__.stage_train_ssi", return_value="model.wts")
    def test_train_ssi_arguments(self, mock_stage, tmp_path, capsys):
        code = run_cli("train-ssi", "--manifest", "m.json", "--net", "conv3d", "--seed", "3",
                       "--silence", "removed", "--epochs", "2", "--out", str(tmp_path), tmp_path=tmp_path)
        assert code == 0
        run, _, net, vad_model = mock_stage.call_args.args
        assert (run.seed, run.silence_mode, run.preset) == (3, "removed", "reduced")
        assert net == "conv3d"
        assert vad_model is None
        assert mock_stage.call_args.kwargs == {"max_epochs": 2}
        assert "model.wts" in capsys.readouterr().out

    @patch("utivad.__main__.stage_ablation", return_value=([], "table"))
    def test_ablation_seeds(self, mock_stage, tmp_path):
        code = run_cli("ablation", "--manifest", "m.json", "--seeds", "2", "--seed", "5",
                       "--out", str(tmp_path), tmp_path=tmp_path)
        assert code == 0
        _, _, nets, seeds, *_ = mock_stage.call_args.args
        assert nets == ["conv3d", "bilstm"]
        assert seeds == [5, 6]

    @patch("utivad.__main__.stage_ablation", return_value=([], "table"))
    def test_ablation_sweep_gets_subdirectories(self, mock_stage, tmp_path):
        sweep = tmp_path / "sweep.json"
        sweep.write_text(json.dumps([{"net": "conv3d"}, {"net": "bilstm", "seeds": 1}]), encoding="utf-8")
        code = run_cli("ablation", "--manifest", "m.json", "--sweep", str(sweep),
                       "--out", str(tmp_path), tmp_path=tmp_path)
        assert code == 0
        assert mock_stage.call_count == 2
        first, second = (c.args for c in mock_stage.call_args_list)
        assert first[0].out_dir == os.path.join(str(tmp_path), "00_conv3d_audio_vad")
        assert second[2] == ["bilstm"]
        assert second[3] == [0]


# ---------------------------------------------------------------------------
# Commands that need no corpus
# ---------------------------------------------------------------------------

class TestFixtureCommands:

    @pytest.mark.parametrize("name", ["table6", "published"])
    def test_eval_vad_fixtures(self, name, tmp_path, capsys):
        assert run_cli("eval-vad", "--fixtures", name, "--out", str(tmp_path), tmp_path=tmp_path) == 0
        out = capsys.readouterr().out
        assert "0.8528" in out
        with open(tmp_path / "eval_vad.json", encoding="utf-8") as f:
            report = json.load(f)
        assert report["metrics"]["test"]["accuracy"] == pytest.approx(0.8528, abs=1e-4)
        assert (tmp_path / "eval_vad.txt").exists()
        assert (tmp_path / "run.eval-vad.json").exists()

    def test_eval_vad_needs_model_or_fixtures(self, tmp_path, capsys):
        manifest = tmp_path / "manifest.json"
        manifest.write_text("[]", encoding="utf-8")
        code = run_cli("eval-vad", "--manifest", str(manifest), "--out", str(tmp_path), tmp_path=tmp_path)
        assert code == 1
        assert "--model" in capsys.readouterr().err

    def test_paper_report(self, tmp_path):
        assert run_cli("paper-report", "--out", str(tmp_path), tmp_path=tmp_path) == 0
        assert (tmp_path / "paper_report.json").exists()
        assert (tmp_path / "paper_report.txt").exists()

    def test_mcd_between_tracks(self, tmp_path, capsys, rng):
        ref = rng.normal(size=(20, 80))
        est = ref + 0.1 * rng.normal(size=(20, 80))
        write_mel_track(str(tmp_path / "ref.melz"), MelTrack(ref, 81.5))
        write_mel_track(str(tmp_path / "est.melz"), MelTrack(est, 81.5))
        labels = np.zeros(20, dtype=np.int8)
        labels[5:15] = 1
        write_label_csv(str(tmp_path / "mask.csv"), LabelTrack(labels))
        code = run_cli("mcd", "--ref", str(tmp_path / "ref.melz"), "--est", str(tmp_path / "est.melz"),
                       "--mask", str(tmp_path / "mask.csv"), "--out", str(tmp_path), tmp_path=tmp_path)
        assert code == 0
        result = json.loads(capsys.readouterr().out)
        assert result["n_frames"] == 20
        assert result["mcd_all"] > 0
        assert result["mcd_speech"] > 0

    def test_mcd_identical_tracks(self, tmp_path, capsys, rng):
        track = MelTrack(rng.normal(size=(12, 80)), 81.5)
        write_mel_track(str(tmp_path / "a.melz"), track)
        code = run_cli("mcd", "--ref", str(tmp_path / "a.melz"), "--est", str(tmp_path / "a.melz"),
                       "--out", str(tmp_path), tmp_path=tmp_path)
        assert code == 0
        assert json.loads(capsys.readouterr().out)["mcd_all"] == pytest.approx(0.0, abs=1e-9)

    def test_mcd_needs_both_tracks(self, tmp_path, rng):
        write_mel_track(str(tmp_path / "a.melz"), MelTrack(rng.normal(size=(4, 80)), 81.5))
        code = run_cli("mcd", "--ref", str(tmp_path / "a.melz"), "--out", str(tmp_path), tmp_path=tmp_path)
        assert code == 1


# ---------------------------------------------------------------------------
# End to end on a three-utterance corpus
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["--log-dir", str(root / "logs"), "synth", "--n", "3", "--seed", "11",
                 "--out", str(root / "corpus")]) == 0
    return root


class TestEndToEnd:

    def test_synth_manifest(self, cli_corpus):
        with open(cli_corpus / "corpus" / "manifest.json", encoding="utf-8") as f:
            manifest = json.load(f)
        entries = manifest["utterances"] if isinstance(manifest, dict) else manifest
        assert sorted(e["split"] for e in entries) == ["dev", "test", "train"]
        assert (cli_corpus / "corpus" / "run.synth.json").exists()

    def test_vad_then_labels(self, cli_corpus, capsys):
        manifest = str(cli_corpus / "corpus" / "manifest.json")
        vad_dir = cli_corpus / "vad"
        assert main(["--log-dir", str(cli_corpus / "logs"), "vad-audio", "--manifest", manifest,
                     "--keep", "180", "--out", str(vad_dir)]) == 0
        assert len(list(vad_dir.glob("*.vad.csv"))) == 3
        assert len(list(vad_dir.glob("*.wav"))) > 0
        capsys.readouterr()

        labels_dir = cli_corpus / "labels"
        assert main(["--log-dir", str(cli_corpus / "logs"), "labels", "--manifest", manifest,
                     "--vad-dir", str(vad_dir), "--out", str(labels_dir)]) == 0
        corpus = json.loads(capsys.readouterr().out)
        assert corpus["frames"] > 0
        assert corpus["speech_ratio"] > 0
        assert len(list(labels_dir.glob("*.labels.csv"))) == 3

    def test_train_and_evaluate_classifier(self, cli_corpus, capsys):
        manifest = str(cli_corpus / "corpus" / "manifest.json")
        models = cli_corpus / "models"
        assert main(["--log-dir", str(cli_corpus / "logs"), "train-vad", "--manifest", manifest,
                     "--seed", "0", "--epochs", "1", "--out", str(models)]) == 0
        model_path = capsys.readouterr().out.strip().splitlines()[-1]
        assert model_path.endswith("vad_cnn2d.wts")
        assert os.path.isfile(model_path)
        assert (models / "vad_cnn2d.history.json").exists()

        evals = cli_corpus / "eval"
        assert main(["--log-dir", str(cli_corpus / "logs"), "eval-vad", "--manifest", manifest,
                     "--model", model_path, "--out", str(evals)]) == 0
        with open(evals / "eval_vad.json", encoding="utf-8") as f:
            report = json.load(f)
        assert set(report["metrics"]) >= {"dev", "test"}
        assert 0.0 <= report["metrics"]["test"]["accuracy"] <= 1.0
