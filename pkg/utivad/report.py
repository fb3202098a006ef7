"""JSON reports and aligned text tables.

Published reference numbers sit next to measured values and are
always labelled "published (not reproduced)". Reports carry no timestamps, so
identical inputs give byte-identical files.
"""

import csv
import io
import json
import os

import numpy as np

from .containers import write_json_atomic, write_text_atomic
from .metrics import (METRIC_NAMES, PUBLISHED_CLASSIFICATION, PUBLISHED_CONFUSION, PUBLISHED_RESYNTHESIS_MCD,
                      PUBLISHED_SSI, ConfusionMatrix, classification_metrics)

PUBLISHED_LABEL = "published (not reproduced)"
MEASURED_LABEL = "measured"
UNDEFINED = "undefined"


def fmt(value, digits: int = 4) -> str:
    if value is None:
        return UNDEFINED
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.{digits}f}"
    return str(value)


def render_table(headers: list[str], rows: list[list], title: str = "") -> str:
    cells = [[str(h) for h in headers]] + [[fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]

    def line(r):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip()

    out = []
    if title:
        out += [title, "-" * len(title)]
    out.append(line(cells[0]))
    out.append("  ".join("-" * w for w in widths))
    out += [line(r) for r in cells[1:]]
    return "\n".join(out) + "\n"


def _plain(obj):
    """Convert numpy scalars/arrays so ``json.dumps`` accepts them."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ============================================================
# Generic run report
# ============================================================

def build_report(runs: list[dict], run_id: str = "report", config: dict | None = None,
                 paper_refs: dict | None = None) -> dict:
    """``runs`` is a list of ``{"name": ..., "metrics": {...}}``."""
    return _plain({
        "run_id": run_id,
        "config": config or {},
        "metrics": {run["name"]: run["metrics"] for run in runs},
        "paper_refs": paper_refs or {},
    })


def render_text(report: dict) -> str:
    metrics = report.get("metrics", {})
    title = f"Report {report.get('run_id', '')}".strip()
    if not metrics:
        return f"{title}\n(no runs)\n"
    names = list(metrics)
    keys = []
    for name in names:
        for k in metrics[name]:
            if k not in keys:
                keys.append(k)
    rows = [[k] + [metrics[name].get(k) for name in names] for k in keys]
    return render_table(["metric"] + names, rows, title)


def write_report(out_dir: str, name: str, report: dict, text: str | None = None) -> tuple[str, str]:
    json_path = os.path.join(out_dir, f"{name}.json")
    text_path = os.path.join(out_dir, f"{name}.txt")
    write_json_atomic(json_path, _plain(report))
    write_text_atomic(text_path, text if text is not None else render_text(report))
    return json_path, text_path


def write_csv(path: str, header: list[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    write_text_atomic(path, buf.getvalue())


def dumps(report: dict) -> str:
    return json.dumps(_plain(report), indent=2, sort_keys=True) + "\n"


# ============================================================
# Classification tables
# ============================================================

def classification_report(matrices: dict[str, ConfusionMatrix], aucs: dict | None = None,
                          run_id: str = "classification", config: dict | None = None,
                          published: bool = True) -> dict:
    runs = []
    for split, cm in matrices.items():
        m = classification_metrics(cm)
        if aucs and split in aucs:
            m["auc"] = aucs[split]
        m["confusion"] = cm.to_dict()
        runs.append({"name": split, "metrics": m})
    refs = {}
    if published:
        refs = {
            "classification": PUBLISHED_CLASSIFICATION,
            "confusion": {k: v.to_dict() for k, v in PUBLISHED_CONFUSION.items()},
        }
    return build_report(runs, run_id, config, refs)


def render_classification(report: dict) -> str:
    metrics = report["metrics"]
    refs = report.get("paper_refs", {}).get("classification", {})
    splits = list(metrics)
    headers = ["metric"]
    for split in splits:
        headers.append(f"{split} {MEASURED_LABEL}")
        if split in refs:
            headers.append(f"{split} {PUBLISHED_LABEL}")
    names = list(METRIC_NAMES) + (["auc"] if any("auc" in metrics[s] for s in splits) or refs else [])
    rows = []
    for name in names:
        row = [name]
        for split in splits:
            row.append(metrics[split].get(name))
            if split in refs:
                row.append(refs[split].get(name))
        rows.append(row)
    text = render_table(headers, rows, "Speech/silence classification")

    for split in splits:
        cm = metrics[split].get("confusion")
        if not cm:
            continue
        text += "\n" + render_table(
            ["actual \\ predicted", "silence", "speech"],
            [["silence", cm["tn"], cm["fp"]], ["speech", cm["fn"], cm["tp"]]],
            f"Confusion matrix ({split})",
        )
    return text


# ============================================================
# Silence ablation and resynthesis tables
# ============================================================

def render_ablation(rows: list[dict], vad_source: str = "audio_vad", published: bool = True) -> str:
    """Rows of ``{net, removed: {mse_dev, mse_test, mcd}, keep180: {...}}``."""
    headers = ["net", "source",
               "removed MSE(dev)", "removed MSE(test)", "removed MCD",
               "keep180 MSE(dev)", "keep180 MSE(test)", "keep180 MCD"]

    def cells(entry):
        return [entry[mode].get(k) for mode in ("removed", "keep180") for k in ("mse_dev", "mse_test", "mcd")]

    body = [[row["net"], MEASURED_LABEL] + cells(row) for row in rows]
    if published:
        refs = PUBLISHED_SSI.get(vad_source, {})
        nets = [row["net"] for row in rows] or list(refs)
        for net in dict.fromkeys(nets):
            if net in refs:
                body.append([net, PUBLISHED_LABEL] + cells(refs[net]))
    title = f"Silence handling in SSI training ({vad_source}; MSE in standardized units, MCD in dB)"
    return render_table(headers, body, title)


def render_resynthesis(result: dict, published: bool = True) -> str:
    """``result`` holds ``configs: {A|B|C: {mcd_all, mcd_speech}}`` and ``trend``."""
    configs = result.get("configs", {})
    rows = []
    for name in ("A", "B", "C"):
        entry = configs.get(name, {})
        row = [name, entry.get("mcd_all"), entry.get("mcd_speech")]
        if published:
            row.append(PUBLISHED_RESYNTHESIS_MCD[name])
        rows.append(row)
    headers = ["configuration", "MCD all frames", "MCD speech frames"]
    if published:
        headers.append(f"MCD {PUBLISHED_LABEL}")
    text = render_table(headers, rows, "Analysis-synthesis MCD (Griffin-Lim)")
    trend = result.get("trend", [])
    if trend:
        text += "\n" + render_table(
            ["kept silence (ms)", "MCD all frames", "MCD speech frames"],
            [[t["keep_ms"], t["mcd_all"], t["mcd_speech"]] for t in trend],
            "Retained silence vs MCD",
        )
    return text


def paper_report(measured: dict | None = None) -> tuple[dict, str]:
    """Reference tables from the embedded fixtures, with optional measured rows."""
    measured = measured or {}
    cls = classification_report(dict(PUBLISHED_CONFUSION), run_id="paper-report")
    text = render_classification(cls)
    for source in ("audio_vad", "image_vad"):
        text += "\n" + render_ablation(measured.get(source, []), source)
    text += "\n" + render_resynthesis(measured.get("resynthesis", {}))
    report = build_report(
        [{"name": f"fixture_{split}", "metrics": m} for split, m in cls["metrics"].items()],
        "paper-report",
        paper_refs={
            "classification": PUBLISHED_CLASSIFICATION,
            "ssi": PUBLISHED_SSI,
            "resynthesis_mcd": PUBLISHED_RESYNTHESIS_MCD,
        },
    )
    if measured:
        report["measured"] = _plain(measured)
    return report, text
