"""Classification metrics for the speech/silence task (positive class = speech).

A metric whose denominator is zero is reported as ``None`` ("undefined"),
never as 0.
"""

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.metrics import confusion_matrix, roc_auc_score
from sklearn.metrics import roc_curve as _sk_roc_curve

from .errors import ValidationError

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "kappa")


@dataclass(frozen=True)
class ConfusionMatrix:
    tn: int
    fp: int
    fn: int
    tp: int

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) != value or value < 0:
                raise ValidationError(f"confusion count {name} must be a non-negative integer, got {value}")
            object.__setattr__(self, name, int(value))

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    def scaled(self, k: int) -> "ConfusionMatrix":
        return ConfusionMatrix(self.tn * k, self.fp * k, self.fn * k, self.tp * k)

    def to_dict(self) -> dict:
        return asdict(self)


def confusion(labels, preds) -> ConfusionMatrix:
    labels = np.asarray(labels).astype(np.int64).ravel()
    preds = np.asarray(preds).astype(np.int64).ravel()
    if labels.shape != preds.shape:
        raise ValidationError(f"{labels.size} labels vs {preds.size} predictions")
    if not np.all(np.isin(labels, (0, 1))) or not np.all(np.isin(preds, (0, 1))):
        raise ValidationError("labels and predictions must be 0/1")
    if not labels.size:
        return ConfusionMatrix(0, 0, 0, 0)
    tn, fp, fn, tp = confusion_matrix(labels, preds, labels=[0, 1]).ravel()
    return ConfusionMatrix(tn, fp, fn, tp)


def _ratio(num: float, den: float) -> float | None:
    return num / den if den else None


def classification_metrics(cm: ConfusionMatrix) -> dict[str, float | None]:
    n = cm.total
    accuracy = _ratio(cm.tp + cm.tn, n)
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    f1 = _ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn)
    kappa = None
    if n:
        po = accuracy
        pe = ((cm.tp + cm.fp) * (cm.tp + cm.fn) + (cm.tn + cm.fn) * (cm.tn + cm.fp)) / (n * n)
        kappa = _ratio(po - pe, 1.0 - pe)
    return {"accuracy": accuracy, "precision": precision, "recall": recall, "f1": f1, "kappa": kappa}


def _check_scores(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels).astype(np.int64).ravel()
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if labels.shape != scores.shape:
        raise ValidationError(f"{labels.size} labels vs {scores.size} scores")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValidationError("labels must be 0/1")
    if np.unique(labels).size < 2:
        raise ValidationError("ROC analysis needs both classes present")
    return labels, scores


def roc_auc(labels, scores) -> float:
    """Area under the ROC curve; tied scores count one half."""
    labels, scores = _check_scores(labels, scores)
    return float(roc_auc_score(labels, scores))


def roc_curve(labels, scores) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(fpr, tpr, thresholds)`` with every distinct score as a threshold."""
    labels, scores = _check_scores(labels, scores)
    fpr, tpr, thresholds = _sk_roc_curve(labels, scores, drop_intermediate=False)
    return fpr, tpr, thresholds


def best_f1_threshold(labels, scores) -> tuple[float, float]:
    """Score threshold (predict speech when ``score >= t``) maximising F1."""
    fpr, tpr, thresholds = roc_curve(labels, scores)
    labels = np.asarray(labels).ravel()
    positives = int(np.count_nonzero(labels == 1))
    negatives = labels.size - positives
    tps = np.rint(tpr[1:] * positives)
    fps = np.rint(fpr[1:] * negatives)
    f1 = 2.0 * tps / (tps + fps + positives)
    best = int(np.argmax(f1))
    return float(thresholds[1:][best]), float(f1[best])


# ============================================================
# Published reference values (not reproduced here)
# ============================================================

PUBLISHED_CONFUSION = {
    "dev": ConfusionMatrix(tn=2850, fp=1302, fn=502, tp=9295),
    "test": ConfusionMatrix(tn=1671, fp=1268, fn=418, tp=8096),
}

PUBLISHED_CLASSIFICATION = {
    "dev": {"accuracy": 0.87, "recall": 0.94, "precision": 0.877, "f1": 0.91, "auc": 0.894, "kappa": 0.672},
    "test": {"accuracy": 0.852, "recall": 0.95, "precision": 0.864, "f1": 0.9, "auc": 0.859, "kappa": 0.57},
}

# {net: {silence mode: {mse_dev, mse_test, mcd}}} with audio-based and image-based VAD
PUBLISHED_SSI = {
    "audio_vad": {
        "ssi_conv3d": {"removed": {"mse_dev": 0.46, "mse_test": 0.45, "mcd": 3.20},
                       "keep180": {"mse_dev": 0.30, "mse_test": 0.33, "mcd": 3.29}},
        "ssi_conv3d_bilstm": {"removed": {"mse_dev": 0.39, "mse_test": 0.42, "mcd": 3.08},
                              "keep180": {"mse_dev": 0.259, "mse_test": 0.29, "mcd": 3.13}},
    },
    "image_vad": {
        "ssi_conv3d": {"removed": {"mse_dev": 0.436, "mse_test": 0.428, "mcd": 3.15},
                       "keep180": {"mse_dev": 0.38, "mse_test": 0.27, "mcd": 3.28}},
        "ssi_conv3d_bilstm": {"removed": {"mse_dev": 0.393, "mse_test": 0.41, "mcd": 3.05},
                              "keep180": {"mse_dev": 0.35, "mse_test": 0.26, "mcd": 3.12}},
    },
}

PUBLISHED_RESYNTHESIS_MCD = {"A": 1.55, "B": 2.03, "C": 1.34}
