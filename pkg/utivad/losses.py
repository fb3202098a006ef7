"""Training losses. Each returns ``(loss, d_loss/d_input)``."""

import numpy as np

from .errors import DimensionError, ValidationError

BCE_EPS = 1e-7


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError("target", f"prediction shape {a.shape} != target shape {b.shape}")


def bce_loss(prob, target) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1 - eps]."""
    p = np.asarray(prob, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    _check_shapes(p, t)
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValidationError("binary cross-entropy targets must be 0 or 1")
    if p.size == 0:
        raise ValidationError("loss over an empty batch")
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    loss = -np.mean(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))
    # straight-through the clamp
    grad = (pc - t) / (pc * (1.0 - pc)) / p.size
    return float(loss), grad


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean of squared differences over every element."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    _check_shapes(p, t)
    if p.size == 0:
        raise ValidationError("loss over an empty batch")
    diff = p - t
    return float(np.mean(diff * diff)), 2.0 * diff / p.size


LOSSES = {"bce": bce_loss, "mse": mse_loss}


def get_loss(name: str):
    try:
        return LOSSES[name]
    except KeyError:
        raise ValidationError(f"unknown loss {name!r}; expected one of {sorted(LOSSES)}") from None
