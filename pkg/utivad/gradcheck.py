"""Central-difference verification of analytic gradients."""

import logging

import numpy as np

from .losses import get_loss
from .nn import Sequential

log = logging.getLogger("utivad.gradcheck")

KINK_TOLERANCE = 1e-4


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def _coords(size: int, cap: int | None, rng: np.random.Generator):
    if cap is not None and size > cap:
        return np.sort(rng.choice(size, size=cap, replace=False))
    return range(size)


def _worst_error(values: np.ndarray, analytic: np.ndarray, coords, objective, eps: float) -> float:
    """Perturb ``values`` in place at each flat index in ``coords``."""
    worst = 0.0
    for j in coords:
        pos = np.unravel_index(j, values.shape)
        orig = values[pos]
        values[pos] = orig + eps
        loss_plus = objective()
        values[pos] = orig - eps
        loss_minus = objective()
        values[pos] = orig
        numeric = (loss_plus - loss_minus) / (2.0 * eps)
        worst = max(worst, relative_error(float(analytic[pos]), numeric))
    return worst


def grad_check(model: Sequential, x, target, loss="mse", eps: float = 1e-5,
               rng: np.random.Generator | None = None, max_params: int | None = None,
               kink_tolerance: float = KINK_TOLERANCE, max_resamples: int = 20,
               check_input: bool = True) -> float:
    """Return the max relative error between analytic and numeric gradients.

    Covers every parameter tensor and, with ``check_input``, the gradient
    with respect to ``x`` returned by the backward pass. Runs in infer mode.
    When a relu input or a max-pool top-2 gap of the evaluation point lies
    within ``kink_tolerance`` of a kink, the input is redrawn from ``rng``
    with the same spread. ``max_params`` caps the number of coordinates
    checked per tensor (sampled without replacement).
    """
    loss_fn = get_loss(loss) if isinstance(loss, str) else loss
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.array(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    scale = float(np.std(x)) or 1.0

    out = model.forward(x, training=False)
    tries = 0
    while model.kink_margin() < kink_tolerance and tries < max_resamples:
        tries += 1
        x = rng.standard_normal(x.shape) * scale
        out = model.forward(x, training=False)
    if model.kink_margin() < kink_tolerance:
        log.warning("evaluation point still within %.0e of a kink after %d resamples",
                    kink_tolerance, max_resamples)
    elif tries:
        log.debug("resampled input %d time(s) to clear activation kinks", tries)

    model.zero_grad()
    _, dout = loss_fn(out, target)
    dx = np.array(model.backward(dout), dtype=np.float64)

    def objective() -> float:
        return loss_fn(model.forward(x, training=False), target)[0]

    worst = 0.0
    for p in model.params():
        analytic = p.grad.copy()
        param_worst = _worst_error(p.value, analytic, _coords(p.value.size, max_params, rng), objective, eps)
        log.debug("grad check %-28s max rel err %.3e", p.name, param_worst)
        worst = max(worst, param_worst)

    if check_input:
        input_worst = _worst_error(x, dx, _coords(x.size, max_params, rng), objective, eps)
        log.debug("grad check %-28s max rel err %.3e", "input", input_worst)
        worst = max(worst, input_worst)

    model.zero_grad()
    return worst
