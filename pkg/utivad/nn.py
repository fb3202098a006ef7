"""Minimal deterministic neural-network engine.

Tensors are float64 ``numpy`` arrays. Layers are batch-first and
channels-last: images ``(N, H, W, C)``, clips ``(N, T, H, W, C)``,
sequences ``(N, T, F)``. The functional kernels also accept a single
unbatched sample and return an unbatched result.

Every reduction inside a kernel runs in a fixed order, so a given seed
always produces bitwise-identical activations and gradients.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import DimensionError, NonFiniteError, ValidationError

log = logging.getLogger("utivad.nn")

PADDINGS = ("same", "valid")
ACTIVATIONS = ("relu", "sigmoid", "linear", "tanh")


@dataclass
class Param:
    """A trainable tensor and its accumulated gradient."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(self.name, f"gradient {self.grad.shape} != parameter {self.value.shape}")

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(where)


def glorot_uniform(shape: tuple, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ============================================================
# Convolution kernels
# ============================================================

def _axis_padding(size: int, k: int, s: int, mode: str, axis: str) -> tuple[tuple[int, int], int]:
    """Return ((pad_before, pad_after), output_size) for one spatial axis."""
    if k < 1:
        raise ValidationError(f"kernel size on axis '{axis}' must be >= 1, got {k}")
    if s < 1:
        raise ValidationError(f"stride on axis '{axis}' must be >= 1, got {s}")
    if mode == "valid":
        if k > size:
            raise DimensionError(axis, f"kernel {k} exceeds input {size} with valid padding")
        return (0, 0), (size - k) // s + 1
    if mode == "same":
        out = -(-size // s)
        total = max((out - 1) * s + k - size, 0)
        # odd totals put the extra row/column at the bottom/right
        return (total // 2, total - total // 2), out
    raise ValidationError(f"unknown padding {mode!r}; expected one of {PADDINGS}")


def _windows(xp: np.ndarray, ksize: tuple, strides: tuple, outs: tuple) -> np.ndarray:
    """Strided receptive-field view: (N, *out, C, *ksize)."""
    nsp = len(ksize)
    win = sliding_window_view(xp, ksize, axis=tuple(range(1, nsp + 1)))
    idx = (slice(None),) + tuple(slice(0, (o - 1) * s + 1, s) for o, s in zip(outs, strides))
    return win[idx]


@dataclass
class _ConvGeometry:
    strides: tuple
    pads: list
    outs: tuple
    input_shape: tuple


def _conv_forward(x, kernels, bias, strides, paddings, axes):
    nsp = len(strides)
    if x.ndim != nsp + 2:
        raise DimensionError("rank", f"expected {nsp + 2}-D batched input, got shape {x.shape}")
    if kernels.ndim != nsp + 2:
        raise DimensionError("kernel", f"expected {nsp + 2}-D kernel, got shape {kernels.shape}")
    ksize = kernels.shape[:nsp]
    cin, cout = kernels.shape[nsp], kernels.shape[nsp + 1]
    if x.shape[-1] != cin:
        raise DimensionError("channels", f"input has {x.shape[-1]} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise DimensionError("bias", f"bias shape {bias.shape} != ({cout},)")

    pads, outs = [], []
    for i in range(nsp):
        p, o = _axis_padding(x.shape[1 + i], ksize[i], strides[i], paddings[i], axes[i])
        pads.append(p)
        outs.append(o)
    outs = tuple(outs)
    if any(p != (0, 0) for p in pads):
        xp = np.pad(x, [(0, 0), *pads, (0, 0)])
    else:
        xp = x

    cols = _windows(xp, ksize, strides, outs)
    a_axes = [nsp + 1] + list(range(nsp + 2, 2 * nsp + 2))
    b_axes = [nsp] + list(range(nsp))
    y = np.tensordot(cols, kernels, axes=(a_axes, b_axes)) + bias
    return y, xp, _ConvGeometry(tuple(strides), pads, outs, x.shape)


def _conv_backward(grad, xp, kernels, geom: _ConvGeometry):
    nsp = len(geom.strides)
    ksize = kernels.shape[:nsp]
    cols = _windows(xp, ksize, geom.strides, geom.outs)

    lead = list(range(nsp + 1))
    dk = np.moveaxis(np.tensordot(cols, grad, axes=(lead, lead)), 0, nsp)
    db = grad.sum(axis=tuple(lead))

    dcols = np.tensordot(grad, kernels, axes=([nsp + 1], [nsp + 1]))  # (N, *out, *ksize, Cin)
    dxp = np.zeros(xp.shape)
    for offset in np.ndindex(*ksize):
        idx = (slice(None),) + tuple(
            slice(off, off + (o - 1) * s + 1, s) for off, o, s in zip(offset, geom.outs, geom.strides)
        )
        dxp[idx] += dcols[(slice(None),) * (nsp + 1) + offset]

    crop = (slice(None),) + tuple(
        slice(lo, lo + size) for (lo, _), size in zip(geom.pads, geom.input_shape[1:1 + nsp])
    )
    return dxp[crop], dk, db


def _promote(x: np.ndarray, batched_rank: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == batched_rank - 1:
        return x[None], True
    return x, False


def conv2d(x, kernels, bias, stride=(1, 1), padding: str = "valid") -> np.ndarray:
    """2-D convolution (cross-correlation) of ``(H, W, Cin)`` or ``(N, H, W, Cin)``."""
    xb, single = _promote(x, 4)
    y, _, _ = _conv_forward(
        xb, np.asarray(kernels, dtype=np.float64), np.asarray(bias, dtype=np.float64),
        tuple(stride), (padding, padding), ("height", "width"),
    )
    return y[0] if single else y


def conv3d(x, kernels, bias, stride=(1, 1, 1), padding_time: str = "valid",
           padding_space: str = "same") -> np.ndarray:
    """3-D convolution over ``(T, H, W, Cin)``; the time axis is never padded."""
    if padding_time != "valid":
        raise ValidationError("time padding is always 'valid'")
    xb, single = _promote(x, 5)
    y, _, _ = _conv_forward(
        xb, np.asarray(kernels, dtype=np.float64), np.asarray(bias, dtype=np.float64),
        tuple(stride), ("valid", padding_space, padding_space), ("time", "height", "width"),
    )
    return y[0] if single else y


# ============================================================
# Max pooling
# ============================================================

def _pool_forward(x, window, axes):
    nsp = len(window)
    if x.ndim != nsp + 2:
        raise DimensionError("rank", f"expected {nsp + 2}-D batched input, got shape {x.shape}")
    outs = []
    for i, k in enumerate(window):
        if k < 1:
            raise ValidationError(f"pool window on axis '{axes[i]}' must be >= 1")
        size = x.shape[1 + i]
        if k > size:
            raise DimensionError(axes[i], f"pool window {k} exceeds input {size}")
        outs.append(size // k)

    crop = x[(slice(None),) + tuple(slice(0, o * k) for o, k in zip(outs, window))]
    interleaved = (x.shape[0],) + tuple(v for pair in zip(outs, window) for v in pair) + (x.shape[-1],)
    perm = [0] + [1 + 2 * i for i in range(nsp)] + [2 * nsp + 1] + [2 + 2 * i for i in range(nsp)]
    r = crop.reshape(interleaved).transpose(perm)  # (N, *out, C, *window)
    flat = r.reshape(r.shape[:nsp + 2] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg, flat, tuple(outs), perm


def _pool_backward(grad, arg, x_shape, window, outs, perm):
    nsp = len(window)
    flat = np.zeros(grad.shape + (int(np.prod(window)),))
    np.put_along_axis(flat, arg[..., None], grad[..., None], axis=-1)
    r = flat.reshape(grad.shape + tuple(window)).transpose(np.argsort(perm))
    dx = np.zeros(x_shape)
    crop = (slice(None),) + tuple(slice(0, o * k) for o, k in zip(outs, window))
    dx[crop] = r.reshape(dx[crop].shape)
    return dx


def maxpool(x, window) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pooling (stride = window, remainder dropped).

    Accepts ``(*spatial, C)`` or ``(N, *spatial, C)`` where the number of
    spatial axes equals ``len(window)``. Returns the pooled tensor and the
    flat argmax index of each window, used to route gradients.
    """
    window = tuple(window)
    xb, single = _promote(x, len(window) + 2)
    axes = ("time", "height", "width")[-len(window):] if len(window) <= 3 else tuple(
        f"axis{i}" for i in range(len(window)))
    out, arg, _, _, _ = _pool_forward(xb, window, axes)
    if single:
        return out[0], arg[0]
    return out, arg


# ============================================================
# Dense, activations, dropout
# ============================================================

def dense(x, weights, bias) -> np.ndarray:
    """Affine map ``x @ W + b`` for ``(n,)`` or ``(N, n)`` inputs."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise DimensionError("features", f"input length {x.shape[-1]} != weight rows {weights.shape[0]}")
    if np.shape(bias) != (weights.shape[1],):
        raise DimensionError("bias", f"bias shape {np.shape(bias)} != ({weights.shape[1]},)")
    return x @ weights + bias


def activate(x, kind: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return expit(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "linear":
        return x.copy()
    raise ValidationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_grad(x: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise derivative given the input ``x`` and output ``y``."""
    if kind == "relu":
        return (x > 0).astype(np.float64)
    if kind == "sigmoid":
        return y * (1.0 - y)
    if kind == "tanh":
        return 1.0 - y * y
    return np.ones_like(x)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns ``(output, keep_mask_or_None)``."""
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if not training or rate == 0.0:
        return x.copy(), None
    if rng is None:
        raise ValidationError("train-mode dropout needs a random generator")
    mask = rng.random(x.shape) >= rate
    return x * mask / (1.0 - rate), mask


# ============================================================
# LSTM
# ============================================================

def _lstm_direction(x, kernel, recurrent, bias, reverse: bool):
    """Run one LSTM direction over (N, T, F). Gate order: i, f, g, o."""
    n, steps, _ = x.shape
    units = recurrent.shape[0]
    h = np.zeros((n, units))
    c = np.zeros((n, units))
    cache = []
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        z = x[:, t] @ kernel + h @ recurrent + bias
        i = expit(z[:, :units])
        f = expit(z[:, units:2 * units])
        g = np.tanh(z[:, 2 * units:3 * units])
        o = expit(z[:, 3 * units:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        cache.append((t, h_prev, c_prev, i, f, g, o, tanh_c))
    return h, cache


def _lstm_direction_backward(dh, x, kernel, recurrent, cache):
    units = recurrent.shape[0]
    dkernel = np.zeros_like(kernel)
    drecurrent = np.zeros_like(recurrent)
    dbias = np.zeros(4 * units)
    dx = np.zeros_like(x)
    dc = np.zeros_like(dh)
    for t, h_prev, c_prev, i, f, g, o, tanh_c in reversed(cache):
        do = dh * tanh_c
        dc = dc + dh * o * (1.0 - tanh_c * tanh_c)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dz = np.concatenate(
            [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)], axis=1
        )
        dkernel += x[:, t].T @ dz
        drecurrent += h_prev.T @ dz
        dbias += dz.sum(axis=0)
        dx[:, t] += dz @ kernel.T
        dh = dz @ recurrent.T
        dc = dc * f
    return dx, dkernel, drecurrent, dbias


def bilstm(x, forward_weights, backward_weights) -> np.ndarray:
    """Bidirectional LSTM returning the concatenated final hidden states.

    ``x`` is ``(T, F)`` or ``(N, T, F)``; each weights argument is a
    ``(kernel[F, 4U], recurrent[U, 4U], bias[4U])`` triple.
    """
    xb, single = _promote(x, 3)
    if xb.shape[1] < 1:
        raise ValidationError("bilstm needs a sequence with at least one step")
    h_fw, _ = _lstm_direction(xb, *forward_weights, reverse=False)
    h_bw, _ = _lstm_direction(xb, *backward_weights, reverse=True)
    out = np.concatenate([h_fw, h_bw], axis=1)
    return out[0] if single else out


# ============================================================
# Layers
# ============================================================

class Layer:
    """Base layer. Shapes exclude the batch axis."""

    kind = "layer"

    def __init__(self, name: str | None = None):
        self.name = name
        self.input_shape: tuple | None = None
        self.output_shape: tuple | None = None

    def build(self, input_shape: tuple, rng: np.random.Generator) -> tuple:
        self.input_shape = tuple(input_shape)
        self.output_shape = self.compute_output_shape(self.input_shape)
        return self.output_shape

    def compute_output_shape(self, input_shape: tuple) -> tuple:
        return input_shape

    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def kink_margin(self) -> float:
        """Distance of the last forward pass from a non-differentiable point."""
        return math.inf

    def _param(self, suffix: str, value: np.ndarray) -> Param:
        return Param(f"{self.name}/{suffix}", value)


class _ConvND(Layer):
    axes: tuple = ()

    def __init__(self, filters: int, kernel_size: tuple, strides: tuple, paddings: tuple, name=None):
        super().__init__(name)
        self.filters = int(filters)
        self.kernel_size = tuple(kernel_size)
        self.strides = tuple(strides)
        self.paddings = tuple(paddings)
        self.kernel: Param | None = None
        self.bias: Param | None = None
        self._cache = None

    def compute_output_shape(self, input_shape):
        nsp = len(self.kernel_size)
        if len(input_shape) != nsp + 1:
            raise DimensionError("rank", f"{self.name} expects {nsp + 1}-D samples, got {input_shape}")
        outs = [
            _axis_padding(input_shape[i], self.kernel_size[i], self.strides[i], self.paddings[i], self.axes[i])[1]
            for i in range(nsp)
        ]
        return tuple(outs) + (self.filters,)

    def build(self, input_shape, rng):
        out = super().build(input_shape, rng)
        cin = input_shape[-1]
        receptive = int(np.prod(self.kernel_size))
        shape = self.kernel_size + (cin, self.filters)
        self.kernel = self._param(
            "kernel", glorot_uniform(shape, receptive * cin, receptive * self.filters, rng))
        self.bias = self._param("bias", np.zeros(self.filters))
        return out

    def params(self):
        return [self.kernel, self.bias]

    def forward(self, x, training=False):
        y, xp, geom = _conv_forward(
            x, self.kernel.value, self.bias.value, self.strides, self.paddings, self.axes)
        self._cache = (xp, geom)
        return y

    def backward(self, grad):
        xp, geom = self._cache
        dx, dk, db = _conv_backward(grad, xp, self.kernel.value, geom)
        self.kernel.grad += dk
        self.bias.grad += db
        return dx


class Conv2D(_ConvND):
    kind = "conv2d"
    axes = ("height", "width")

    def __init__(self, filters, kernel_size=(3, 3), strides=(1, 1), padding="same", name=None):
        super().__init__(filters, kernel_size, strides, (padding, padding), name)


class Conv3D(_ConvND):
    kind = "conv3d"
    axes = ("time", "height", "width")

    def __init__(self, filters, kernel_size, strides=(1, 1, 1), padding_space="same", name=None):
        super().__init__(filters, kernel_size, strides, ("valid", padding_space, padding_space), name)


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, window: tuple, name=None):
        super().__init__(name)
        self.window = tuple(window)
        self._cache = None

    @property
    def _axes(self):
        return ("time", "height", "width")[-len(self.window):]

    def compute_output_shape(self, input_shape):
        if len(input_shape) != len(self.window) + 1:
            raise DimensionError("rank", f"{self.name} expects {len(self.window) + 1}-D samples")
        out = []
        for axis, size, k in zip(self._axes, input_shape, self.window):
            if k > size:
                raise DimensionError(axis, f"pool window {k} exceeds input {size}")
            out.append(size // k)
        return tuple(out) + (input_shape[-1],)

    def forward(self, x, training=False):
        out, arg, flat, outs, perm = _pool_forward(x, self.window, self._axes)
        self._cache = (arg, flat, outs, perm, x.shape)
        return out

    def backward(self, grad):
        arg, _, outs, perm, x_shape = self._cache
        return _pool_backward(grad, arg, x_shape, self.window, outs, perm)

    def kink_margin(self):
        flat = self._cache[1]
        if flat.shape[-1] < 2 or flat.size == 0:
            return math.inf
        top = np.sort(flat, axis=-1)
        return float(np.min(top[..., -1] - top[..., -2]))


class Dense(Layer):
    kind = "dense"

    def __init__(self, units: int, name=None):
        super().__init__(name)
        self.units = int(units)
        self.kernel: Param | None = None
        self.bias: Param | None = None
        self._x = None

    def compute_output_shape(self, input_shape):
        if len(input_shape) != 1:
            raise DimensionError("rank", f"{self.name} expects flat samples, got {input_shape}")
        return (self.units,)

    def build(self, input_shape, rng):
        out = super().build(input_shape, rng)
        n = input_shape[0]
        self.kernel = self._param("kernel", glorot_uniform((n, self.units), n, self.units, rng))
        self.bias = self._param("bias", np.zeros(self.units))
        return out

    def params(self):
        return [self.kernel, self.bias]

    def forward(self, x, training=False):
        self._x = x
        return dense(x, self.kernel.value, self.bias.value)

    def backward(self, grad):
        self.kernel.grad += self._x.T @ grad
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.kernel.value.T


class Activation(Layer):
    kind = "activation"

    def __init__(self, activation: str, name=None):
        super().__init__(name)
        if activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {activation!r}")
        self.activation = activation
        self._cache = None

    def forward(self, x, training=False):
        y = activate(x, self.activation)
        self._cache = (x, y)
        return y

    def backward(self, grad):
        x, y = self._cache
        return grad * activation_grad(x, y, self.activation)

    def kink_margin(self):
        if self.activation != "relu" or self._cache is None:
            return math.inf
        x = self._cache[0]
        return float(np.min(np.abs(x))) if x.size else math.inf


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float = 0.2, name=None):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self.rng: np.random.Generator | None = None
        self._mask = None

    def forward(self, x, training=False):
        y, self._mask = dropout(x, self.rate, training, self.rng)
        return y

    def backward(self, grad):
        if self._mask is None:
            return grad
        return grad * self._mask / (1.0 - self.rate)


class Flatten(Layer):
    kind = "flatten"

    def compute_output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False):
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape((grad.shape[0],) + self.input_shape)


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, target: tuple, name=None):
        super().__init__(name)
        self.target = tuple(target)

    def compute_output_shape(self, input_shape):
        if int(np.prod(input_shape)) != int(np.prod(self.target)):
            raise DimensionError(
                "reshape", f"cannot reshape {input_shape} ({int(np.prod(input_shape))} values) to {self.target}")
        return self.target

    def forward(self, x, training=False):
        return x.reshape((x.shape[0],) + self.target)

    def backward(self, grad):
        return grad.reshape((grad.shape[0],) + self.input_shape)


class BiLSTM(Layer):
    """Bidirectional LSTM with ``return_sequences=False`` (concat merge)."""

    kind = "bilstm"

    def __init__(self, units: int, name=None):
        super().__init__(name)
        self.units = int(units)
        self.weights: dict[str, Param] = {}
        self._cache = None

    def compute_output_shape(self, input_shape):
        if len(input_shape) != 2:
            raise DimensionError("rank", f"{self.name} expects (steps, features) samples, got {input_shape}")
        if input_shape[0] < 1:
            raise ValidationError("bilstm needs a sequence with at least one step")
        return (2 * self.units,)

    def build(self, input_shape, rng):
        out = super().build(input_shape, rng)
        features = input_shape[1]
        u = self.units
        for direction in ("forward", "backward"):
            bias = np.zeros(4 * u)
            bias[u:2 * u] = 1.0
            self.weights[f"{direction}_kernel"] = self._param(
                f"{direction}_kernel", glorot_uniform((features, 4 * u), features, 4 * u, rng))
            self.weights[f"{direction}_recurrent"] = self._param(
                f"{direction}_recurrent", glorot_uniform((u, 4 * u), u, 4 * u, rng))
            self.weights[f"{direction}_bias"] = self._param(f"{direction}_bias", bias)
        return out

    def params(self):
        return list(self.weights.values())

    def _triple(self, direction: str) -> tuple:
        w = self.weights
        return (w[f"{direction}_kernel"].value, w[f"{direction}_recurrent"].value, w[f"{direction}_bias"].value)

    def forward(self, x, training=False):
        h_fw, cache_fw = _lstm_direction(x, *self._triple("forward"), reverse=False)
        h_bw, cache_bw = _lstm_direction(x, *self._triple("backward"), reverse=True)
        self._cache = (x, cache_fw, cache_bw)
        return np.concatenate([h_fw, h_bw], axis=1)

    def backward(self, grad):
        x, cache_fw, cache_bw = self._cache
        u = self.units
        dx = np.zeros_like(x)
        for direction, dh, cache in (("forward", grad[:, :u], cache_fw), ("backward", grad[:, u:], cache_bw)):
            kernel, recurrent, _ = self._triple(direction)
            ddx, dk, dr, db = _lstm_direction_backward(dh, x, kernel, recurrent, cache)
            dx += ddx
            self.weights[f"{direction}_kernel"].grad += dk
            self.weights[f"{direction}_recurrent"].grad += dr
            self.weights[f"{direction}_bias"].grad += db
        return dx


# ============================================================
# Sequential container
# ============================================================

class Sequential:
    """Ordered stack of layers built for a fixed per-sample input shape."""

    def __init__(self, layers: list[Layer], input_shape: tuple, seed: int = 0):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        rng = np.random.default_rng(seed)
        counts: dict[str, int] = {}
        shape = self.input_shape
        for layer in self.layers:
            if layer.name is None:
                counts[layer.kind] = counts.get(layer.kind, 0) + 1
                layer.name = f"{layer.kind}_{counts[layer.kind]}"
            shape = layer.build(shape, rng)
        self.output_shape = shape

        names = [p.name for p in self.params()]
        if len(names) != len(set(names)):
            raise ValidationError("parameter names must be unique within a model")
        self.reseed_dropout(seed)

    def reseed_dropout(self, seed: int) -> None:
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dropout):
                layer.rng = np.random.default_rng([seed, 2, i])

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise DimensionError("input", f"expected samples of shape {self.input_shape}, got {x.shape[1:]}")
        check_finite(x, "model input")
        for layer in self.layers:
            x = layer.forward(x, training)
            check_finite(x, layer.name)
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def n_params(self) -> int:
        return int(sum(p.value.size for p in self.params()))

    def kink_margin(self) -> float:
        return min((layer.kink_margin() for layer in self.layers), default=math.inf)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.params()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params():
            if p.name not in state:
                raise ValidationError(f"missing parameter {p.name!r}")
            value = np.asarray(state[p.name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise DimensionError(p.name, f"stored shape {value.shape} != model shape {p.value.shape}")
            p.value[...] = value

    def summary(self) -> list[tuple[str, str, tuple, int]]:
        return [
            (layer.name, layer.kind, layer.output_shape, int(sum(p.value.size for p in layer.params())))
            for layer in self.layers
        ]
