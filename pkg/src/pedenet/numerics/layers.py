"""Differentiable layers used by the patch encoder and its two training heads."""
from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pedenet.errors import InvalidArgumentError
from pedenet.numerics._kernels import col2im_nhwc, leaky_backward, leaky_forward
from pedenet.numerics.tensor import Tensor, add, make_result, matmul, transpose


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
    xp[:, padding : padding + h, padding : padding + w] = x
    return xp


def conv2d_nhwc(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last convolution core; ``kernel`` keeps the (F, C, k, k) layout."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise InvalidArgumentError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, h, w, c = x.shape
    f, ck, k, k2 = kernel.shape
    if ck != c:
        raise InvalidArgumentError(f"input has {c} channels but kernel expects {ck}")
    if k != k2:
        raise InvalidArgumentError("only square kernels are supported")
    if stride < 1 or padding < 0:
        raise InvalidArgumentError(f"bad stride/padding ({stride}, {padding})")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise InvalidArgumentError(f"kernel {k} does not fit input {h}x{w} with padding {padding}")

    xp = _pad_hw(x.data, padding)
    if k == 1 and stride == 1:
        cols = xp.reshape(n * ho * wo, c)
    else:
        # column order (ki, kj, C) so each window row is read contiguously in C
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * c)
    wmat = kernel.data.transpose(2, 3, 1, 0).reshape(k * k * c, f)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, f)

    def backward(g):
        g2 = g.reshape(-1, f)
        gk = gb = gx = None
        if kernel.requires_grad:
            gk = (cols.T @ g2).reshape(k, k, c, f).transpose(3, 2, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = g2 @ wmat.T
            if k == 1 and stride == 1:
                gxp = dcols.reshape(xp.shape)
            else:
                gxp = col2im_nhwc(dcols.reshape(n, ho, wo, k, k, c), xp.shape[1], xp.shape[2], stride)
            gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and (F, C, k, k) kernel."""
    if x.ndim != 4:
        raise InvalidArgumentError(f"conv2d expects a 4-d NCHW input, got {x.shape}")
    y = conv2d_nhwc(transpose(x, (0, 2, 3, 1)), kernel, bias, stride, padding)
    return transpose(y, (0, 3, 1, 2))


_sign_log: list[np.ndarray] | None = None


@contextlib.contextmanager
def record_activation_signs():
    """Collect the sign pattern of every leaky_relu input evaluated inside the block.

    Two evaluations whose patterns differ lie on different linear pieces,
    which is what finite-difference checks use to detect kink crossings.
    """
    global _sign_log
    previous, _sign_log = _sign_log, []
    try:
        yield _sign_log
    finally:
        _sign_log = previous


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise InvalidArgumentError(f"slope must lie in (0, 1), got {slope}")
    xd = np.ascontiguousarray(x.data)
    if _sign_log is not None:
        _sign_log.append(xd > 0)
    s = xd.dtype.type(slope)
    out = leaky_forward(xd, s)

    def backward(g):
        return (leaky_backward(xd, np.ascontiguousarray(g, dtype=xd.dtype), s),)

    return make_result(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(x.data).any():
        raise InvalidArgumentError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(x.data).any():
        raise InvalidArgumentError("log_softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias with weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def kaiming_std(fan_in: int, slope: float = 0.1) -> float:
    return math.sqrt(2.0 / ((1.0 + slope * slope) * fan_in))


class Conv:
    """3x3 (or 1x1) convolution with bias; ``channels_last`` selects NHWC activations."""

    def __init__(self, name: str, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding: int = 1, channels_last: bool = False):
        self.name, self.c_in, self.c_out = name, c_in, c_out
        self.channels_last = channels_last
        self.k, self.stride, self.padding = k, stride, padding

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {f"{self.name}.weight": (self.c_out, self.c_in, self.k, self.k), f"{self.name}.bias": (self.c_out,)}

    def init(self, rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
        std = kaiming_std(self.c_in * self.k * self.k)
        w = rng.normal(0.0, std, size=(self.c_out, self.c_in, self.k, self.k))
        return {f"{self.name}.weight": w.astype(dtype), f"{self.name}.bias": np.zeros(self.c_out, dtype=dtype)}

    def __call__(self, params: dict[str, Tensor], x: Tensor) -> Tensor:
        op = conv2d_nhwc if self.channels_last else conv2d
        return op(x, params[f"{self.name}.weight"], params[f"{self.name}.bias"], self.stride, self.padding)


class Dense:
    def __init__(self, name: str, n_in: int, n_out: int):
        self.name, self.n_in, self.n_out = name, n_in, n_out

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {f"{self.name}.weight": (self.n_in, self.n_out), f"{self.name}.bias": (self.n_out,)}

    def init(self, rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
        w = rng.normal(0.0, kaiming_std(self.n_in), size=(self.n_in, self.n_out))
        return {f"{self.name}.weight": w.astype(dtype), f"{self.name}.bias": np.zeros(self.n_out, dtype=dtype)}

    def __call__(self, params: dict[str, Tensor], x: Tensor) -> Tensor:
        return linear(x, params[f"{self.name}.weight"], params[f"{self.name}.bias"])


class MLP:
    """Stack of Dense layers with LeakyReLU between them (none after the last)."""

    def __init__(self, prefix: str, sizes: list[int], slope: float = 0.1):
        self.layers = [Dense(f"{prefix}.fc{i}", a, b) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.slope = slope

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        return shapes

    def init(self, rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self.layers:
            out.update(layer.init(rng, dtype))
        return out

    def __call__(self, params: dict[str, Tensor], x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(params, x)
            if i < len(self.layers) - 1:
                x = leaky_relu(x, self.slope)
        return x
