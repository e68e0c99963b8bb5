"""Layers built on the tape: convolution, linear, batch norm, pooling, dropout.

Functional forms take explicit parameters; the ``Module`` classes own them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    ShapeError,
    Tensor,
    _result,
    add,
    matmul,
    record_kink,
    relu,
    sigmoid,
    softmax,
)

__all__ = [
    "ConvSpec", "conv2d", "linear", "batchnorm2d", "max_pool2d", "avg_pool2d",
    "global_avg_pool", "dropout", "init_parameters", "Module", "Parameter",
    "Conv2d", "Linear", "BatchNorm2d", "Dropout", "relu", "sigmoid", "softmax",
]


def _pair(v) -> tuple:
    return (v, v) if isinstance(v, int) else tuple(v)


def _out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    groups: int = 1

    def __post_init__(self):
        for name in ("kernel", "stride", "padding"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"conv2d: channels {self.in_channels}->{self.out_channels} not divisible "
                f"by groups={self.groups}")

    def output_hw(self, h: int, w: int) -> tuple:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        oh, ow = _out_size(h, kh, sh, ph), _out_size(w, kw, sw, pw)
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv2d: zero-size output for input {h}x{w} with {self}")
        return oh, ow

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups) + self.kernel


def _windows(xp: np.ndarray, kh, kw, sh, sw, oh, ow) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : sh * (oh - 1) + 1 : sh, : sw * (ow - 1) + 1 : sw]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Grouped 2-D cross-correlation on NCHW input via im2col."""
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d: input {x.shape} does not match in_channels={spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv2d: weight {weight.shape} expected {spec.weight_shape}")
    n, c, h, w = x.shape
    (kh, kw), (sh, sw), (ph, pw), g = spec.kernel, spec.stride, spec.padding, spec.groups
    oh, ow = spec.output_hw(h, w)
    cg, og = c // g, spec.out_channels // g
    k = cg * kh * kw
    m = n * oh * ow
    xd, wd = x.data, weight.data

    pointwise = kh == kw == 1 and ph == pw == 0
    if pointwise:
        xs = xd[:, :, ::sh, ::sw] if (sh, sw) != (1, 1) else xd
        cols = xs.reshape(n, g, cg, oh * ow).transpose(1, 0, 3, 2).reshape(g, m, k)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
        win = _windows(xp, kh, kw, sh, sw, oh, ow)  # n, c, oh, ow, kh, kw
        cols = (win.reshape(n, g, cg, oh, ow, kh, kw)
                .transpose(1, 0, 3, 4, 2, 5, 6).reshape(g, m, k))
    wmat = wd.reshape(g, og, k)
    out = np.matmul(cols, wmat.transpose(0, 2, 1))  # g, m, og
    out = out.reshape(g, n, oh, ow, og).transpose(1, 0, 4, 2, 3).reshape(n, g * og, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(gout):
        gm = gout.reshape(n, g, og, oh, ow).transpose(1, 0, 3, 4, 2).reshape(g, m, og)
        gw = np.matmul(gm.transpose(0, 2, 1), cols).reshape(wd.shape)
        gb = gout.sum(axis=(0, 2, 3)) if bias is not None else None
        gcols = np.matmul(gm, wmat)  # g, m, k
        if pointwise:
            gx_s = gcols.reshape(g, n, oh * ow, cg).transpose(1, 0, 3, 2).reshape(n, c, oh, ow)
            if (sh, sw) != (1, 1):
                gx = np.zeros_like(xd)
                gx[:, :, ::sh, ::sw] = gx_s
            else:
                gx = gx_s
        else:
            gc = gcols.reshape(g, n, oh, ow, cg, kh, kw).transpose(1, 0, 4, 5, 6, 2, 3)
            gc = gc.reshape(n, c, kh, kw, oh, ow)
            gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw] += gc[:, :, i, j]
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, "conv2d", inputs, bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = xW + b with W stored as [in, out]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


def batchnorm2d(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of NCHW input.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, PyTorch convention).
    """
    if x.ndim != 4 or x.shape[1] != scale.shape[0]:
        raise ShapeError(f"batchnorm2d: input {x.shape} does not match {scale.shape[0]} channels")
    xd = x.data
    gamma = scale.data.reshape(1, -1, 1, 1)
    beta = shift.data.reshape(1, -1, 1, 1)
    if training:
        n, _, h, w = xd.shape
        if n < 2:
            raise ShapeError("batchnorm2d: batch of 1 in train mode")
        count = n * h * w
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1) * count / max(count - 1, 1)
        out = (xhat * gamma + beta).astype(xd.dtype)

        def bw(g):
            gscale = (g * xhat).sum(axis=(0, 2, 3))
            gshift = g.sum(axis=(0, 2, 3))
            gx_hat = g * gamma
            gx = inv * (gx_hat - gx_hat.mean(axis=(0, 2, 3), keepdims=True)
                        - xhat * (gx_hat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            return gx, gscale, gshift
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype).reshape(1, -1, 1, 1)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(1, -1, 1, 1)) * inv
        out = xhat * gamma + beta

        def bw(g):
            return (g * gamma * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return _result(out, "batchnorm2d", (x, scale, shift), bw)


def _pool_windows(x: Tensor, kernel, stride, op: str):
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    n, c, h, w = x.shape
    oh, ow = _out_size(h, kh, sh, 0), _out_size(w, kw, sw, 0)
    if oh < 1 or ow < 1:
        raise ShapeError(f"{op}: zero-size output for input {x.shape} and kernel {(kh, kw)}")
    return _windows(x.data, kh, kw, sh, sw, oh, ow), (kh, kw, sh, sw, oh, ow)


def max_pool2d(x: Tensor, kernel, stride=None) -> Tensor:
    win, (kh, kw, sh, sw, oh, ow) = _pool_windows(x, kernel, stride, "max_pool2d")
    n, c = x.shape[:2]
    flat = win.reshape(n, c, oh, ow, kh * kw)
    idx = flat.argmax(axis=-1)
    record_kink(idx.astype(np.int64))
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        ii, jj = np.divmod(idx, kw)
        for i in range(kh):
            for j in range(kw):
                sel = (ii == i) & (jj == j)
                gx[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw] += g * sel
        return (gx,)

    return _result(out, "max_pool2d", (x,), bw)


def avg_pool2d(x: Tensor, kernel, stride=None) -> Tensor:
    win, (kh, kw, sh, sw, oh, ow) = _pool_windows(x, kernel, stride, "avg_pool2d")
    out = win.mean(axis=(-2, -1))
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        share = g / (kh * kw)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw] += share
        return (gx,)

    return _result(out.astype(x.dtype), "avg_pool2d", (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC, mean over each channel plane."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), shape).copy(),)

    return _result(x.data.mean(axis=(2, 3)).astype(x.dtype), "global_avg_pool", (x,), bw)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


def init_parameters(kind: str, shape: tuple, rng: np.random.Generator,
                    dtype=np.float32) -> np.ndarray:
    """He-uniform for conv/linear weights, zeros for biases, (1, 0) for batchnorm."""
    if kind == "conv":
        fan_in = int(np.prod(shape[1:]))
    elif kind == "linear":
        fan_in = shape[0]
    elif kind in ("bias", "bn_shift"):
        return np.zeros(shape, dtype=dtype)
    elif kind == "bn_scale":
        return np.ones(shape, dtype=dtype)
    else:
        raise ValueError(f"unknown parameter kind {kind!r}")
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# --------------------------------------------------------------------------
class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True, dtype=np.asarray(data).dtype)


class Module:
    """Container with named parameters, buffers and a train/eval flag.

    Parameters are discovered from attributes in definition order, recursing
    into sub-modules and lists of sub-modules. Buffers are numpy arrays named
    in ``_buffers``.
    """

    _buffers: tuple = ()

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        if missing:
            raise KeyError(f"state is missing entries: {missing[:5]}")
        for name, p in self.named_parameters():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        for name, buf in self.named_buffers():
            arr = np.asarray(state[name])
            if arr.shape != buf.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != model shape {buf.shape}")
            buf[...] = arr

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for name in self._buffers:
            setattr(self, name, getattr(self, name).astype(dtype))
        for _, child in self.children():
            child.to(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.spec = spec
        self.weight = Parameter(init_parameters("conv", spec.weight_shape, rng))
        self.bias = Parameter(init_parameters("bias", (spec.out_channels,), rng)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(init_parameters("linear", (in_features, out_features), rng))
        self.bias = Parameter(init_parameters("bias", (out_features,), rng)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        if eps <= 0:
            raise ValueError("batchnorm eps must be positive")
        self.scale = Parameter(init_parameters("bn_scale", (channels,), None))
        self.shift = Parameter(init_parameters("bn_shift", (channels,), None))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.scale, self.shift, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps)


class Dropout(Module):
    def __init__(self, p: float = 0.0, seed: int = 0):
        super().__init__()
        self.p = p
        self.rng = np.random.default_rng(seed)

    def forward(self, x: Tensor) -> Tensor:
        return dropout(x, self.p, self.training, self.rng)
