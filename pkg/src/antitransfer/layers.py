"""Dense-tensor layer kernels with explicit forward and backward passes.

Every layer caches whatever its backward pass needs (inputs, masks, argmax
positions) during forward. Backward passes *set* parameter gradients rather
than accumulating, and are skipped entirely for frozen layers.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional, Union

import numpy as np


class ShapeError(ValueError):
    """Tensor shape does not match what the operation requires."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


def check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where}")


# ---------------------------------------------------------------------------
# Layer specifications
# ---------------------------------------------------------------------------

LAYER_KINDS = ("conv2d", "maxpool2d", "dense", "relu", "dropout", "flatten", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer; carries only kind-specific params."""

    kind: str
    channels: Optional[int] = None
    kernel: Optional[int] = None
    stride: Optional[int] = None
    padding: Union[str, int, None] = None  # 'same' or explicit per-side pad
    ceil_mode: bool = False
    units: Optional[int] = None
    p: Optional[float] = None

    def validate(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if not self.channels or self.channels < 1:
                raise ValueError("conv2d needs channels >= 1")
            if not self.kernel or self.kernel < 1:
                raise ValueError("conv2d kernel extent must be >= 1")
            if not self.stride or self.stride < 1:
                raise ValueError("conv2d stride must be >= 1")
            if self.padding == "same" and self.kernel % 2 == 0:
                raise ValueError("'same' padding requires an odd kernel")
        elif self.kind == "maxpool2d":
            if not self.kernel or self.kernel < 1 or not self.stride or self.stride < 1:
                raise ValueError("maxpool2d needs kernel >= 1 and stride >= 1")
        elif self.kind == "dense":
            if not self.units or self.units < 1:
                raise ValueError("dense needs units >= 1")
        elif self.kind == "dropout":
            if self.p is None or not (0.0 <= self.p < 1.0):
                raise ValueError("dropout probability must be in [0, 1)")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        if self.kind != "maxpool2d":
            d.pop("ceil_mode", None)
        return d

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        spec = LayerSpec(**d)
        spec.validate()
        return spec

    def signature(self) -> dict:
        """Geometry-affecting fields only; used for architecture fingerprints."""
        sig = {"kind": self.kind}
        for k in ("channels", "kernel", "stride", "padding", "units"):
            v = getattr(self, k)
            if v is not None:
                sig[k] = v
        if self.kind == "maxpool2d":
            sig["ceil_mode"] = self.ceil_mode
        return sig


def conv2d(channels: int, kernel: int = 3, stride: int = 1,
           padding: Union[str, int] = "same") -> LayerSpec:
    s = LayerSpec(kind="conv2d", channels=channels, kernel=kernel,
                  stride=stride, padding=padding)
    s.validate()
    return s


def maxpool2d(kernel: int = 3, stride: int = 2, ceil_mode: bool = True) -> LayerSpec:
    s = LayerSpec(kind="maxpool2d", kernel=kernel, stride=stride, ceil_mode=ceil_mode)
    s.validate()
    return s


def dense(units: int) -> LayerSpec:
    s = LayerSpec(kind="dense", units=units)
    s.validate()
    return s


def relu() -> LayerSpec:
    return LayerSpec(kind="relu")


def dropout(p: float = 0.5) -> LayerSpec:
    s = LayerSpec(kind="dropout", p=p)
    s.validate()
    return s


def flatten() -> LayerSpec:
    return LayerSpec(kind="flatten")


def softmax() -> LayerSpec:
    return LayerSpec(kind="softmax")


# ---------------------------------------------------------------------------
# Layer implementations
# ---------------------------------------------------------------------------


class Layer:
    """Base class; layers without parameters inherit the no-op param API."""

    trainable = True
    name = ""

    def params(self) -> dict:
        return {}

    def grads(self) -> dict:
        return {}

    def forward(self, x: np.ndarray, train: bool, rng: Optional[np.random.Generator]) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _resolve_pad(padding: Union[str, int, None], kernel: int) -> int:
    if padding == "same":
        return (kernel - 1) // 2
    return int(padding or 0)


class Conv2D(Layer):
    """2-D convolution, NCHW layout, square kernel, zero padding.

    Forward/backward are computed as kernel-position GEMMs (one tensordot per
    kernel tap), which avoids materializing im2col buffers.
    """

    def __init__(self, spec: LayerSpec, in_channels: int, rng: np.random.Generator,
                 dtype=np.float64, name: str = "conv"):
        self.spec = spec
        self.name = name
        self.in_channels = in_channels
        self.out_channels = spec.channels
        self.kernel = spec.kernel
        self.stride = spec.stride
        self.pad = _resolve_pad(spec.padding, spec.kernel)
        # Kaiming-uniform, fan-in mode (gain sqrt(2) for the ReLU that follows)
        fan_in = in_channels * spec.kernel * spec.kernel
        bound = np.sqrt(6.0 / fan_in)
        self.W = rng.uniform(-bound, bound,
                             size=(spec.channels, in_channels, spec.kernel, spec.kernel)
                             ).astype(dtype)
        self.b = np.zeros(spec.channels, dtype=dtype)
        self.gW = None
        self.gb = None
        self._xp = None

    def params(self):
        return {"weight": self.W, "bias": self.b}

    def grads(self):
        return {"weight": self.gW, "bias": self.gb}

    def out_hw(self, h: int, w: int) -> tuple:
        k, s, p = self.kernel, self.stride, self.pad
        return ((h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def forward(self, x, train, rng):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: expected {self.in_channels} input channels, got {c}")
        oh, ow = self.out_hw(h, w)
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self.name}: input {h}x{w} too small for kernel {self.kernel}")
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        self._xp = xp
        self._in_shape = x.shape
        self._out_hw = (oh, ow)
        s = self.stride
        out = np.empty((n, self.out_channels, oh, ow), dtype=x.dtype)
        out[:] = self.b[None, :, None, None]
        for i in range(self.kernel):
            for j in range(self.kernel):
                patch = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
                # (oc, ic) x (n, ic, oh, ow) -> (oc, n, oh, ow)
                out += np.tensordot(self.W[:, :, i, j], patch, axes=([1], [1])
                                    ).transpose(1, 0, 2, 3)
        return out

    def backward(self, dout):
        xp = self._xp
        if xp is None:
            raise RuntimeError(f"{self.name}: backward without matching forward")
        n, c, h, w = self._in_shape
        oh, ow = self._out_hw
        s, p, k = self.stride, self.pad, self.kernel
        dxp = np.zeros_like(xp)
        if self.trainable:
            self.gW = np.empty_like(self.W)
            self.gb = dout.sum(axis=(0, 2, 3))
        for i in range(k):
            for j in range(k):
                patch = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
                if self.trainable:
                    self.gW[:, :, i, j] = np.tensordot(dout, patch, axes=([0, 2, 3], [0, 2, 3]))
                # (ic, oc) x (n, oc, oh, ow) -> (ic, n, oh, ow)
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += np.tensordot(
                    self.W[:, :, i, j], dout, axes=([0], [1])).transpose(1, 0, 2, 3)
        return dxp[:, :, p:p + h, p:p + w] if p else dxp


class MaxPool2D(Layer):
    """Max pooling; ceil_mode pads the right/bottom edge with -inf windows."""

    def __init__(self, spec: LayerSpec, name: str = "maxpool"):
        self.spec = spec
        self.name = name
        self.kernel = spec.kernel
        self.stride = spec.stride
        self.ceil_mode = spec.ceil_mode

    def out_hw(self, h: int, w: int) -> tuple:
        k, s = self.kernel, self.stride
        if self.ceil_mode:
            return (-(-(h - k) // s) + 1, -(-(w - k) // s) + 1)
        return ((h - k) // s + 1, (w - k) // s + 1)

    def forward(self, x, train, rng):
        n, c, h, w = x.shape
        k, s = self.kernel, self.stride
        if h < k or w < k:
            if not self.ceil_mode or h < 1 or w < 1:
                raise ShapeError(f"{self.name}: input {h}x{w} smaller than kernel {k}")
        oh, ow = self.out_hw(h, w)
        hp, wp = (oh - 1) * s + k, (ow - 1) * s + k
        if (hp, wp) != (h, w):
            xp = np.full((n, c, hp, wp), -np.inf, dtype=x.dtype)
            xp[:, :, :h, :w] = x
        else:
            xp = x
        out = np.full((n, c, oh, ow), -np.inf, dtype=x.dtype)
        arg = np.zeros((n, c, oh, ow), dtype=np.int8)  # i*k+j of the max tap
        for i in range(k):
            for j in range(k):
                patch = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
                better = patch > out
                out[better] = patch[better]
                arg[better] = i * k + j
        self._arg = arg
        self._in_shape = x.shape
        self._pad_shape = (hp, wp)
        return out

    def backward(self, dout):
        n, c, h, w = self._in_shape
        hp, wp = self._pad_shape
        k, s = self.kernel, self.stride
        oh, ow = dout.shape[2], dout.shape[3]
        dxp = np.zeros((n, c, hp, wp), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                # overlapping windows may route to the same cell, hence +=
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dout * (self._arg == i * k + j)
        return dxp[:, :, :h, :w]


class Dense(Layer):
    def __init__(self, spec: LayerSpec, in_features: int, rng: np.random.Generator,
                 dtype=np.float64, name: str = "dense"):
        self.spec = spec
        self.name = name
        self.in_features = in_features
        self.units = spec.units
        bound = np.sqrt(6.0 / in_features)
        self.W = rng.uniform(-bound, bound, size=(in_features, spec.units)).astype(dtype)
        self.b = np.zeros(spec.units, dtype=dtype)
        self.gW = None
        self.gb = None
        self._x = None

    def params(self):
        return {"weight": self.W, "bias": self.b}

    def grads(self):
        return {"weight": self.gW, "bias": self.gb}

    def forward(self, x, train, rng):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"{self.name}: expected (N, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.W + self.b

    def backward(self, dout):
        if self._x is None:
            raise RuntimeError(f"{self.name}: backward without matching forward")
        if self.trainable:
            self.gW = self._x.T @ dout
            self.gb = dout.sum(axis=0)
        return dout @ self.W.T


class ReLU(Layer):
    def forward(self, x, train, rng):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class Dropout(Layer):
    """Inverted dropout: scales at train time so eval is the identity."""

    def __init__(self, spec: LayerSpec, name: str = "dropout"):
        self.spec = spec
        self.name = name
        self.p = spec.p
        self._mask = None

    def forward(self, x, train, rng):
        if not train or self.p == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise RuntimeError("dropout in train mode needs an RNG")
        keep = 1.0 - self.p
        self._mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, dout):
        if self._mask is None:
            return dout
        return dout * self._mask


class Flatten(Layer):
    def forward(self, x, train, rng):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Softmax(Layer):
    def forward(self, x, train, rng):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        self._y = e / e.sum(axis=1, keepdims=True)
        return self._y

    def backward(self, dout):
        y = self._y
        return y * (dout - (dout * y).sum(axis=1, keepdims=True))


def make_layer(spec: LayerSpec, in_channels: int, in_features: int,
               rng: np.random.Generator, dtype, name: str) -> Layer:
    """Instantiate the layer object for a spec given the incoming geometry."""
    if spec.kind == "conv2d":
        return Conv2D(spec, in_channels, rng, dtype=dtype, name=name)
    if spec.kind == "maxpool2d":
        return MaxPool2D(spec, name=name)
    if spec.kind == "dense":
        return Dense(spec, in_features, rng, dtype=dtype, name=name)
    if spec.kind == "relu":
        return ReLU()
    if spec.kind == "dropout":
        return Dropout(spec, name=name)
    if spec.kind == "flatten":
        return Flatten()
    if spec.kind == "softmax":
        return Softmax()
    raise ValueError(f"unknown layer kind {spec.kind!r}")
