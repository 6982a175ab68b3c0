"""Network container: ordered layers, conv tap points, presets and fingerprints.

Conv layers are numbered 1..K in network order. A "tap" at conv k yields the
post-activation feature map of that conv (output of the ReLU that immediately
follows it). Backward accepts extra gradients to inject at tap points, which
is how the anti-transfer loss reaches into the trained network, and can also
report the gradient flowing through a tap (used by Grad-CAM).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .layers import (Layer, LayerSpec, ShapeError, check_finite, conv2d,
                     dense, dropout, flatten, make_layer, maxpool2d, relu)


@dataclass
class ArchConfig:
    """Ordered layer specs plus the input/output geometry they assume."""

    layers: List[LayerSpec]
    input_shape: Tuple[int, int, int]  # (channels, height, width)
    n_classes: int
    name: str = "custom"

    def __post_init__(self):
        self.layers = [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s)
                       for s in self.layers]
        for s in self.layers:
            s.validate()
        self.input_shape = tuple(self.input_shape)
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (channels, height, width)")
        d = [s for s in self.layers if s.kind == "dense"]
        if not d or d[-1].units != self.n_classes:
            raise ValueError("last dense layer must have n_classes units")

    @property
    def conv_count(self) -> int:
        return sum(1 for s in self.layers if s.kind == "conv2d")

    def to_dict(self) -> dict:
        return {"name": self.name,
                "input_shape": list(self.input_shape),
                "n_classes": self.n_classes,
                "layers": [s.to_dict() for s in self.layers]}

    @staticmethod
    def from_dict(d: dict) -> "ArchConfig":
        return ArchConfig(layers=[LayerSpec.from_dict(s) for s in d["layers"]],
                          input_shape=tuple(d["input_shape"]),
                          n_classes=d["n_classes"],
                          name=d.get("name", "custom"))

    def conv_fingerprints(self) -> List[str]:
        """Stable hash of the structural stack up to (and including) each conv.

        Two networks can exchange conv weights up to depth k iff their k-th
        fingerprints agree. Input channel count matters, spatial size does not.
        """
        prints = []
        prefix = [{"in_channels": self.input_shape[0]}]
        for spec in self.layers:
            prefix.append(spec.signature())
            if spec.kind == "conv2d":
                blob = json.dumps(prefix, sort_keys=True).encode()
                prints.append(hashlib.sha256(blob).hexdigest()[:16])
        return prints


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def _vgg_block(channels: int, convs: int) -> List[LayerSpec]:
    specs: List[LayerSpec] = []
    for _ in range(convs):
        specs += [conv2d(channels), relu()]
    specs.append(maxpool2d())
    return specs


def vgg16(input_hw: Tuple[int, int], n_classes: int, in_channels: int = 1,
          dropout_p: float = 0.5) -> ArchConfig:
    """Full 13-conv VGG16 stack (64x2, 128x2, 256x3, 512x3, 512x3) on a
    single-channel input, with the classic 4096-unit head."""
    specs: List[LayerSpec] = []
    for ch, n in ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3)):
        specs += _vgg_block(ch, n)
    specs += [flatten(),
              dense(4096), relu(), dropout(dropout_p),
              dense(4096), relu(), dropout(dropout_p),
              dense(n_classes)]
    return ArchConfig(layers=specs, input_shape=(in_channels, *input_hw),
                      n_classes=n_classes, name="vgg16")


def vgg_small(input_hw: Tuple[int, int], n_classes: int, in_channels: int = 1,
              dropout_p: float = 0.5) -> ArchConfig:
    """8-conv reduction (32x2, 64x2, 128x2, 256x2) for mid-size experiments."""
    specs: List[LayerSpec] = []
    for ch in (32, 64, 128, 256):
        specs += _vgg_block(ch, 2)
    specs += [flatten(), dense(256), relu(), dropout(dropout_p), dense(n_classes)]
    return ArchConfig(layers=specs, input_shape=(in_channels, *input_hw),
                      n_classes=n_classes, name="vgg-small")


def vgg_tiny(input_hw: Tuple[int, int], n_classes: int, in_channels: int = 1,
             dropout_p: float = 0.5) -> ArchConfig:
    """4-conv desk-scale preset (16/32/64/64 channels, pool after each conv)."""
    specs: List[LayerSpec] = []
    for ch in (16, 32, 64, 64):
        specs += _vgg_block(ch, 1)
    specs += [flatten(), dense(64), relu(), dropout(dropout_p), dense(n_classes)]
    return ArchConfig(layers=specs, input_shape=(in_channels, *input_hw),
                      n_classes=n_classes, name="vgg-tiny")


PRESETS = {"vgg16": vgg16, "vgg-small": vgg_small, "vgg-tiny": vgg_tiny}


def preset(name: str, input_hw: Tuple[int, int], n_classes: int, **kw) -> ArchConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name](input_hw, n_classes, **kw)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class Network:
    """A built network: layer objects with weights, plus tap bookkeeping."""

    def __init__(self, arch: ArchConfig, seed: int = 0, dtype=np.float64):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        # per-layer NaN/Inf scans; trainers may disable them on the hot path
        # and rely on the per-batch loss check instead
        self.finite_checks = True
        rng = np.random.default_rng([int(seed), 0x1A17])
        self.layers: List[Layer] = []
        self.shapes = self._propagate_shapes(arch)
        conv_i = 0
        dense_i = 0
        for pos, spec in enumerate(arch.layers):
            c_in, h_in, w_in = self.shapes[pos]
            if spec.kind == "conv2d":
                conv_i += 1
                name = f"conv{conv_i}"
            elif spec.kind == "dense":
                dense_i += 1
                name = f"dense{dense_i}"
            else:
                name = f"{spec.kind}{pos}"
            feats = c_in if h_in is None else c_in * h_in * w_in
            self.layers.append(make_layer(spec, c_in, feats, rng, self.dtype, name))
        # conv index k (1-based) -> position of its post-activation output
        self.tap_positions: Dict[int, int] = {}
        k = 0
        for pos, spec in enumerate(arch.layers):
            if spec.kind == "conv2d":
                k += 1
                tap = pos
                if pos + 1 < len(arch.layers) and arch.layers[pos + 1].kind == "relu":
                    tap = pos + 1
                self.tap_positions[k] = tap

    @staticmethod
    def _propagate_shapes(arch: ArchConfig) -> List[Tuple]:
        """Shape entering each layer; (channels, h, w) or (features, None, None)."""
        shapes = []
        c, h, w = arch.input_shape
        feats = None
        for spec in arch.layers:
            shapes.append((c, h, w) if feats is None else (feats, None, None))
            if spec.kind == "conv2d":
                k, s = spec.kernel, spec.stride
                p = (k - 1) // 2 if spec.padding == "same" else int(spec.padding or 0)
                c = spec.channels
                h = (h + 2 * p - k) // s + 1
                w = (w + 2 * p - k) // s + 1
                if h < 1 or w < 1:
                    raise ShapeError(f"{spec.kind} output collapses to {h}x{w}")
            elif spec.kind == "maxpool2d":
                k, s = spec.kernel, spec.stride
                if spec.ceil_mode:
                    h = -(-(h - k) // s) + 1
                    w = -(-(w - k) // s) + 1
                else:
                    h = (h - k) // s + 1
                    w = (w - k) // s + 1
            elif spec.kind == "flatten":
                feats = c * h * w
            elif spec.kind == "dense":
                if feats is None:
                    raise ShapeError("dense layer before flatten")
                feats = spec.units
        return shapes

    # -- weights ------------------------------------------------------------

    def named_params(self) -> Dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            for pname, arr in layer.params().items():
                out[f"{layer.name}.{pname}"] = arr
        return out

    def set_param(self, name: str, value: np.ndarray) -> None:
        lname, pname = name.rsplit(".", 1)
        for layer in self.layers:
            if layer.name == lname:
                cur = layer.params()[pname]
                if cur.shape != value.shape:
                    raise ShapeError(f"{name}: shape {value.shape} != {cur.shape}")
                setattr(layer, "W" if pname == "weight" else "b",
                        value.astype(self.dtype))
                return
        raise KeyError(name)

    def conv_layers(self) -> List:
        return [l for l in self.layers if l.name.startswith("conv")]

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.named_params()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.named_params()[name]).tobytes())
        return h.hexdigest()

    def freeze_convs(self, up_to: int) -> None:
        """Mark conv layers 1..up_to (and nothing else) non-trainable."""
        convs = self.conv_layers()
        if not (0 <= up_to <= len(convs)):
            raise ValueError(f"freeze_up_to {up_to} outside 0..{len(convs)}")
        for i, layer in enumerate(convs, start=1):
            layer.trainable = i > up_to

    # -- execution ----------------------------------------------------------

    def forward(self, x: np.ndarray, train: bool = False,
                rng: Optional[np.random.Generator] = None,
                taps: Iterable[int] = ()) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
        """Run the network; returns (class scores, feature map per tapped conv)."""
        taps = sorted(set(taps))
        for k in taps:
            if k not in self.tap_positions:
                raise ValueError(f"tap index {k} is not a conv layer (1..{self.arch.conv_count})")
        expect = self.arch.input_shape
        if x.ndim != 4 or x.shape[1:] != expect:
            raise ShapeError(f"input shape {x.shape} does not match {('N',) + expect}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        check_finite(x, "network input")
        tap_at = {self.tap_positions[k]: k for k in taps}
        tapped: Dict[int, np.ndarray] = {}
        out = x
        for pos, layer in enumerate(self.layers):
            out = layer.forward(out, train, rng)
            if self.finite_checks:
                check_finite(out, f"activations after {layer.name or type(layer).__name__}")
            if pos in tap_at:
                tapped[tap_at[pos]] = out
        return out, tapped

    def backward(self, dout: np.ndarray,
                 tap_grad_in: Optional[Dict[int, np.ndarray]] = None,
                 tap_grad_out: Iterable[int] = ()) -> Dict[int, np.ndarray]:
        """Reverse sweep from the output gradient.

        tap_grad_in:  extra dL/d(feature map) added at tap points on the way
                      down (anti-transfer injection).
        tap_grad_out: tap indices whose accumulated gradient should be
                      captured and returned (Grad-CAM).
        Parameter gradients land on each trainable layer's .gW/.gb.
        """
        inject = {self.tap_positions[k]: g for k, g in (tap_grad_in or {}).items()}
        want = {self.tap_positions[k]: k for k in tap_grad_out}
        captured: Dict[int, np.ndarray] = {}
        # positions we must still reach: trainable params and requested taps
        needed = [pos for pos, layer in enumerate(self.layers)
                  if (layer.params() and layer.trainable)]
        needed += list(want.keys())
        stop = min(needed) if needed else len(self.layers)
        g = dout
        for pos in range(len(self.layers) - 1, -1, -1):
            if pos in inject:
                g = g + inject[pos]
            if pos in want:
                captured[want[pos]] = g
            if pos < stop:
                break
            g = self.layers[pos].backward(g)
            if self.finite_checks:
                check_finite(g, f"gradient through {self.layers[pos].name or type(self.layers[pos]).__name__}")
        return captured


def conv_feature_shapes(arch: ArchConfig) -> List[Tuple[int, int, int]]:
    """(channels, h, w) of each conv layer's output, indexed 1..K as list[0..]."""
    shapes = Network._propagate_shapes(arch)
    out = []
    for pos, spec in enumerate(arch.layers):
        if spec.kind != "conv2d":
            continue
        c, h, w = shapes[pos]
        k, s = spec.kernel, spec.stride
        p = (k - 1) // 2 if spec.padding == "same" else int(spec.padding or 0)
        out.append((spec.channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1))
    return out


def build(arch: ArchConfig, seed: int = 0, dtype=np.float64) -> Network:
    """Deterministically initialize a network for the given architecture."""
    return Network(arch, seed=seed, dtype=dtype)


def extract_features(net: Network, x: np.ndarray, layer_indices: Sequence[int]
                     ) -> Dict[int, np.ndarray]:
    """Eval-mode feature maps at the given conv indices; never mutates weights."""
    _, tapped = net.forward(x, train=False, taps=layer_indices)
    return tapped
