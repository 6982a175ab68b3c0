"""Anti-transfer loss: channel aggregation, similarity measures, the total
objective, and the training-time memory estimator.

The anti-transfer term of one conv layer compares the layer's feature map in
the network being trained against the same layer of a frozen network that was
pre-trained on an orthogonal task. Feature maps are aggregated per sample
(channel-wise Gram matrix by default), compared with a similarity function
(squared cosine by default), averaged over the batch and scaled by beta.
Gradients flow into the trained network only; the pre-trained side is a
constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .layers import ShapeError
from .network import ArchConfig, conv_feature_shapes

SIMILARITIES = ("squared_cosine", "sigmoid_mse")
AGGREGATIONS = ("gram", "mean", "sum", "max", "comp_mul")
DIRECTIONS = ("penalize", "encourage")

DEGENERATE_NORM = 1e-12  # below this a Gram/aggregate is treated as all-zero
COMP_MUL_EXPONENT = 0.001


@dataclass(frozen=True)
class ATConfig:
    """Which conv layers get the anti-transfer term, and how it is computed."""

    layers: Tuple[int, ...] = (1,)
    beta: float = 1.0
    similarity: str = "squared_cosine"
    aggregation: str = "gram"
    direction: str = "penalize"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(k) for k in self.layers))
        if self.beta < 0:
            raise ValueError("beta must be >= 0 (use direction='encourage' to flip the sign)")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"similarity must be one of {SIMILARITIES}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")

    def to_dict(self) -> dict:
        return {"layers": list(self.layers), "beta": self.beta,
                "similarity": self.similarity, "aggregation": self.aggregation,
                "direction": self.direction}

    @staticmethod
    def from_dict(d: dict) -> "ATConfig":
        return ATConfig(layers=tuple(d.get("layers", (1,))),
                        beta=d.get("beta", 1.0),
                        similarity=d.get("similarity", "squared_cosine"),
                        aggregation=d.get("aggregation", "gram"),
                        direction=d.get("direction", "penalize"))


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def gram(feature: np.ndarray) -> np.ndarray:
    """Per-sample channel Gram matrix: G[i, j] = <vec(F_i), vec(F_j)>.

    feature is (batch, channels, x, y); result is (batch, channels, channels),
    reducing (c, x, y) to (c, c).
    """
    if feature.ndim != 4:
        raise ShapeError(f"expected (batch, c, x, y), got {feature.shape}")
    b, c, x, y = feature.shape
    if c < 1:
        raise ShapeError("feature map needs at least one channel")
    if x * y == 0:
        raise ShapeError("feature map has empty spatial extent")
    flat = feature.reshape(b, c, x * y)
    return flat @ flat.transpose(0, 2, 1)


def aggregate(feature: np.ndarray, kind: str) -> np.ndarray:
    """Pixel-wise channel reduction to a (batch, x, y) map.

    comp_mul compresses each value to v**0.001 before multiplying along the
    channel axis, so products of many small activations do not round to zero;
    it requires nonnegative inputs.
    """
    if feature.ndim != 4:
        raise ShapeError(f"expected (batch, c, x, y), got {feature.shape}")
    if kind == "mean":
        return feature.mean(axis=1)
    if kind == "sum":
        return feature.sum(axis=1)
    if kind == "max":
        return feature.max(axis=1)
    if kind == "comp_mul":
        if np.any(feature < 0):
            raise ValueError("comp_mul requires nonnegative activations")
        return np.prod(feature ** COMP_MUL_EXPONENT, axis=1)
    if kind == "gram":
        return gram(feature)
    raise ValueError(f"unknown aggregation {kind!r}")


def _aggregate_with_grad(feature: np.ndarray, kind: str):
    """Returns (aggregated, pullback) where pullback maps dL/d(aggregated)
    back to dL/d(feature)."""
    b, c, x, y = feature.shape
    if kind == "gram":
        flat = feature.reshape(b, c, x * y)
        g = flat @ flat.transpose(0, 2, 1)

        def pullback(dg):
            m = dg + dg.transpose(0, 2, 1)
            return (m @ flat).reshape(b, c, x, y)

        return g, pullback
    if kind == "mean":
        return feature.mean(axis=1), lambda da: np.repeat(
            da[:, None] / c, c, axis=1)
    if kind == "sum":
        return feature.sum(axis=1), lambda da: np.repeat(da[:, None], c, axis=1)
    if kind == "max":
        arg = feature.argmax(axis=1)
        out = np.take_along_axis(feature, arg[:, None], axis=1)[:, 0]

        def pullback(da):
            df = np.zeros_like(feature)
            np.put_along_axis(df, arg[:, None], da[:, None], axis=1)
            return df

        return out, pullback
    if kind == "comp_mul":
        if np.any(feature < 0):
            raise ValueError("comp_mul requires nonnegative activations")
        powed = feature ** COMP_MUL_EXPONENT
        out = np.prod(powed, axis=1)

        def pullback(da):
            # d prod / d v_c = a * prod / v_c for v_c > 0; zero activations get
            # a zero subgradient (the true derivative is unbounded there)
            pos = feature > 0
            safe = np.where(pos, feature, 1.0)
            return da[:, None] * COMP_MUL_EXPONENT * out[:, None] / safe * pos

        return out, pullback
    raise ValueError(f"unknown aggregation {kind!r}")


# ---------------------------------------------------------------------------
# Similarity
# ---------------------------------------------------------------------------

def squared_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Squared cosine of the flattened tensors, in [0, 1].

    Returns 0 when either norm is below 1e-12: an all-zero representation is
    treated as maximally dissimilar rather than dividing by ~0.
    """
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    v = a.ravel()
    w = b.ravel()
    nv = np.linalg.norm(v)
    nw = np.linalg.norm(w)
    if nv < DEGENERATE_NORM or nw < DEGENERATE_NORM:
        return 0.0
    cos = float(v @ w) / (nv * nw)
    return cos * cos


def sigmoid_mse(a: np.ndarray, b: np.ndarray) -> float:
    """Logistic of the negative mean squared error: 0.5 at equality, falling
    monotonically towards 0 as the tensors move apart."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    e = np.exp(-mse)  # mse >= 0, so this never overflows
    return float(e / (1.0 + e))


def _similarity_with_grad(v: np.ndarray, w: np.ndarray, kind: str):
    """Per-sample similarity of flattened (b, m) rows plus d(sim)/dv."""
    if kind == "squared_cosine":
        nv = np.linalg.norm(v, axis=1)
        nw = np.linalg.norm(w, axis=1)
        ok = (nv >= DEGENERATE_NORM) & (nw >= DEGENERATE_NORM)
        nv_safe = np.where(ok, nv, 1.0)
        nw_safe = np.where(ok, nw, 1.0)
        dot = np.einsum("bm,bm->b", v, w)
        cos = np.where(ok, dot / (nv_safe * nw_safe), 0.0)
        sim = cos * cos
        dv = 2.0 * cos[:, None] * (w / (nv_safe * nw_safe)[:, None]
                                   - cos[:, None] * v / (nv_safe ** 2)[:, None])
        dv *= ok[:, None]
        return sim, dv
    if kind == "sigmoid_mse":
        m = v.shape[1]
        diff = v - w
        mse = np.mean(diff * diff, axis=1)
        e = np.exp(-mse)  # mse >= 0: overflow-safe
        sim = e / (1.0 + e)
        dv = (sim * (1.0 - sim))[:, None] * (-2.0 / m) * diff
        return sim, dv
    raise ValueError(f"unknown similarity {kind!r}")


# ---------------------------------------------------------------------------
# Anti-transfer loss
# ---------------------------------------------------------------------------

def at_loss_and_grad(trained: np.ndarray, pretrained: np.ndarray, config: ATConfig
                     ) -> Tuple[float, Optional[np.ndarray]]:
    """Single-layer anti-transfer term and its gradient w.r.t. the trained map.

    Aggregates both maps per sample, compares with the configured similarity,
    averages over the batch and scales by beta (negated for
    direction='encourage'). The pretrained map is a constant: no gradient
    exists for it. beta == 0 short-circuits to (0.0, None) so a zero-weight
    run is arithmetically identical to not having the term at all.
    """
    if trained.shape != pretrained.shape:
        raise ShapeError(
            f"feature maps disagree: {trained.shape} vs {pretrained.shape} "
            "(architectures are incompatible at this layer)")
    if config.beta == 0.0:
        return 0.0, None
    b = trained.shape[0]
    agg_t, pullback = _aggregate_with_grad(trained, config.aggregation)
    agg_p = aggregate(pretrained, config.aggregation)
    sims, dv = _similarity_with_grad(agg_t.reshape(b, -1), agg_p.reshape(b, -1),
                                     config.similarity)
    sign = -1.0 if config.direction == "encourage" else 1.0
    loss = sign * config.beta * float(np.mean(sims))
    dagg = (sign * config.beta / b) * dv.reshape(agg_t.shape)
    return loss, pullback(dagg).astype(trained.dtype)


def at_loss(trained: np.ndarray, pretrained: np.ndarray, config: ATConfig) -> float:
    """Anti-transfer term for one layer (value only)."""
    return at_loss_and_grad(trained, pretrained, config)[0]


def pretrained_side_grad(trained: np.ndarray, pretrained: np.ndarray,
                         config: ATConfig) -> np.ndarray:
    """Gradient of the anti-transfer term w.r.t. the pre-trained map.

    Identically zero by contract: the pre-trained extractor is frozen and the
    loss treats its features as constants. Exposed so the contract is testable.
    """
    if trained.shape != pretrained.shape:
        raise ShapeError(f"feature maps disagree: {trained.shape} vs {pretrained.shape}")
    return np.zeros_like(pretrained)


# ---------------------------------------------------------------------------
# Classification objective
# ---------------------------------------------------------------------------

def cross_entropy_and_grad(scores: np.ndarray, labels: np.ndarray
                           ) -> Tuple[float, np.ndarray]:
    """Batch-mean softmax cross-entropy from raw class scores."""
    if scores.ndim != 2:
        raise ShapeError(f"scores must be (batch, classes), got {scores.shape}")
    n = scores.shape[1]
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != scores.shape[0]:
        raise ShapeError("labels must be one id per row of scores")
    if np.any(labels < 0) or np.any(labels >= n):
        raise ValueError(f"label out of range [0, {n})")
    b = scores.shape[0]
    z = scores - scores.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(b), labels] - logsum
    loss = float(-logp.mean())
    probs = np.exp(z - logsum[:, None])
    grad = probs
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return loss, grad.astype(scores.dtype)


def total_loss(scores: np.ndarray, labels: np.ndarray,
               at_terms: Sequence[float] = ()) -> float:
    """Cross-entropy plus the summed per-layer anti-transfer terms."""
    ce, _ = cross_entropy_and_grad(scores, labels)
    return ce + float(sum(at_terms))


# ---------------------------------------------------------------------------
# Memory estimator
# ---------------------------------------------------------------------------

@dataclass
class MemoryEstimate:
    """Exact byte arithmetic for the extra training-time memory an
    anti-transfer extractor costs: extractor weights plus, for each chosen
    layer, two Gram matrices and two feature maps."""

    extractor_bytes: int
    per_layer: Dict[int, Dict[str, int]]  # k -> {gram_elems, feature_elems}
    bytes_per_number: int

    @property
    def total_bytes(self) -> int:
        extra = sum(2 * (d["gram_elems"] + d["feature_elems"])
                    for d in self.per_layer.values())
        return self.extractor_bytes + extra * self.bytes_per_number

    def to_dict(self) -> dict:
        return {"extractor_bytes": self.extractor_bytes,
                "per_layer": {str(k): dict(v) for k, v in self.per_layer.items()},
                "bytes_per_number": self.bytes_per_number,
                "total_bytes": self.total_bytes,
                "total_megabytes": self.total_bytes / 2 ** 20}


def estimate_memory(arch: ArchConfig, batch_size: int, at_layers: Sequence[int],
                    bytes_per_number: int = 4) -> MemoryEstimate:
    """Extra memory for anti-transfer training with this extractor.

    extractor_bytes counts the conv-stack parameters; each selected layer adds
    2 * (batch * channels^2 + batch * channels * x * y) numbers (Gram matrix
    and feature map, for both the trained and the pre-trained network).
    """
    shapes = conv_feature_shapes(arch)
    for k in at_layers:
        if not (1 <= k <= len(shapes)):
            raise ValueError(f"at layer {k} outside 1..{len(shapes)}")
    e_t = 0
    in_ch = arch.input_shape[0]
    for spec in arch.layers:
        if spec.kind == "conv2d":
            e_t += spec.channels * in_ch * spec.kernel * spec.kernel + spec.channels
            in_ch = spec.channels
    per_layer = {}
    for k in sorted(set(int(k) for k in at_layers)):
        c, x, y = shapes[k - 1]
        per_layer[k] = {"gram_elems": batch_size * c * c,
                        "feature_elems": batch_size * c * x * y}
    return MemoryEstimate(extractor_bytes=e_t * bytes_per_number,
                          per_layer=per_layer,
                          bytes_per_number=bytes_per_number)
