"""Training strategies and protocol: orthogonal pre-training, then scratch /
weight-initialization / frozen-WI / anti-transfer / inverse / dual runs under
one shared protocol (Adam, batch 13, early stopping on validation loss with
patience 5, best-epoch weights restored).

The frozen extractor's aggregated representations (Gram matrices by default)
are precomputed once per split before the epoch loop: they are constants of
the run, so this is arithmetically identical to running the extractor forward
in parallel on every batch, just cheaper.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ckpt
from .audio import NormStats, compute_norm_stats
from .data import Dataset, load_split_dir
from .losses import (ATConfig, _aggregate_with_grad, _similarity_with_grad,
                     aggregate, cross_entropy_and_grad)
from .network import Network, build, conv_feature_shapes, preset
from .optim import Adam

STRATEGIES = ("scratch", "wi", "wi_freeze", "at", "at_inverse", "dual_at")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the epoch/batch it happened in."""


@dataclass
class TrainConfig:
    """Everything one run needs; defaults follow the reference protocol."""

    strategy: str = "scratch"
    at: ATConfig = field(default_factory=ATConfig)
    pretrained_checkpoints: Tuple[str, ...] = ()
    label_field: str = "target"      # target | orth1 | orth2
    task_name: str = ""
    arch_preset: str = "vgg-tiny"
    lr: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 13
    max_epochs: int = 50
    patience: int = 5
    dropout_p: float = 0.5
    seed: int = 0
    dtype: str = "float32"
    normalize_inputs: bool = True
    eval_batch_size: int = 64
    split_policy: str = "random"
    split_fractions: Tuple[float, float, float] = (0.7, 0.2, 0.1)

    def __post_init__(self):
        if isinstance(self.at, dict):
            self.at = ATConfig.from_dict(self.at)
        self.pretrained_checkpoints = tuple(self.pretrained_checkpoints)
        self.split_fractions = tuple(self.split_fractions)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        need = {"at": 1, "at_inverse": 1, "dual_at": 2}.get(self.strategy)
        if need is not None and len(self.pretrained_checkpoints) != need:
            raise ValueError(f"strategy {self.strategy} requires exactly {need} "
                             f"pretrained checkpoint(s), got "
                             f"{len(self.pretrained_checkpoints)}")
        if self.strategy in ("wi", "wi_freeze") and len(self.pretrained_checkpoints) != 1:
            raise ValueError(f"strategy {self.strategy} requires exactly 1 "
                             "pretrained checkpoint")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["at"] = self.at.to_dict()
        d["pretrained_checkpoints"] = list(self.pretrained_checkpoints)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "at" in d:
            d["at"] = ATConfig.from_dict(d["at"])
        if "pretrained_checkpoints" in d:
            d["pretrained_checkpoints"] = tuple(d["pretrained_checkpoints"])
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        return TrainConfig(**d)


@dataclass
class EpochMetrics:
    epoch: int
    train_ce: float
    val_ce: float
    train_at: float
    val_at: float
    train_acc: float
    val_acc: float
    seconds: float
    train_at_per_layer: Dict[int, float] = field(default_factory=dict)
    val_at_per_layer: Dict[int, float] = field(default_factory=dict)

    CSV_COLUMNS = ("epoch", "train_ce", "val_ce", "train_at", "val_at",
                   "train_acc", "val_acc", "seconds")

    def csv_row(self) -> list:
        return [self.epoch, f"{self.train_ce:.6f}", f"{self.val_ce:.6f}",
                f"{self.train_at:.6f}", f"{self.val_at:.6f}",
                f"{self.train_acc:.4f}", f"{self.val_acc:.4f}",
                f"{self.seconds:.3f}"]


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint_path: Path
    metrics: List[EpochMetrics]
    best_epoch: int
    test_accuracy: float
    val_accuracy: float
    confusion: np.ndarray
    summary: dict
    network: Network


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(net: Network, x: np.ndarray, labels: np.ndarray,
             batch_size: int = 64) -> Tuple[float, np.ndarray]:
    """Eval-mode accuracy and confusion matrix (rows = true class)."""
    n_classes = net.arch.n_classes
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        yb = labels[start:start + batch_size]
        logits, _ = net.forward(xb)
        pred = logits.argmax(axis=1)
        np.add.at(confusion, (yb, pred), 1)
    correct = int(np.trace(confusion))
    return correct / max(len(x), 1), confusion


def _eval_losses(net: Network, x, labels, at_cfg: Optional[ATConfig],
                 agg_cache: Optional[Dict[int, np.ndarray]], batch_size: int):
    """Validation cross-entropy, accuracy and per-layer anti-transfer terms."""
    total_ce = 0.0
    correct = 0
    at_sums = {k: 0.0 for k in (at_cfg.layers if at_cfg else ())}
    taps = at_cfg.layers if at_cfg else ()
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        yb = labels[start:start + batch_size]
        logits, tapped = net.forward(xb, taps=taps)
        ce, _ = cross_entropy_and_grad(logits, yb)
        total_ce += ce * len(xb)
        correct += int((logits.argmax(axis=1) == yb).sum())
        if at_cfg:
            for k in taps:
                val, _ = _at_term(tapped[k], agg_cache[k][start:start + len(xb)],
                                  at_cfg)
                at_sums[k] += val * len(xb)
    n = max(len(x), 1)
    return (total_ce / n, correct / n, {k: v / n for k, v in at_sums.items()})


# ---------------------------------------------------------------------------
# Anti-transfer plumbing
# ---------------------------------------------------------------------------

def _at_term(trained_feature: np.ndarray, agg_pretrained: np.ndarray,
             cfg: ATConfig) -> Tuple[float, Optional[np.ndarray]]:
    """Anti-transfer term against a precomputed pretrained-side aggregate."""
    if cfg.beta == 0.0:
        return 0.0, None
    b = trained_feature.shape[0]
    agg_t, pullback = _aggregate_with_grad(trained_feature, cfg.aggregation)
    if agg_t.shape != agg_pretrained.shape:
        raise ValueError(f"aggregated shapes disagree: {agg_t.shape} vs "
                         f"{agg_pretrained.shape}")
    sims, dv = _similarity_with_grad(agg_t.reshape(b, -1),
                                     agg_pretrained.reshape(b, -1),
                                     cfg.similarity)
    sign = -1.0 if cfg.direction == "encourage" else 1.0
    loss = sign * cfg.beta * float(np.mean(sims))
    dagg = (sign * cfg.beta / b) * dv.reshape(agg_t.shape)
    return loss, pullback(dagg).astype(trained_feature.dtype)


def _precompute_extractor_aggs(extractor: Network, x: np.ndarray,
                               at_cfg: ATConfig, batch_size: int
                               ) -> Dict[int, np.ndarray]:
    """Per-sample aggregated representations of the frozen extractor."""
    out: Dict[int, List[np.ndarray]] = {k: [] for k in at_cfg.layers}
    for start in range(0, len(x), batch_size):
        _, tapped = extractor.forward(x[start:start + batch_size],
                                      taps=at_cfg.layers)
        for k, fmap in tapped.items():
            out[k].append(aggregate(fmap, at_cfg.aggregation))
    return {k: np.concatenate(chunks) for k, chunks in out.items()}


def _check_extractor_compatible(net: Network, extractor: Network,
                                at_cfg: ATConfig) -> None:
    up_to = max(at_cfg.layers)
    ckpt.check_conv_compatible(net.arch, extractor.arch, up_to,
                               context="anti-transfer extractor")
    mine = conv_feature_shapes(net.arch)
    theirs = conv_feature_shapes(extractor.arch)
    for k in at_cfg.layers:
        if mine[k - 1] != theirs[k - 1]:
            raise ValueError(f"feature map shapes disagree at conv {k}: "
                             f"{mine[k - 1]} vs {theirs[k - 1]}")


# ---------------------------------------------------------------------------
# Single-stage training
# ---------------------------------------------------------------------------

def _atomic_write_json(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _train_single(config: TrainConfig, data: Dict[str, Dataset], out_dir: Path,
                  at_checkpoint: Optional[Path] = None,
                  init_source: Optional[Network] = None,
                  freeze_up_to: Optional[int] = None,
                  save_init_as: Optional[str] = None) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set, val_set, test_set = data["train"], data["val"], data["test"]
    labels = {s: d.labels_for(config.label_field)
              for s, d in (("train", train_set), ("val", val_set), ("test", test_set))}
    n_classes = train_set.classes_for(config.label_field)

    xs = {"train": train_set.x, "val": val_set.x, "test": test_set.x}
    stats = None
    if config.normalize_inputs:
        stats = compute_norm_stats([train_set.x])
        xs = {s: ((x.astype(np.float64) - stats.mean) / stats.std).astype(config.dtype)
              for s, x in xs.items()}
    else:
        xs = {s: x.astype(config.dtype) for s, x in xs.items()}

    input_hw = xs["train"].shape[2:]
    arch = preset(config.arch_preset, input_hw, n_classes,
                  dropout_p=config.dropout_p)
    net = build(arch, seed=config.seed, dtype=np.dtype(config.dtype))

    if init_source is not None:
        ckpt.init_from(net, init_source, freeze_up_to=freeze_up_to)

    at_cfg = None
    extractor = None
    agg_caches = {}
    extractor_hash_before = extractor_hash_after = None
    if at_checkpoint is not None:
        at_cfg = config.at
        if config.strategy == "at_inverse" and at_cfg.direction != "encourage":
            at_cfg = replace(at_cfg, direction="encourage")
        extractor = ckpt.load(at_checkpoint)
        _check_extractor_compatible(net, extractor, at_cfg)
        extractor_hash_before = extractor.weight_hash()
        for split in ("train", "val"):
            agg_caches[split] = _precompute_extractor_aggs(
                extractor, xs[split], at_cfg, config.eval_batch_size)

    optimizer = Adam(lr=config.lr, beta1=config.adam_beta1,
                     beta2=config.adam_beta2, eps=config.adam_eps)
    rng_order = np.random.default_rng([config.seed, 1])
    rng_dropout = np.random.default_rng([config.seed, 2])

    if save_init_as:
        ckpt.save(net, out_dir / save_init_as,
                  provenance=_provenance(config, epoch=0, stats=stats))

    taps = at_cfg.layers if at_cfg else ()
    metrics: List[EpochMetrics] = []
    best = {"loss": np.inf, "epoch": -1, "weights": None, "val_acc": 0.0}
    metrics_path = out_dir / "metrics.csv"
    mfile = open(metrics_path, "w", newline="")
    mcsv = csv.writer(mfile)
    mcsv.writerow(EpochMetrics.CSV_COLUMNS)

    x_train = xs["train"]
    y_train = labels["train"]
    n_train = len(x_train)
    try:
        for epoch in range(config.max_epochs):
            tic = time.perf_counter()
            order = rng_order.permutation(n_train)
            ce_sum = 0.0
            at_sums = {k: 0.0 for k in taps}
            correct = 0
            first_batch = True
            for start in range(0, n_train, config.batch_size):
                idx = order[start:start + config.batch_size]
                xb = x_train[idx]
                yb = y_train[idx]
                net.finite_checks = first_batch
                logits, tapped = net.forward(xb, train=True, rng=rng_dropout,
                                             taps=taps)
                first_batch = False
                ce, dlogits = cross_entropy_and_grad(logits, yb)
                inject = {}
                batch_at = 0.0
                for k in taps:
                    val, grad = _at_term(tapped[k], agg_caches["train"][k][idx],
                                         at_cfg)
                    at_sums[k] += val * len(idx)
                    batch_at += val
                    if grad is not None:
                        inject[k] = grad
                if not np.isfinite(ce + batch_at):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, samples "
                        f"{start}..{start + len(idx)} (ce={ce}, at={batch_at})")
                ce_sum += ce * len(idx)
                correct += int((logits.argmax(axis=1) == yb).sum())
                net.backward(dlogits, tap_grad_in=inject or None)
                params, grads = {}, {}
                for layer in net.layers:
                    if layer.trainable and layer.params():
                        for pname, arr in layer.params().items():
                            key = f"{layer.name}.{pname}"
                            params[key] = arr
                            grads[key] = layer.grads()[pname]
                optimizer.step(params, grads)
            net.finite_checks = True

            val_ce, val_acc, val_at = _eval_losses(
                net, xs["val"], labels["val"], at_cfg,
                agg_caches.get("val"), config.eval_batch_size)
            train_at_layers = {k: v / n_train for k, v in at_sums.items()}
            em = EpochMetrics(
                epoch=epoch,
                train_ce=ce_sum / n_train,
                val_ce=val_ce,
                train_at=sum(train_at_layers.values()),
                val_at=sum(val_at.values()),
                train_acc=correct / n_train,
                val_acc=val_acc,
                seconds=time.perf_counter() - tic,
                train_at_per_layer=train_at_layers,
                val_at_per_layer=val_at)
            metrics.append(em)
            mcsv.writerow(em.csv_row())
            mfile.flush()

            val_total = val_ce + sum(val_at.values())
            if val_total < best["loss"]:
                best.update(loss=val_total, epoch=epoch, val_acc=val_acc,
                            weights={n: a.copy() for n, a in net.named_params().items()})
            elif epoch - best["epoch"] >= config.patience:
                break
    finally:
        mfile.close()

    if best["weights"] is not None:
        for name, arr in best["weights"].items():
            net.set_param(name, arr)

    test_acc, confusion = evaluate(net, xs["test"], labels["test"],
                                   config.eval_batch_size)
    if extractor is not None:
        extractor_hash_after = extractor.weight_hash()

    ckpt_path = out_dir / "model.atck"
    ckpt.save(net, ckpt_path,
              provenance=_provenance(config, epoch=best["epoch"], stats=stats))
    summary = {
        "config": config.to_dict(),
        "best_epoch": best["epoch"],
        "epochs_run": len(metrics),
        "val_accuracy": best["val_acc"],
        "test_accuracy": test_acc,
        "confusion_matrix": confusion.tolist(),
        "checkpoint": ckpt_path.name,
        "norm_stats": None if stats is None else {"mean": stats.mean, "std": stats.std},
        "extractor_hash_before": extractor_hash_before,
        "extractor_hash_after": extractor_hash_after,
    }
    _atomic_write_json(out_dir / "summary.json", summary)
    return TrainResult(out_dir=out_dir, checkpoint_path=ckpt_path,
                       metrics=metrics, best_epoch=best["epoch"],
                       test_accuracy=test_acc, val_accuracy=best["val_acc"],
                       confusion=confusion, summary=summary, network=net)


def _provenance(config: TrainConfig, epoch: int, stats: Optional[NormStats]) -> dict:
    p = {"task": config.task_name or config.label_field,
         "seed": config.seed, "epoch": epoch, "strategy": config.strategy}
    if stats is not None:
        p["norm_mean"] = stats.mean
        p["norm_std"] = stats.std
    return p


# ---------------------------------------------------------------------------
# Strategy dispatch
# ---------------------------------------------------------------------------

def train(config: TrainConfig, data: Dict[str, Dataset], out_dir) -> TrainResult:
    """Run one experiment with the configured strategy.

    scratch    : cross-entropy only.
    wi         : conv weights initialized from the checkpoint, then scratch.
    wi_freeze  : wi with conv layers 1..max(at.layers) frozen.
    at         : anti-transfer against the checkpoint's conv stack.
    at_inverse : same but encouraging similarity (sign flipped).
    dual_at    : anti-transfer vs checkpoint A, then the result's conv weights
                 initialize a second run with anti-transfer vs checkpoint B.
    """
    out_dir = Path(out_dir)
    s = config.strategy
    if s == "scratch":
        return _train_single(config, data, out_dir)
    if s == "wi":
        return _train_single(config, data, out_dir,
                             init_source=ckpt.load(config.pretrained_checkpoints[0]))
    if s == "wi_freeze":
        return _train_single(config, data, out_dir,
                             init_source=ckpt.load(config.pretrained_checkpoints[0]),
                             freeze_up_to=max(config.at.layers))
    if s in ("at", "at_inverse"):
        return _train_single(config, data, out_dir,
                             at_checkpoint=config.pretrained_checkpoints[0])
    if s == "dual_at":
        stage_cfg = replace(config, strategy="at",
                            pretrained_checkpoints=(config.pretrained_checkpoints[0],))
        intermediate = _train_single(stage_cfg, data, out_dir / "intermediate",
                                     at_checkpoint=config.pretrained_checkpoints[0])
        final_cfg = replace(config, strategy="at",
                            pretrained_checkpoints=(config.pretrained_checkpoints[1],))
        result = _train_single(final_cfg, data, out_dir,
                               at_checkpoint=config.pretrained_checkpoints[1],
                               init_source=intermediate.network,
                               save_init_as="final_init.atck")
        result.summary["intermediate"] = str(intermediate.out_dir / "model.atck")
        result.summary["intermediate_extractor_hashes"] = {
            "before": intermediate.summary["extractor_hash_before"],
            "after": intermediate.summary["extractor_hash_after"]}
        _atomic_write_json(out_dir / "summary.json", result.summary)
        return result
    raise ValueError(f"unknown strategy {s!r}")


def train_on_dir(config: TrainConfig, data_dir, out_dir) -> TrainResult:
    """Load the train/val/test manifests from data_dir and run train()."""
    return train(config, load_split_dir(data_dir), out_dir)


def pretrain(config: TrainConfig, data_dir, out_dir) -> TrainResult:
    """Stage-1 pre-training on an orthogonal task: a scratch run whose
    checkpoint (with task provenance) later serves as extractor or WI source."""
    cfg = replace(config, strategy="scratch")
    return train_on_dir(cfg, data_dir, out_dir)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    value: float
    train_acc: float
    val_acc: float
    test_acc: float
    val_loss: float
    out_dir: str
    best: bool = False


def _sweep(base_config: TrainConfig, data: Dict[str, Dataset], out_dir: Path,
           values: Sequence, make_cfg, label: str,
           select_by: str = "val_accuracy") -> List[SweepRow]:
    if not values:
        raise ValueError(f"empty {label} sweep grid")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: List[SweepRow] = []
    for v in values:
        cfg = make_cfg(v)
        run_dir = out_dir / f"{label}_{v}"
        result = train(cfg, data, run_dir)
        rows.append(SweepRow(
            value=float(v),
            train_acc=result.metrics[result.best_epoch].train_acc,
            val_acc=result.val_accuracy,
            test_acc=result.test_accuracy,
            val_loss=float(min(m.val_ce + m.val_at for m in result.metrics)),
            out_dir=str(run_dir)))
    if select_by == "val_accuracy":
        best_i = max(range(len(rows)), key=lambda i: rows[i].val_acc)
    elif select_by == "val_loss":
        best_i = min(range(len(rows)), key=lambda i: rows[i].val_loss)
    else:
        raise ValueError("select_by must be val_accuracy or val_loss")
    rows[best_i].best = True
    with open(out_dir / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([label, "train_acc", "val_acc", "test_acc", "val_loss", "best"])
        for r in rows:
            w.writerow([r.value, f"{r.train_acc:.4f}", f"{r.val_acc:.4f}",
                        f"{r.test_acc:.4f}", f"{r.val_loss:.6f}", int(r.best)])
    return rows


def sweep_layers(base_config: TrainConfig, data: Dict[str, Dataset], out_dir,
                 layer_range: Sequence[int],
                 select_by: str = "val_accuracy") -> List[SweepRow]:
    """Train once per candidate anti-transfer layer; flag the best row."""
    layer_range = list(layer_range)

    def make_cfg(k):
        return replace(base_config, at=replace(base_config.at, layers=(int(k),)))

    return _sweep(base_config, data, out_dir, layer_range, make_cfg, "layer",
                  select_by)


DEFAULT_BETA_GRID = (0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0)


def sweep_betas(base_config: TrainConfig, data: Dict[str, Dataset], out_dir,
                betas: Sequence[float] = DEFAULT_BETA_GRID,
                select_by: str = "val_accuracy") -> List[SweepRow]:
    """Train once per anti-transfer weight; flag the best row."""
    def make_cfg(b):
        return replace(base_config, at=replace(base_config.at, beta=float(b)))

    return _sweep(base_config, data, out_dir, list(betas), make_cfg, "beta",
                  select_by)
