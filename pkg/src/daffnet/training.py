"""Losses, Adam, early stopping and the MAP / DAFFNet training loops."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .data import DatasetError, ImageSet, batch_indices, channel_stats, to_batch
from .metrics import subset_accuracy
from .models import DAFFNet, MAP, MapOutput, map_predict
from .nn import Module
from .schema import AttributeSchema
from .tensor import ShapeError, Tensor, backward, clip, log, mean, mul, no_grad, sum_, zero_grad

PROB_FLOOR = 1e-12
_INV_LN2 = 1.0 / math.log(2.0)


class TrainingError(RuntimeError):
    pass


class NonFiniteGradient(TrainingError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}; step aborted")
        self.name = name


@dataclass(frozen=True)
class LossWeights:
    lambda_ap: float = 0.8
    lambda_cls: float = 0.2

    def __post_init__(self):
        if self.lambda_ap < 0 or self.lambda_cls < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


@dataclass
class TrainConfig:
    epochs: int = 100
    patience: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    crop_size: int = 56
    freeze: tuple = ()  # parameter-name prefixes excluded from updates

    def __post_init__(self):
        self.freeze = tuple(self.freeze)
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0 <= self.patience <= self.epochs:
            raise ValueError(f"patience {self.patience} must lie in [0, epochs={self.epochs}]")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2 for batch normalization")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class LabelBatch:
    """One-hot attribute and class targets for a batch."""

    attributes: list  # A arrays of shape [N, P_m]
    classes: np.ndarray  # [N, K]
    provenance: tuple = ()

    def __post_init__(self):
        n = self.classes.shape[0]
        for m, y in enumerate(self.attributes):
            if y.shape[0] != n:
                raise ShapeError(f"attribute {m} targets have {y.shape[0]} rows, classes have {n}")
            if not np.all(y.sum(axis=1) == 1):
                raise ShapeError(f"attribute {m} targets are not one-hot")
        if not np.all(self.classes.sum(axis=1) == 1):
            raise ShapeError("class targets are not one-hot")

    @classmethod
    def from_indices(cls, attr_idx, labels, schema: AttributeSchema, num_classes: int,
                     provenance: Sequence[str] = ()) -> "LabelBatch":
        attr_idx = np.asarray(attr_idx, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if attr_idx.ndim != 2 or attr_idx.shape[1] != len(schema):
            raise ShapeError(f"attribute index matrix {attr_idx.shape} does not fit {len(schema)} attributes")
        if np.any(attr_idx < 0):
            raise DatasetError("attribute targets requested for samples without attribute labels")
        eye = [np.eye(p) for p in schema.sizes]
        attrs = [eye[m][attr_idx[:, m]] for m in range(len(schema))]
        return cls(attrs, np.eye(num_classes)[labels], tuple(provenance))


# losses ----------------------------------------------------------------------
def _log2(p: Tensor) -> Tensor:
    return log(clip(p, PROB_FLOOR, 1.0)) * _INV_LN2


def deep_supervision_loss(map_out, labels: LabelBatch, w: LossWeights = LossWeights()) -> Tensor:
    """Deep-supervision loss: weighted attribute log-loss plus auxiliary class log-loss, base 2.

    ``map_out`` is a MapOutput or a pair ``(attribute prob list, class probs)``.
    The sum over samples is averaged over the batch.
    """
    if isinstance(map_out, MapOutput):
        attr_probs, class_probs = map_out.attr_probs(), map_out.class_probs()
    else:
        attr_probs, class_probs = map_out
    a = len(attr_probs)
    if a != len(labels.attributes):
        raise ShapeError(f"loss: {a} attribute outputs but {len(labels.attributes)} attribute targets")
    if class_probs.shape != labels.classes.shape:
        raise ShapeError(f"loss: class output {class_probs.shape} vs targets {labels.classes.shape}")
    attr_term = None
    for m, (p, y) in enumerate(zip(attr_probs, labels.attributes)):
        if p.shape != y.shape:
            raise ShapeError(f"loss: attribute {m} output {p.shape} vs targets {y.shape}")
        t = sum_(mul(_log2(p), Tensor(y.astype(p.dtype))), axis=1)
        attr_term = t if attr_term is None else attr_term + t
    cls_term = sum_(mul(_log2(class_probs), Tensor(labels.classes.astype(class_probs.dtype))), axis=1)
    per_sample = attr_term * (w.lambda_ap / a) + cls_term * w.lambda_cls
    return -mean(per_sample)


def cross_entropy(probs: Tensor, onehot) -> Tensor:
    """Mean natural-log cross-entropy of probability rows against one-hot targets."""
    onehot = np.asarray(onehot)
    if probs.shape != onehot.shape:
        raise ShapeError(f"cross_entropy: probs {probs.shape} vs targets {onehot.shape}")
    rows = probs.data.sum(axis=1)
    if np.any(np.abs(rows - 1.0) > 1e-4) or np.any(probs.data < 0):
        raise ValueError("cross_entropy: probability rows must be non-negative and sum to 1")
    ll = sum_(mul(log(clip(probs, PROB_FLOOR, 1.0)), Tensor(onehot.astype(probs.dtype))), axis=1)
    return -mean(ll)


# optimizer -------------------------------------------------------------------
class Adam:
    """Adam with bias correction over a list of ``(name, parameter)`` pairs."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self) -> None:
        zero_grad(p for _, p in self.params)

    def step(self) -> None:
        # validate everything first so a bad gradient leaves every parameter untouched
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(name)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


# early stopping ----------------------------------------------------------------
class EarlyStopping:
    """Track the best monitored value; stop after ``patience`` non-improving epochs.

    With ``patience=0`` training stops at the first epoch that does not improve.
    """

    def __init__(self, patience: int, mode: str = "min"):
        if mode not in ("min", "max"):
            raise ValueError(f"mode must be 'min' or 'max', got {mode!r}")
        self.patience = patience
        self.mode = mode
        self.best = math.inf if mode == "min" else -math.inf
        self.best_epoch = -1
        self.wait = 0

    def improved(self, value: float) -> bool:
        return value < self.best if self.mode == "min" else value > self.best

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value``; return True when training should stop."""
        if self.improved(value):
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def _snapshot(model: Module) -> dict:
    return {k: np.array(v, copy=True) for k, v in model.state_dict().items()}


def _select_params(model: Module, names_params, freeze: Sequence[str]) -> list:
    return [(n, p) for n, p in names_params if not any(n.startswith(f) for f in freeze)]


def _fit(model: Module, params: list, train: ImageSet, cfg: TrainConfig,
         batch_loss: Callable, validate: Callable, monitor: str, mode: str) -> dict:
    """Shared epoch loop. ``validate`` returns a dict of metrics containing ``monitor``."""
    if len(train) < 2:
        raise DatasetError("training split needs at least 2 samples")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(params, lr=cfg.lr)
    stopper = EarlyStopping(cfg.patience, mode)
    best_state = _snapshot(model)
    epochs = []
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        model.train()
        total, count = 0.0, 0
        for idx in batch_indices(len(train), cfg.batch_size, rng):
            x = Tensor(to_batch(train.images[idx], "random", cfg.crop_size, rng))
            loss = batch_loss(x, idx)
            opt.zero_grad()
            backward(loss)
            opt.step()
            total += float(loss.data) * len(idx)
            count += len(idx)
        model.eval()
        val = validate()
        row = {"epoch": epoch, "train_loss": total / count, **val,
               "seconds": time.perf_counter() - t0}
        epochs.append(row)
        stop = stopper.update(epoch, val[monitor])
        if stopper.best_epoch == epoch:
            best_state = _snapshot(model)
        if stop:
            break
    model.load_state_dict(best_state)
    model.eval()
    return {
        "monitor": monitor,
        "mode": mode,
        "best_epoch": stopper.best_epoch,
        "best_value": stopper.best,
        "epochs_run": len(epochs),
        "stopped_early": len(epochs) < cfg.epochs,
        "wall_time": time.perf_counter() - start,
        "config": asdict(cfg),
        "epochs": epochs,
    }


# inference helpers ---------------------------------------------------------------
def _eval_batches(data: ImageSet, cfg: TrainConfig, batch_size: Optional[int] = None):
    for idx in batch_indices(len(data), batch_size or max(cfg.batch_size, 64)):
        yield idx, Tensor(to_batch(data.images[idx], "center", cfg.crop_size))


def map_outputs(model: MAP, data: ImageSet, cfg: TrainConfig) -> tuple:
    """Eval-mode attribute probabilities (list of [N, P_m]) and class probabilities [N, K]."""
    model.eval()
    attr = [[] for _ in model.schema.sizes]
    cls = []
    with no_grad():
        for _, x in _eval_batches(data, cfg):
            out = model(x)
            for m, p in enumerate(out.attr_probs()):
                attr[m].append(p.data)
            cls.append(out.class_probs().data)
    if not cls:
        raise DatasetError("cannot evaluate an empty split")
    return [np.concatenate(a) for a in attr], np.concatenate(cls)


def predict_attributes(model: MAP, data: ImageSet, cfg: TrainConfig) -> np.ndarray:
    attr, _ = map_outputs(model, data, cfg)
    return map_predict(attr)


def predict_proba(model: DAFFNet, data: ImageSet, cfg: TrainConfig) -> np.ndarray:
    model.eval()
    rows = []
    with no_grad():
        for _, x in _eval_batches(data, cfg):
            rows.append(model(x).data)
    if not rows:
        raise DatasetError("cannot evaluate an empty split")
    return np.concatenate(rows)


def map_validation(model: MAP, data: ImageSet, cfg: TrainConfig, w: LossWeights) -> dict:
    attr, cls = map_outputs(model, data, cfg)
    labels = LabelBatch.from_indices(data.attributes, data.labels, model.schema, cls.shape[1])
    loss = deep_supervision_loss(([Tensor(a.astype(np.float64)) for a in attr], Tensor(cls.astype(np.float64))),
                    labels, w)
    return {"val_loss": float(loss.data),
            "val_subset_accuracy": subset_accuracy(data.attributes, map_predict(attr))}


# pipelines ---------------------------------------------------------------------
def _require_attributes(data: ImageSet, what: str) -> None:
    if len(data) == 0:
        raise DatasetError(f"{what} split is empty")
    if not data.manifest.has_attributes().all():
        missing = int((~data.manifest.has_attributes()).sum())
        raise DatasetError(f"{what} split has {missing} samples without attribute labels")


def train_map_dsl(model: MAP, train: ImageSet, val: ImageSet, cfg: TrainConfig,
                  w: LossWeights = LossWeights()) -> tuple:
    """Train MAP on the deep-supervision loss; keep the lowest-validation-loss state."""
    _require_attributes(train, "training")
    _require_attributes(val, "validation")
    if train.manifest.schema != model.schema:
        raise DatasetError("dataset schema does not match the model schema")
    model.backbone.norm.set_stats(*channel_stats(train.images))
    attrs, labels, k = train.attributes, train.labels, model.cfg.num_classes

    def batch_loss(x, idx):
        return deep_supervision_loss(model(x), LabelBatch.from_indices(attrs[idx], labels[idx], model.schema, k), w)

    params = _select_params(model, model.named_parameters(), cfg.freeze)
    history = _fit(model, params, train, cfg, batch_loss,
                   lambda: map_validation(model, val, cfg, w), "val_loss", "min")
    history["loss_weights"] = asdict(w)
    return model, history


def pseudo_label(model: MAP, data: ImageSet, cfg: TrainConfig) -> ImageSet:
    """Fill missing attribute labels with MAP predictions flagged as pseudo.

    Samples that already carry attribute labels keep them.
    """
    preds = predict_attributes(model, data, cfg)
    fill = {r.path: preds[i] for i, r in enumerate(data.manifest.records) if r.attributes is None}
    return ImageSet(data.manifest.with_attributes(fill, "pseudo"), data.images)


def train_map_ssl(model: MAP, true_set: ImageSet, pseudo_sets: Sequence[ImageSet], val: ImageSet,
                  cfg: TrainConfig, w: LossWeights = LossWeights()) -> tuple:
    """Retrain MAP on the union of truly and pseudo labelled samples."""
    union = ImageSet.concat([true_set, *pseudo_sets]) if pseudo_sets else true_set
    model, history = train_map_dsl(model, union, val, cfg, w)
    history["union_size"] = len(union)
    return model, history


def daffnet_validation(model: DAFFNet, data: ImageSet, cfg: TrainConfig) -> dict:
    probs = predict_proba(model, data, cfg)
    onehot = np.eye(model.cfg.num_classes)[data.labels]
    loss = cross_entropy(Tensor(probs.astype(np.float64)), onehot)
    acc = float(np.mean(np.argmax(probs, axis=1) == data.labels))
    return {"val_loss": float(loss.data), "val_accuracy": acc}


def train_daffnet(model: DAFFNet, train: ImageSet, val: ImageSet, cfg: TrainConfig) -> tuple:
    """Train backbone, MAE and decoder on class cross-entropy with MAP frozen.

    The returned model holds the highest-validation-accuracy state.
    """
    if model.cfg.mfe != "none" and model.map is None:
        raise TrainingError("DAFFNet with morphological features needs a trained MAP")
    if len(train) == 0 or len(val) == 0:
        raise DatasetError("training and validation splits must be non-empty")
    model.backbone.norm.set_stats(*channel_stats(train.images))
    eye = np.eye(model.cfg.num_classes)
    labels = train.labels

    def batch_loss(x, idx):
        return cross_entropy(model(x), eye[labels[idx]])

    params = _select_params(model, model.trainable_parameters(), cfg.freeze)
    history = _fit(model, params, train, cfg, batch_loss,
                   lambda: daffnet_validation(model, val, cfg), "val_accuracy", "max")
    return model, history
