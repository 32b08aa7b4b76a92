"""SGD with momentum under the poly schedule, mIoU, and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataio import DEFAULT_MEAN, AugmentConfig, SegSample, augment, subtract_mean
from .layers import BatchNorm2d
from .ops import IGNORE_LABEL, LabelError, softmax_cross_entropy
from .tensor import ContractError, NonFiniteError, Tensor, backward, deterministic, no_grad

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, lr: float, op: str):
        super().__init__(f"non-finite values at iteration {iteration} (lr={lr:.6g}) in op '{op}'")
        self.iteration = iteration
        self.lr = lr
        self.op = op


@dataclass
class TrainConfig:
    batch_size: int = 48
    momentum: float = 0.9
    weight_decay: float = 1e-5
    base_lr: float = 0.2
    power: float = 0.9
    max_iter: int = 40000
    crop: Tuple[int, int] = (1024, 1024)
    seed: int = 0
    eval_every: int = 0
    hflip_prob: float = 0.5
    scale_range: Tuple[float, float] = (0.75, 1.75)
    mean: Tuple[float, float, float] = DEFAULT_MEAN

    def __post_init__(self):
        if self.batch_size <= 0 or self.max_iter < 0 or self.eval_every < 0:
            raise ContractError("batch_size must be positive; max_iter, eval_every non-negative")
        if self.base_lr <= 0 or self.power <= 0 or self.weight_decay < 0:
            raise ContractError("base_lr and power must be positive, weight_decay non-negative")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must be in [0, 1), got {self.momentum}")

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(tuple(self.crop), self.hflip_prob, tuple(self.scale_range),
                             tuple(self.mean))


REFERENCE_BATCH = 48


def scaled_lr(batch_size: int, base_lr: float = 0.2, reference_batch: int = REFERENCE_BATCH) -> float:
    """Linear learning-rate scaling from the reference batch size."""
    return base_lr * batch_size / reference_batch


def poly_lr(iteration: int, base_lr: float, max_iter: int, power: float = 0.9) -> float:
    if not 0 <= iteration <= max_iter:
        raise ContractError(f"iteration {iteration} outside [0, {max_iter}]")
    if max_iter == 0:
        return base_lr
    return base_lr * (1.0 - iteration / max_iter) ** power


@dataclass
class OptimizerState:
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def no_decay_names(model) -> set:
    """Parameter names exempt from weight decay (batch-norm scale and shift)."""
    names = set()
    for mname, mod in model.named_modules():
        if isinstance(mod, BatchNorm2d):
            prefix = f"{mname}." if mname else ""
            names.update({prefix + "weight", prefix + "bias"})
    return names


def sgd_step(params: Sequence[Tuple[str, Tensor]], state: OptimizerState, lr: float,
             momentum: float, weight_decay: float, exempt=frozenset()) -> None:
    """In-place update: g' = g + wd*p; v = momentum*v + g'; p -= lr*v.

    Parameters without a gradient are treated as having a zero gradient.
    """
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"gradient of {name} has shape {g.shape}, parameter {p.shape}")
        if weight_decay and name not in exempt:
            g = g + p.data.dtype.type(weight_decay) * p.data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = p.data.dtype.type(momentum) * v + g
        state.velocity[name] = v
        p.data = p.data - p.data.dtype.type(lr) * v
    state.step += 1


# --- metrics -----------------------------------------------------------------

def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                     ignore: int = IGNORE_LABEL) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction has {pred.size} pixels, labels {gt.size}")
    valid = gt != ignore
    for arr, what in ((gt[valid], "label"), (pred[valid], "prediction")):
        bad = (arr < 0) | (arr >= num_classes)
        if bad.any():
            raise LabelError(f"{what} {int(arr[bad][0])} outside [0, {num_classes})")
    idx = gt[valid].astype(np.int64) * num_classes + pred[valid].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray) -> Tuple[List[Optional[float]], Optional[float]]:
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    ious = [float(t / d) if d > 0 else None for t, d in zip(tp, denom)]
    present = [v for v in ious if v is not None]
    return ious, (float(np.mean(present)) if present else None)


def mean_iou(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore: int = IGNORE_LABEL):
    """Per-class IoU (``None`` where a class never occurs in either map) and
    their mean; the mean is ``None`` when every pixel is ignored."""
    return iou_from_confusion(confusion_matrix(pred, gt, num_classes, ignore))


def predict(model, image: np.ndarray, mean=DEFAULT_MEAN) -> np.ndarray:
    """Argmax class map (N, H, W) for float images in [0, 1]."""
    with no_grad():
        logits = model(Tensor(subtract_mean(np.asarray(image, np.float32), mean)))
    return logits.data.argmax(axis=1)


def evaluate(model, samples: Sequence[SegSample], num_classes: int, mean=DEFAULT_MEAN,
             batch_size: int = 8):
    was_training = model.training
    model.eval()
    conf = np.zeros((num_classes, num_classes), np.int64)
    try:
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            img = np.concatenate([s.image for s in chunk])
            lab = np.concatenate([s.labels for s in chunk])
            conf += confusion_matrix(predict(model, img, mean), lab, num_classes)
    finally:
        model.train(was_training)
    ious, miou = iou_from_confusion(conf)
    return ious, miou, conf


# --- loop --------------------------------------------------------------------

@dataclass
class LogEntry:
    iteration: int
    lr: float
    loss: float
    miou: Optional[float] = None

    def csv(self) -> str:
        base = f"{self.iteration},{self.lr!r},{self.loss!r}"
        if self.miou is None:
            return base
        return f"{base},{self.miou!r}"


def batch_order(seed: int, count: int, batch_size: int, iteration: int) -> np.ndarray:
    """Indices for ``iteration``: epochs of seeded permutations, concatenated."""
    start = iteration * batch_size
    out = []
    epoch = start // count
    pos = start % count
    while len(out) < batch_size:
        perm = np.random.default_rng([seed, 0x5EED, epoch]).permutation(count)
        take = perm[pos:pos + batch_size - len(out)]
        out.extend(int(v) for v in take)
        epoch, pos = epoch + 1, 0
    return np.asarray(out)


def make_batch(dataset: Sequence[SegSample], cfg: TrainConfig, iteration: int):
    aug = cfg.augment_config()
    idx = batch_order(cfg.seed, len(dataset), cfg.batch_size, iteration)
    imgs, labs = [], []
    for slot, i in enumerate(idx):
        rng = np.random.default_rng([cfg.seed, iteration, slot])
        s = augment(dataset[i], aug, rng)
        imgs.append(s.image)
        labs.append(s.labels)
    return np.concatenate(imgs), np.concatenate(labs)


def train_loop(model, dataset: Sequence[SegSample], cfg: TrainConfig,
               eval_set: Optional[Sequence[SegSample]] = None, num_classes: Optional[int] = None,
               callback=None):
    """Train ``model`` in place; returns ``(model, log)``."""
    if not dataset:
        raise ContractError("training needs a non-empty dataset")
    num_classes = num_classes or model.spec.num_classes
    state = OptimizerState()
    params = list(model.named_parameters())
    exempt = no_decay_names(model)
    log: List[LogEntry] = []
    model.train()
    with deterministic(True):
        for it in range(cfg.max_iter):
            lr = poly_lr(it, cfg.base_lr, cfg.max_iter, cfg.power)
            img, lab = make_batch(dataset, cfg, it)
            try:
                logits = model(Tensor(img))
                loss = softmax_cross_entropy(logits, lab)
                model.zero_grad()
                backward(loss)
                sgd_step(params, state, lr, cfg.momentum, cfg.weight_decay, exempt)
                for _, p in params:
                    if not np.isfinite(p.data).all():
                        raise NonFiniteError("sgd_step")
            except NonFiniteError as exc:
                raise TrainingDiverged(it, lr, exc.op) from exc
            entry = LogEntry(it, lr, loss.item())
            if cfg.eval_every and ((it + 1) % cfg.eval_every == 0 or it + 1 == cfg.max_iter):
                _, entry.miou, _ = evaluate(model, eval_set if eval_set is not None else dataset,
                                            num_classes, cfg.mean)
            log.append(entry)
            if callback is not None:
                callback(entry)
    return model, log


def log_csv(log: Sequence[LogEntry]) -> str:
    lines = ["iter,lr,loss,miou"]
    lines.extend(e.csv() for e in log)
    return "\n".join(lines) + "\n"
