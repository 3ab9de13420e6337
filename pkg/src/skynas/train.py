"""Mini-batch SGD training and IoU evaluation for detection models."""
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import AugmentConfig, Dataset, augment
from .model import Model, run_network
from .scoring import iou_array
from .tensor.head import decode_batch, kmeans_anchors, yolo_loss
from .tensor.optim import sgd_step
from .tensor.tape import GradTape

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.05
    lr_final: float = 0.002
    warmup_steps: int = 20
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    coord_weight: float = 5.0
    noobj_weight: float = 0.5
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "augment" in d and isinstance(d["augment"], dict):
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_iou: float
    val_iou: float


def fit_anchors(boxes):
    wh = np.stack([boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]], axis=1)
    return tuple(tuple(float(v) for v in a) for a in kmeans_anchors(wh))


def _lr_at(cfg, step, total):
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    t = (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps)
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * min(t, 1.0)))


def _clip(grads, limit):
    if not limit:
        return grads
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm <= limit:
        return grads
    s = limit / norm
    return {k: g * s for k, g in grads.items()}


def evaluate(model: Model, ds: Dataset, batch_size=32, dtype=np.float64):
    """Per-image IoU of the model's best box against ground truth."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = []
    for i in range(0, len(ds), batch_size):
        idx = np.arange(i, min(i + batch_size, len(ds)))
        preds.append(model.predict(ds.float_images(idx, dtype), batch_size))
    pred = np.concatenate(preds)
    return iou_array(pred, ds.boxes), pred


def train(model: Model, train_set: Dataset, cfg: TrainConfig, val_set: Dataset = None, on_epoch=None):
    """Returns ``(trained_model, history)``; ``model`` itself is left untouched.

    Deterministic for fixed inputs and ``cfg.seed``. ``on_epoch`` is called with
    each :class:`EpochRecord` as it completes.
    """
    rng = np.random.default_rng(cfg.seed)
    params, state = dict(model.params), dict(model.state)
    dtype = next(iter(params.values())).dtype if params else np.float64
    velocity = {}
    history = []
    n = len(train_set)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size)) if n else 0
    total = steps_per_epoch * cfg.epochs
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses, ious = [], []
        for s in range(steps_per_epoch):
            idx = np.sort(order[s * cfg.batch_size:(s + 1) * cfg.batch_size])
            if len(idx) < 2:
                continue  # batch statistics need at least two images
            x = train_set.float_images(idx, dtype)
            gt = train_set.boxes[idx]
            x, gt = augment(x, gt, rng, cfg.augment)
            tape = GradTape()
            y, new_state = run_network(model.spec, params, state, x, "train", tape)
            loss, gy = yolo_loss(y, gt, model.anchors, cfg.coord_weight, cfg.noobj_weight)
            grads = _clip(tape.backward(gy.astype(dtype)), cfg.grad_clip)
            params, velocity = sgd_step(
                params, grads, _lr_at(cfg, step, total), cfg.momentum, velocity, cfg.weight_decay
            )
            state = new_state
            losses.append(loss)
            ious.append(iou_array(decode_batch(y, model.anchors), gt))
            step += 1
        trained = model.with_params(params, state)
        rec = EpochRecord(
            epoch=epoch + 1,
            loss=float(np.mean(losses)) if losses else float("nan"),
            train_iou=float(np.concatenate(ious).mean()) if ious else float("nan"),
            val_iou=float(evaluate(trained, val_set)[0].mean()) if val_set is not None and len(val_set) else float("nan"),
        )
        history.append(rec)
        log.info("epoch %d loss %.4f val IoU %.4f", rec.epoch, rec.loss, rec.val_iou)
        if on_epoch is not None:
            on_epoch(rec)
    return model.with_params(params, state), history
