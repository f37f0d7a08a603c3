"""Mini-batch SGD under the combined main + companion loss."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import network as nw
from .data import Dataset, augment, batches, center_crop
from .evaluation import save_checkpoint, top_k_error
from .network import MAIN, NetworkSpec, ParameterStore
from .supervision import AlphaSchedule, alpha_at, combined_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    alpha0: Optional[float] = None  # overrides every branch's alpha0 when set
    seed: int = 0
    init_std: float = 0.01
    snapshot_every: int = 0
    lr_schedule: Optional[Tuple[Tuple[int, float], ...]] = None
    crop: int = 0
    flip: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def schedule(self) -> Tuple[Tuple[int, float], ...]:
        if self.lr_schedule is not None:
            return tuple(self.lr_schedule)
        return ((round(2 * self.epochs / 3), 0.1),) if self.epochs >= 3 else ()

    def lr_at(self, epoch) -> float:
        lr = self.learning_rate
        for at, mult in self.schedule():
            if epoch >= at:
                lr *= mult
        return lr


class OptimizerState:
    """Per-parameter momentum buffers."""

    def __init__(self, velocity: Dict[str, np.ndarray]):
        self.velocity = velocity

    @classmethod
    def zeros_like(cls, params: ParameterStore) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in params.items()})


def sgd_step(params: ParameterStore, grads: ParameterStore, state: OptimizerState,
             lr, momentum=0.0, weight_decay=0.0):
    """In-place momentum SGD: ``v = m*v - lr*(g + wd*w)``; ``w += v``."""
    if list(params.keys()) != list(grads.keys()) or set(params.keys()) != set(state.velocity):
        raise ValueError("parameter, gradient and optimizer stores have different keys")
    for key, w in params.items():
        g, v = grads[key], state.velocity[key]
        if g.shape != w.shape or v.shape != w.shape:
            raise ValueError(
                f"shape mismatch for {key}: param {w.shape}, grad {g.shape}, velocity {v.shape}"
            )
        v *= momentum
        v -= lr * (g + weight_decay * w)
        w += v
    params.version += 1
    return params, state


@dataclass
class MetricsLog:
    branches: int = 0
    rows: List[dict] = field(default_factory=list)

    @property
    def columns(self) -> List[str]:
        return (
            ["epoch", "alpha", "train_loss_combined", "train_loss_main"]
            + [f"train_loss_branch_{i}" for i in range(self.branches)]
            + ["val_top1_err", "val_top5_err"]
        )

    def append(self, row: dict):
        self.rows.append(row)

    def column(self, name) -> list:
        return [r[name] for r in self.rows]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow(
                [row["epoch"]] + [repr(float(row[c])) for c in self.columns[1:]]
            )
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def evaluate(network, params, data: Dataset, crop=0) -> Tuple[float, float]:
    """Main-head top-1 and top-5 error (top-K when K < 5)."""
    images = center_crop(data.images, crop) if crop else data.images
    probs = nw.predict_proba(network, params, images)
    k5 = min(5, network.num_classes())
    return top_k_error(probs, data.labels, 1), top_k_error(probs, data.labels, k5)


def _augment_batch(x, cfg, rng):
    if not (cfg.crop or cfg.flip):
        return x
    size = cfg.crop or x.shape[-1]
    return np.stack([augment(img, size, cfg.flip and rng.random() < 0.5, rng) for img in x])


def train(spec: NetworkSpec, data: Dataset, val: Optional[Dataset], cfg: TrainingConfig,
          params: Optional[ParameterStore] = None, snapshot_path=None):
    """Train ``spec`` on ``data``; returns ``(params, MetricsLog)``.

    Every branch head is weighted by ``alpha_at(t)`` during epoch ``t``.
    Snapshots go to ``<snapshot_path>.epoch<t>`` every ``cfg.snapshot_every``
    epochs.
    """
    input_shape = data.image_shape
    if cfg.crop:
        input_shape = (input_shape[0], cfg.crop, cfg.crop)
    network = nw.build(spec, input_shape)
    k = network.num_classes()
    for ds in (data, val):
        if ds is not None and ds.labels.size and ds.labels.max() >= k:
            raise ValueError(f"dataset labels exceed the {k} classes of the network")
    if len(data) == 0:
        raise ValueError("training set is empty")
    if params is None:
        params = nw.init_params(network, cfg.seed, cfg.init_std)
    state = OptimizerState.zeros_like(params)
    n_br = len(spec.branches)
    alpha0s = [b.alpha0 if cfg.alpha0 is None else cfg.alpha0 for b in spec.branches]
    metrics = MetricsLog(n_br)
    rng = np.random.default_rng([cfg.seed, 1])

    for epoch in range(cfg.epochs):
        alphas = [alpha_at(AlphaSchedule(a0, cfg.epochs), epoch) for a0 in alpha0s]
        weights = {MAIN: 1.0}
        weights.update({nw.head_name(i): a for i, a in enumerate(alphas)})
        lr = cfg.lr_at(epoch)
        sums = np.zeros(2 + n_br)
        seen = 0
        for b, (x, y) in enumerate(batches(data, cfg.batch_size, cfg.seed, epoch)):
            x = _augment_batch(x, cfg, rng)
            rec = nw.forward(network, params, x)
            losses = nw.head_losses(rec, y)
            per_head = [losses[nw.head_name(i)] for i in range(n_br)]
            total = combined_loss(losses[MAIN], list(zip(alphas, per_head)))
            if not np.isfinite(total):
                raise TrainingDiverged(epoch, b, total)
            grads = nw.backward(network, params, rec, y, weights)
            sgd_step(params, grads, state, lr, cfg.momentum, cfg.weight_decay)
            sums += len(y) * np.array([total, losses[MAIN]] + per_head)
            seen += len(y)
        means = [float(v) for v in sums / seen]
        top1, top5 = evaluate(network, params, val, cfg.crop) if val is not None else (np.nan, np.nan)
        row = {
            "epoch": epoch,
            "alpha": alphas[0] if alphas else 0.0,
            "train_loss_combined": means[0],
            "train_loss_main": means[1],
            "val_top1_err": top1,
            "val_top5_err": top5,
        }
        row.update({f"train_loss_branch_{i}": means[2 + i] for i in range(n_br)})
        metrics.append(row)
        log.info("epoch %d alpha %.4g loss %.5g val top1 %.4g", epoch, row["alpha"],
                 means[0], top1)
        if snapshot_path and cfg.snapshot_every and (epoch + 1) % cfg.snapshot_every == 0:
            save_checkpoint(f"{snapshot_path}.epoch{epoch}", spec, params,
                            {"epoch": epoch, "alpha": row["alpha"], "seed": cfg.seed},
                            input_shape=input_shape)
    return params, metrics
