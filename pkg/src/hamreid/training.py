"""Joint ID + batch-hard triplet loss, training tricks and the SGD loop."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .heads import BranchOutput
from .tensor import Tape, Tensor, make_rng

log = logging.getLogger(__name__)

IMAGE_MEAN = np.array([0.485, 0.456, 0.406])
IMAGE_STD = np.array([0.229, 0.224, 0.225])


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 1.0
    squared: bool = False

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"triplet margin must be >= 0, got {self.margin}")


@dataclass(frozen=True)
class SmoothingConfig:
    epsilon: float = 0.1

    def __post_init__(self):
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"label smoothing epsilon must be in [0, 1), got {self.epsilon}")

    def targets(self, labels: np.ndarray, num_ids: int) -> np.ndarray:
        q = np.full((len(labels), num_ids), self.epsilon / num_ids)
        q[np.arange(len(labels)), labels] += 1.0 - self.epsilon
        return q


def log_softmax(logits: Tensor) -> Tensor:
    # the row max is a constant shift, so it needs no gradient
    shift = logits.data.max(axis=1, keepdims=True)
    z = logits - shift
    return z - T.log(T.sum(T.exp(z), 1, keepdims=True))


def id_loss(logits: Tensor, labels, smooth: SmoothingConfig = SmoothingConfig()) -> Tensor:
    """Batch-mean cross-entropy against label-smoothed targets."""
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be {n} class indices in [0, {k})")
    q = smooth.targets(labels, k)
    return T.sum(log_softmax(logits) * q) * (-1.0 / n)


@dataclass
class TripletStats:
    anchors: int = 0
    skipped: int = 0
    active: int = 0  # anchors with a positive hinge


def hardest_pairs(features: np.ndarray, labels: np.ndarray, squared: bool = False):
    """Per anchor: index of the farthest positive and the nearest negative.

    Anchors lacking a positive (other than themselves) or a negative get -1.
    """
    diff = features[:, None, :] - features[None, :, :]
    d = np.einsum("ijk,ijk->ij", diff, diff)
    if not squared:
        d = np.sqrt(d)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    neg = ~same
    pos_idx = np.where(pos.any(1), np.where(pos, d, -np.inf).argmax(1), -1)
    neg_idx = np.where(neg.any(1), np.where(neg, d, np.inf).argmin(1), -1)
    return pos_idx, neg_idx


def _pair_distance(a: Tensor, b: Tensor, squared: bool) -> Tensor:
    s = T.sum(T.square(a - b), 1)
    return s if squared else T.sqrt(s)


def triplet_loss(features: Tensor, labels, cfg: TripletConfig = TripletConfig(),
                 stats: TripletStats | None = None) -> Tensor:
    """Batch-hard triplet loss averaged over anchors that have both a positive and a negative."""
    labels = np.asarray(labels)
    pos_idx, neg_idx = hardest_pairs(features.data, labels, cfg.squared)
    valid = np.flatnonzero((pos_idx >= 0) & (neg_idx >= 0))
    if stats is not None:
        stats.anchors += len(valid)
        stats.skipped += len(labels) - len(valid)
    if len(valid) == 0:
        return Tensor(0.0)
    anchors = T.take_rows(features, valid)
    d_ap = _pair_distance(anchors, T.take_rows(features, pos_idx[valid]), cfg.squared)
    d_an = _pair_distance(anchors, T.take_rows(features, neg_idx[valid]), cfg.squared)
    hinge = T.relu(d_ap - d_an + cfg.margin)
    if stats is not None:
        stats.active += int((hinge.data > 0).sum())
    return T.mean(hinge)


@dataclass
class LossTerms:
    total: Tensor
    id_loss: float
    tp_loss: float
    triplet: TripletStats = field(default_factory=TripletStats)


def total_loss(outputs: Sequence[BranchOutput], labels, smooth: SmoothingConfig = SmoothingConfig(),
               triplet: TripletConfig = TripletConfig()) -> LossTerms:
    """Mean ID loss over branches plus mean triplet loss over branches."""
    if not outputs:
        raise ValueError("no branch outputs")
    stats = TripletStats()
    ids = [id_loss(o.logits, labels, smooth) for o in outputs]
    tps = [triplet_loss(o.f_tri, labels, triplet, stats) for o in outputs]
    id_term = ids[0]
    for x in ids[1:]:
        id_term = id_term + x
    tp_term = tps[0]
    for x in tps[1:]:
        tp_term = tp_term + x
    id_term = id_term * (1.0 / len(ids))
    tp_term = tp_term * (1.0 / len(tps))
    return LossTerms(id_term + tp_term, id_term.item(), tp_term.item(), stats)


# ---------------------------------------------------------------------------
# schedule and augmentation


def warmup_lr(e: int) -> float:
    """Linear warm-up to 3e-4 over 10 epochs, then 0.01 stepping down by halves.

    Epochs past 150 hold the last value.
    """
    if e < 1:
        raise ValueError(f"epochs are 1-based, got {e}")
    if e <= 10:
        return 3 * e / 100_000  # == 3e-4 * e / 10, correctly rounded
    if e <= 60:
        return 0.01
    if e <= 90:
        return 0.005
    if e <= 120:
        return 0.0025
    return 0.00125


@dataclass(frozen=True)
class ErasingConfig:
    probability: float = 0.5
    area: tuple[float, float] = (0.02, 0.4)
    aspect: tuple[float, float] = (0.3, 10 / 3)
    attempts: int = 100


def random_erase(img: np.ndarray, cfg: ErasingConfig, rng: np.random.Generator):
    """Maybe overwrite one rectangle of a ``3×H×W`` image with uniform noise.

    Returns ``(image, (top, left, h, w))`` or ``(image, None)`` when untouched.
    """
    if rng.uniform() >= cfg.probability:
        return img, None
    _, h, w = img.shape
    for _ in range(cfg.attempts):
        area = rng.uniform(*cfg.area) * h * w
        aspect = rng.uniform(*cfg.aspect)
        eh = int(round(math.sqrt(area * aspect)))
        ew = int(round(math.sqrt(area / aspect)))
        if 0 < eh < h and 0 < ew < w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            out = img.copy()
            out[:, top : top + eh, left : left + ew] = rng.uniform(size=(img.shape[0], eh, ew))
            return out, (top, left, eh, ew)
    return img, None


@dataclass
class PkBatch:
    indices: np.ndarray
    labels: np.ndarray
    resampled: list = field(default_factory=list)  # labels drawn with replacement


def pk_sample(labels, P: int, K: int, rng: np.random.Generator) -> PkBatch:
    """P distinct identities, K images each; identities short of K are resampled."""
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ValueError("P×K sampling needs at least 2 identities")
    if len(uniq) < P:
        raise ValueError(f"P={P} exceeds the {len(uniq)} available identities")
    chosen = rng.choice(uniq, size=P, replace=False)
    idx, lab, short = [], [], []
    for pid in chosen:
        pool = np.flatnonzero(labels == pid)
        replace = len(pool) < K
        if replace:
            short.append(pid.item())
        idx.extend(rng.choice(pool, size=K, replace=replace).tolist())
        lab.extend([pid] * K)
    return PkBatch(np.asarray(idx), np.asarray(lab), short)


# ---------------------------------------------------------------------------
# optimizer and loop


@dataclass
class Sgd:
    """Momentum SGD: ``v = m*v - lr*(g + wd*p); p += v``."""

    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p)
            v *= self.momentum
            v -= lr * (g + self.weight_decay * p)
            p += v


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    P: int = 16
    K: int = 4
    batches_per_epoch: int | None = None  # default: train images // (P*K), at least 1
    margin: float = 1.0
    smoothing: float = 0.1
    erasing: ErasingConfig = field(default_factory=ErasingConfig)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    checkpoint_every: int = 0

    def validate(self, num_ids: int | None = None) -> None:
        if self.epochs < 1 or self.P < 2 or self.K < 1:
            raise ValueError("need epochs >= 1, P >= 2 and K >= 1")
        if num_ids is not None and self.P > num_ids:
            raise ValueError(f"P={self.P} exceeds the {num_ids} training identities")
        if not 0 <= self.erasing.probability <= 1:
            raise ValueError("erasing probability must lie in [0, 1]")
        TripletConfig(self.margin)
        SmoothingConfig(self.smoothing)

    @property
    def batch_size(self) -> int:
        return self.P * self.K


@dataclass
class EpochLog:
    epoch: int
    lr: float
    id_loss: float
    tp_loss: float
    total: float
    wall_ms: float


class TrainingDiverged(RuntimeError):
    pass


def normalize(images: np.ndarray, mean=IMAGE_MEAN, std=IMAGE_STD) -> np.ndarray:
    return (images - mean.reshape(1, 3, 1, 1)) / std.reshape(1, 3, 1, 1)


METRIC_FIELDS = ("epoch", "lr", "id_loss", "tp_loss", "total", "wall_ms")


def train_loop(model, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig, seed: int = 0,
               out_dir: str | Path | None = None,
               on_checkpoint: Callable[[int, Path], None] | None = None,
               lr_fn: Callable[[int], float] = warmup_lr) -> list[EpochLog]:
    """Train ``model`` in place on ``images`` (``N×3×H×W`` in [0, 1]) with class ``labels``.

    Every random draw is keyed by (seed, epoch, batch, image), so results do
    not depend on anything but the inputs.
    """
    labels = np.asarray(labels, dtype=np.intp)
    cfg.validate(len(np.unique(labels)))
    smooth = SmoothingConfig(cfg.smoothing)
    trip = TripletConfig(cfg.margin)
    opt = Sgd(cfg.momentum, cfg.weight_decay)
    nb = cfg.batches_per_epoch or max(1, len(images) // cfg.batch_size)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
    history = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            lr = lr_fn(epoch)
            sums = np.zeros(3)
            for b in range(nb):
                batch = pk_sample(labels, cfg.P, cfg.K, make_rng(seed, epoch, b, 0xBA7C))
                x = np.empty((len(batch.indices),) + images.shape[1:])
                for j, i in enumerate(batch.indices):
                    x[j], _ = random_erase(images[i], cfg.erasing, make_rng(seed, epoch, b, j))
                tape = Tape()
                res = model.forward(normalize(x), model.scope(tape), train=True)
                terms = total_loss(res.outputs, batch.labels, smooth, trip)
                total = terms.total.item()
                if not np.isfinite(total):
                    if out is not None:
                        (out / "nan_batch.json").write_text(json.dumps(
                            {"epoch": epoch, "batch": b, "seed": seed,
                             "indices": batch.indices.tolist()}))
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {b}")
                grads = tape.backward(terms.total).by_name()
                opt.step(model.params, grads, lr)
                sums += (terms.id_loss, terms.tp_loss, total)
            sums /= nb
            row = EpochLog(epoch, lr, *sums.tolist(), (time.perf_counter() - t0) * 1e3)
            history.append(row)
            log.info("epoch %d lr %.6g id %.4f tp %.4f", epoch, lr, row.id_loss, row.tp_loss)
            if writer is not None:
                writer.writerow([epoch, repr(lr), repr(row.id_loss), repr(row.tp_loss),
                                 repr(row.total), f"{row.wall_ms:.1f}"])
                fh.flush()
            if (out is not None and on_checkpoint is not None and cfg.checkpoint_every
                    and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs)):
                on_checkpoint(epoch, out / f"epoch{epoch:04d}.ckpt")
    finally:
        if writer is not None:
            fh.close()
    return history
