"""Loss, optimizer, schedule, training loop and segmentation metrics."""
from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .models import Network, forward_logits, predict
from .tensor import Tensor

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or Inf; ``step`` is the 0-based global step."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


def cross_entropy_loss(logits: Tensor, mask: np.ndarray) -> Tensor:
    return ops.cross_entropy(logits, mask)


# -- optimizer ----------------------------------------------------------------------

@dataclass
class OptimState:
    lr0: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], st: OptimState,
              lr_t: float) -> None:
    """One bias-corrected Adam update, in place.

    Raises :class:`NonFiniteGradientError` (without touching anything) if any
    gradient is non-finite. Missing gradients count as zero.
    """
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for tensor of shape {p.shape}")
    if not st.m:
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
    st.t += 1
    c1 = 1.0 - st.beta1 ** st.t
    c2 = 1.0 - st.beta2 ** st.t
    for p, g, m, v in zip(params, grads, st.m, st.v):
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * (g * g)
        p.data -= (lr_t * (m / c1) / (np.sqrt(v / c2) + st.eps)).astype(p.dtype)


def cosine_lr(lr0: float, t: int, total: int, lr_min: float = 0.0) -> float:
    if total < 1 or not 0 <= t <= total:
        raise ValueError(f"need 0 <= t <= T and T >= 1, got t={t}, T={total}")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))


# -- metrics ------------------------------------------------------------------------

class ConfusionMatrix:
    """``counts[true, pred]`` pixel counts over ``k`` classes."""

    def __init__(self, k: int):
        self.k = k
        self.counts = np.zeros((k, k), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred: np.ndarray, truth: np.ndarray) -> None:
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
        if pred.size == 0:
            return
        for arr in (pred, truth):
            if arr.min() < 0 or arr.max() >= self.k:
                raise ValueError(f"class index outside [0, {self.k})")
        idx = truth.ravel().astype(np.int64) * self.k + pred.ravel().astype(np.int64)
        self.counts += np.bincount(idx, minlength=self.k * self.k).reshape(self.k, self.k)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.k)
        out.counts = self.counts + other.counts
        return out


def confusion_accumulate(cm: ConfusionMatrix, pred: np.ndarray, truth: np.ndarray) -> None:
    cm.accumulate(pred, truth)


@dataclass
class Metrics:
    oa: float
    aa: float
    kappa: float
    miou: float
    fwiou: float
    f1: float
    recall: np.ndarray
    precision: np.ndarray
    iou: np.ndarray
    f1_per_class: np.ndarray

    def report(self) -> str:
        lines = [f"{k}={getattr(self, k):.6f}" for k in ("oa", "aa", "kappa", "miou", "fwiou", "f1")]
        lines.append("class,recall,precision,iou,f1")
        for c in range(len(self.iou)):
            vals = (self.recall[c], self.precision[c], self.iou[c], self.f1_per_class[c])
            lines.append(",".join([str(c)] + [_fmt(v) for v in vals]))
        return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else f"{v:.6f}"


def compute_metrics(cm: ConfusionMatrix) -> Metrics:
    """OA, AA, kappa, mIoU, FWIoU and macro F1 from pooled counts.

    Classes absent from both truth and prediction are left out of the class
    means (their per-class entries are NaN).
    """
    m = cm.counts.astype(np.float64)
    total = m.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(m)
    rows = m.sum(axis=1)
    cols = m.sum(axis=0)
    oa = diag.sum() / total
    with np.errstate(divide="ignore", invalid="ignore"):
        recall = np.where(rows > 0, diag / rows, np.nan)
        precision = np.where(cols > 0, diag / cols, np.nan)
        union = rows + cols - diag
        present = (rows + cols) > 0
        iou = np.where(present, diag / union, np.nan)
        f1c = np.where(present, 2 * diag / (rows + cols), np.nan)
    pe = float((rows * cols).sum() / (total * total))
    kappa = 1.0 if pe == 1.0 else (oa - pe) / (1.0 - pe)
    fwiou = float(np.nansum((rows / total) * np.where(present, iou, 0.0)))
    return Metrics(
        oa=float(oa),
        aa=float(np.mean(recall[rows > 0])),
        kappa=float(kappa),
        miou=float(np.mean(iou[present])),
        fwiou=fwiou,
        f1=float(np.mean(f1c[present])),
        recall=recall, precision=precision, iou=iou, f1_per_class=f1c,
    )


def evaluate(net: Network, images: np.ndarray, masks: np.ndarray, batch_size: int = 8,
             fused: bool = False) -> ConfusionMatrix:
    cm = ConfusionMatrix(net.cfg.classes)
    for i in range(0, len(images), batch_size):
        cm.accumulate(predict(net, images[i:i + batch_size], fused=fused), masks[i:i + batch_size])
    return cm


# -- training loop --------------------------------------------------------------------

@dataclass
class LogRow:
    epoch: int
    step: int
    lr: float
    train_loss: float
    val_miou: float

    def csv(self) -> str:
        return f"{self.epoch},{self.step},{self.lr!r},{self.train_loss!r},{self.val_miou!r}"


CSV_HEADER = "epoch,step,lr,train_loss,val_miou"


def fit(net: Network, train: tuple[np.ndarray, np.ndarray], val: Optional[tuple[np.ndarray, np.ndarray]],
        epochs: int, batch_size: int = 8, seed: int = 0, lr0: float = 3e-4, lr_min: float = 0.0,
        state: Optional[OptimState] = None,
        on_epoch: Optional[Callable[[LogRow], None]] = None) -> list[LogRow]:
    """Train ``net`` in place with Adam and per-step cosine annealing.

    ``train`` and ``val`` are ``(images [N,C,H,W], masks [N,H,W])`` pairs.
    Each epoch row records the global step count, the last learning rate used,
    the mean training loss and the validation mIoU (NaN without a val set).
    """
    images, masks = train
    n = len(images)
    if n == 0:
        raise ValueError("empty training set")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    steps_per_epoch = math.ceil(n / batch_size)
    total = epochs * steps_per_epoch
    state = state if state is not None else OptimState(lr0=lr0)
    params = net.parameters()
    rng = random.Random(seed)
    rows: list[LogRow] = []
    step = 0
    for epoch in range(1, epochs + 1):
        order = list(range(n))
        rng.shuffle(order)
        losses = []
        lr = lr0
        for b in range(0, n, batch_size):
            idx = order[b:b + batch_size]
            x = Tensor(images[idx].astype(net.dtype, copy=False))
            net.zero_grad()
            loss = cross_entropy_loss(forward_logits(net, x, training=True), masks[idx])
            loss.backward()
            lr = cosine_lr(lr0, step, total, lr_min)
            try:
                adam_step(params, [p.grad for p in params], state, lr)
            except NonFiniteGradientError as exc:
                raise NonFiniteGradientError(str(exc), step) from exc
            losses.append(loss.item())
            step += 1
        miou = float("nan")
        if val is not None and len(val[0]):
            miou = compute_metrics(evaluate(net, val[0], val[1], batch_size)).miou
        row = LogRow(epoch, step, lr, float(np.mean(losses)), miou)
        log.info("epoch %d step %d loss %.5f val_miou %.4f", epoch, step, row.train_loss, miou)
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return rows


def write_log(rows: Sequence[LogRow], path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in rows:
            fh.write(r.csv() + "\n")
