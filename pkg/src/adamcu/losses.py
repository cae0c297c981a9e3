"""Segmentation losses and the total objective."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .mcu import CONTRAST_KEYS
from .sampler import GROUND_TRUTH, PSEUDO

AUX_WEIGHT = 0.4


def ce_pixel(logits, label: int) -> T.Tensor:
    """-log softmax(logits)[label] for one pixel's logit row."""
    logits = T.as_tensor(logits)
    c = logits.shape[-1]
    if not 0 <= label < c:
        raise ValueError(f"ce_pixel: label {label} outside [0, {c})")
    return T.neg(T.pick(T.log_softmax(T.reshape(logits, (1, c))), [label]))


def mean_ce(logits, rows: np.ndarray, labels: np.ndarray) -> T.Tensor:
    """Mean cross entropy over selected flat pixel rows; 0 when none."""
    logits = T.as_tensor(logits)
    c = logits.shape[-1]
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if rows.size == 0:
        return T.Tensor(0.0)
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"mean_ce: label outside [0, {c})")
    flat = T.reshape(logits, (-1, c))
    if rows.size == flat.shape[0] and np.array_equal(rows, np.arange(rows.size)):
        logp = T.log_softmax(flat)
    else:
        logp = T.log_softmax(T.take(flat, rows, unique=True))
    return T.neg(T.mean(T.pick(logp, labels)))


def seg_loss_source(logits, gt: np.ndarray) -> T.Tensor:
    """Mean cross entropy over every pixel."""
    gt = np.asarray(gt).reshape(-1)
    return mean_ce(logits, np.arange(gt.size), gt)


def seg_loss_target(logits, kind: np.ndarray, category: np.ndarray) -> tuple[T.Tensor, T.Tensor]:
    """(ground-truth term, pseudo term), each a mean over its own pixels.

    ``kind``/``category`` are the flattened label-state rows of the batch
    images in the same order as ``logits``.
    """
    kind = np.asarray(kind).reshape(-1)
    category = np.asarray(category).reshape(-1)
    gt_rows = np.flatnonzero(kind == GROUND_TRUTH)
    ps_rows = np.flatnonzero(kind == PSEUDO)
    return (mean_ce(logits, gt_rows, category[gt_rows]),
            mean_ce(logits, ps_rows, category[ps_rows]))


@dataclass
class LossReport:
    seg_source: float = 0.0
    seg_target_gt: float = 0.0
    seg_target_pseudo: float = 0.0
    aux: float = 0.0
    contrast: dict[str, float] = field(default_factory=lambda: {k: 0.0 for k in CONTRAST_KEYS})
    total: float = 0.0

    def parts_sum(self, contrast_weight: float = 1.0) -> float:
        return (self.seg_source + self.seg_target_gt + self.seg_target_pseudo + self.aux
                + contrast_weight * math.fsum(self.contrast.values()))

    def as_dict(self) -> dict[str, float]:
        d = {
            "seg_source": self.seg_source,
            "seg_target_gt": self.seg_target_gt,
            "seg_target_pseudo": self.seg_target_pseudo,
            "aux": self.aux,
        }
        d.update({f"con_{k}": v for k, v in self.contrast.items()})
        d["total"] = self.total
        return d


def total_loss(source_main, source_aux, source_gt: np.ndarray,
               target_main=None, target_aux=None, target_kind=None, target_category=None,
               contrast: dict[str, T.Tensor] | None = None, aux_weight: float = AUX_WEIGHT,
               contrast_weight: float = 1.0) -> tuple[T.Tensor, LossReport]:
    """Segmentation terms + weighted auxiliary cross entropy + contrast terms."""
    terms: dict[str, T.Tensor] = {"seg_source": seg_loss_source(source_main, source_gt)}
    aux = seg_loss_source(source_aux, source_gt)
    if target_main is not None:
        gt_t, ps_t = seg_loss_target(target_main, target_kind, target_category)
        terms["seg_target_gt"], terms["seg_target_pseudo"] = gt_t, ps_t
        agt, aps = seg_loss_target(target_aux, target_kind, target_category)
        aux = T.add(aux, T.add(agt, aps))
    terms["aux"] = T.mul(aux, aux_weight)
    contrast = contrast or {}
    report = LossReport()
    for name, t in list(terms.items()) + [(f"con_{k}", v) for k, v in contrast.items()]:
        if not np.isfinite(t.item()):
            raise FloatingPointError(f"non-finite loss component {name}")
    total = T.Tensor(0.0)
    for t in terms.values():
        total = T.add(total, t)
    for k in CONTRAST_KEYS:
        if k in contrast:
            total = T.add(total, T.mul(contrast[k], contrast_weight))
            report.contrast[k] = contrast[k].item()
    report.seg_source = terms["seg_source"].item()
    report.seg_target_gt = terms.get("seg_target_gt", T.Tensor(0.0)).item()
    report.seg_target_pseudo = terms.get("seg_target_pseudo", T.Tensor(0.0)).item()
    report.aux = terms["aux"].item()
    report.total = total.item()
    if not np.isfinite(report.total):
        raise FloatingPointError("non-finite loss component total")
    return total, report
