"""Training pipeline, evaluation and the ablation harness."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import segnet
from . import tensor as T
from .centers import CategoryCenters, Dccm, compute_centers, confusion_rates
from .config import RunConfig
from .losses import LossReport, total_loss
from .mcu import LEVELS, ImagePool, Level, build_units, select_anchors, total_contrastive_loss
from .sampler import (FROM_MEDIUM, GROUND_TRUTH, PSEUDO, BudgetState, LabelState,
                      annotate_image, update_threshold)
from .synthdata import Benchmark, SynthDataset, make_benchmark
from .uncertainty import Thresholds, partition, uncertainty_score

log = logging.getLogger(__name__)

# variant name -> (target budget used, AS, MCU image levels, MCU domain level, DCCM)
VARIANTS: dict[str, tuple[bool, bool, bool, bool, bool]] = {
    "SourceOnly": (False, False, False, False, False),
    "AL(w/o AS)": (True, False, False, False, False),
    "AL(w AS)": (True, True, False, False, False),
    "AL(w MCU_i)": (True, True, True, False, False),
    "AL(w MCU_d)": (True, True, True, True, False),
    "FullModel": (True, True, True, True, True),
}


def variant_config(base: RunConfig, name: str) -> RunConfig:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    cfg = base.copy()
    use_budget, as_, mi, md, dc = VARIANTS[name]
    t = cfg.train
    if not use_budget:
        t.budget = 0.0
    t.active_sampling, t.mcu_image, t.mcu_domain, t.dccm = as_, mi, md, dc
    cfg.sampler.adaptive = as_
    t.validate()
    return cfg


@dataclass
class Seeds:
    data: int
    init: int
    pretrain: int
    adapt: int

    @classmethod
    def derive(cls, master: int) -> "Seeds":
        s = np.random.SeedSequence(master).generate_state(4)
        return cls(*(int(x) for x in s))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def poly_lr(base: float, step: int, total: int, power: float = 0.9) -> float:
    return base * (1.0 - step / total) ** power if total > 0 else base


# ---------------------------------------------------------------- evaluation


def confusion_matrix(pred: np.ndarray, true: np.ndarray, num_classes: int) -> np.ndarray:
    idx = np.asarray(true, dtype=np.int64).reshape(-1) * num_classes + np.asarray(pred, dtype=np.int64).reshape(-1)
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-category IoU (nan where a category is absent from both prediction
    and truth) and their mean over the remaining categories."""
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = np.full(len(tp), np.nan)
    present = union > 0
    iou[present] = tp[present] / union[present]
    return iou, math.fsum(iou[present]) / int(present.sum()) if present.any() else float("nan")


def evaluate(net: segnet.SegNet, dataset: SynthDataset, batch: int = 10) -> dict:
    cm = np.zeros((dataset.num_classes, dataset.num_classes), dtype=np.int64)
    for i in range(0, len(dataset), batch):
        pred = segnet.predict(net, dataset.images[i:i + batch].astype(np.float64))
        cm += confusion_matrix(pred, dataset.labels[i:i + batch], dataset.num_classes)
    iou, miou = iou_from_confusion(cm)
    return {"iou": iou, "miou": miou, "confusion": cm}


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    net: segnet.SegNet
    records: list[dict]
    labels: LabelState
    budget: BudgetState
    thresholds: Thresholds
    dccm: Dccm
    centers: CategoryCenters
    label_log: dict = field(default_factory=dict)

    def metrics_lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True) for r in self.records]


def pretrain(cfg: RunConfig, source: SynthDataset, seeds: Seeds | None = None) -> segnet.SegNet:
    """Supervised source-only training of a freshly initialised network."""
    seeds = seeds or Seeds.derive(cfg.seed)
    net = segnet.init(cfg.net, seeds.init)
    t = cfg.train
    if t.pretrain_epochs == 0:
        return net
    rng = np.random.default_rng(seeds.pretrain)
    per_iter = t.source_per_iter + t.target_per_iter
    iters_per_epoch = math.ceil(len(source) / per_iter)
    total = t.pretrain_epochs * iters_per_epoch
    opt = segnet.SGD(net.parameters(), t.momentum, t.weight_decay)
    step = 0
    for _ in range(t.pretrain_epochs):
        order = rng.permutation(len(source))
        for b in range(iters_per_epoch):
            idx = order[b * per_iter:(b + 1) * per_iter]
            with T.Tape():
                out = segnet.forward(net, source.images[idx].astype(np.float64))
                loss, _ = total_loss(out.main_logits, out.aux_logits, source.labels[idx],
                                     aux_weight=t.aux_weight)
                grads = T.backward(loss)
            opt.step(grads, poly_lr(t.pretrain_lr, step, total, t.poly_power))
            step += 1
    return net


def _float(x) -> float:
    return float(x)


def train(cfg: RunConfig, bench: Benchmark, net: segnet.SegNet | None = None,
          on_record: Callable[[dict], None] | None = None, evaluate_each_epoch: bool = True) -> TrainResult:
    """Adaptation loop.  ``net`` defaults to :func:`pretrain` on the source set;
    a given network is copied, never modified."""
    cfg.validate()
    t, scfg, ccfg = cfg.train, cfg.sampler, cfg.contrast
    seeds = Seeds.derive(cfg.seed)
    net = pretrain(cfg, bench.source_train, seeds) if net is None else net.copy()
    src, tgt = bench.source_train, bench.target_train
    c = cfg.net.num_classes
    _, h, w = tgt.labels.shape
    hw = h * w
    rng = np.random.default_rng(seeds.adapt)

    labels = LabelState.empty(len(tgt), h, w, tgt.ids)
    budget = BudgetState.from_ratio(t.budget, tgt.num_pixels(), adaptive=t.active_sampling)
    thresholds = Thresholds(scfg.pi_high_init, scfg.pi_low)
    dccm = Dccm.initial(c, t.beta, t.eps_floor)
    ones = np.ones((c, c))
    centers = CategoryCenters.empty(c, cfg.net.embed_dim)
    use_contrast = t.mcu_image or t.mcu_domain
    opt = segnet.SGD(net.parameters(), t.momentum, t.weight_decay)

    ns, nt = t.source_per_iter, t.target_per_iter
    iters_per_epoch = math.ceil(len(tgt) / nt)
    total_iters = t.epochs * iters_per_epoch
    records: list[dict] = []
    label_log = {"high_labels": 0, "medium_labels": 0, "pseudo_outside_low": 0, "double_charged": 0}

    def emit(rec):
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    step = 0
    for epoch in range(t.epochs):
        thresholds = update_threshold(budget, thresholds, scfg)
        order = rng.permutation(len(tgt))
        for b in range(iters_per_epoch):
            tidx = order[b * nt:(b + 1) * nt]
            sidx = rng.choice(len(src), size=ns, replace=False)
            images = np.concatenate([src.images[sidx], tgt.images[tidx]]).astype(np.float64)
            nb_s, nb_t = len(sidx), len(tidx)
            lr = poly_lr(t.lr, step, total_iters, t.poly_power)
            with T.Tape():
                out = segnet.forward(net, images)
                main_p = softmax_np(out.main_logits.data)
                aux_p = softmax_np(out.aux_logits.data)
                pred = np.argmax(main_p, axis=-1)
                scores = uncertainty_score(main_p, aux_p, t.gamma).scores
                groups = [partition(scores[i], thresholds) for i in range(nb_s + nb_t)]

                # annotation of the target images in this batch
                before_gt = labels.kind == GROUND_TRUTH
                for j, ti in enumerate(tidx):
                    g = groups[nb_s + j]
                    annotate_image(int(ti), g, pred[nb_s + j], labels, budget, tgt.labels, scfg, rng)
                    fresh_ps = labels.kind[ti] == PSEUDO
                    label_log["pseudo_outside_low"] += int((fresh_ps & ~g.low.reshape(-1)).sum())
                after_gt = labels.kind == GROUND_TRUTH
                label_log["double_charged"] += int((before_gt & ~after_gt).sum())
                if budget.labeled != labels.count(GROUND_TRUTH):
                    raise RuntimeError("budget counter out of sync with label state")

                # DCCM update from ground-truth-labelled batch pixels
                t_kind = labels.kind[tidx]
                t_cat = labels.category[tidx]
                gt_mask = t_kind == GROUND_TRUTH
                pred_flat = pred.reshape(nb_s + nb_t, hw)
                rates, observed = confusion_rates(
                    np.concatenate([pred_flat[:nb_s].reshape(-1), pred_flat[nb_s:][gt_mask]]),
                    np.concatenate([src.labels[sidx].reshape(-1), t_cat[gt_mask]]), c)
                dccm = dccm.update(rates, observed)

                contrast = None
                n_units = {lv.value: 0 for lv in LEVELS}
                n_anchors = 0
                if use_contrast and budget.active:
                    table = T.reshape(out.embeddings, (-1, cfg.net.embed_dim))
                    pools, anchors = [], []
                    for i in range(nb_s + nb_t):
                        if i < nb_s:
                            cats = src.labels[sidx[i]].reshape(-1).astype(np.int64)
                            pool = ImagePool("source", i, i * hw, cats)
                            anchors += select_anchors(pred_flat[i], cats, None, pool, ccfg, rng)
                        else:
                            j = i - nb_s
                            known = t_kind[j] != 0
                            cats = np.where(known, t_cat[j], -1).astype(np.int64)
                            pool = ImagePool("target", i, i * hw, cats)
                            gt_cats = np.where(gt_mask[j], t_cat[j], -1)
                            eligible = groups[i].high.reshape(-1) & gt_mask[j]
                            anchors += select_anchors(pred_flat[i], gt_cats, eligible, pool, ccfg, rng)
                        pools.append(pool)
                    n_anchors = len(anchors)
                    units = {}
                    for lv in LEVELS:
                        if (lv == Level.CROSS_DOMAIN and t.mcu_domain) or (lv != Level.CROSS_DOMAIN and t.mcu_image):
                            units[lv] = build_units(lv, anchors, pools, ccfg, rng)
                            n_units[lv.value] = len(units[lv])
                    # category centres from low-uncertainty pixels
                    cb = {}
                    for dom, rng_slice, lab_of in (
                        ("source", range(nb_s), lambda i: src.labels[sidx[i]].reshape(-1)),
                        ("target", range(nb_s, nb_s + nb_t), lambda i: pred_flat[i]),
                    ):
                        rows, labs = [], []
                        for i in rng_slice:
                            low = np.flatnonzero(groups[i].low.reshape(-1))
                            rows.append(i * hw + low)
                            labs.append(np.asarray(lab_of(i))[low])
                        rows = np.concatenate(rows)
                        cb[dom] = compute_centers(T.take(table, rows, unique=True), np.concatenate(labs), c,
                                                  centers[dom])
                    centers = CategoryCenters(cb["source"].state, cb["target"].state)
                    weights = dccm.weights if t.dccm else ones
                    contrast = total_contrastive_loss(units, table, cb, weights, ccfg,
                                                      image_levels=t.mcu_image, domain_level=t.mcu_domain)

                tgt_main = T.reshape(T.take(T.reshape(out.main_logits, (nb_s + nb_t, hw, c)),
                                            np.arange(nb_s, nb_s + nb_t), unique=True), (-1, c))
                tgt_aux = T.reshape(T.take(T.reshape(out.aux_logits, (nb_s + nb_t, hw, c)),
                                           np.arange(nb_s, nb_s + nb_t), unique=True), (-1, c))
                src_main = T.reshape(T.take(T.reshape(out.main_logits, (nb_s + nb_t, hw, c)),
                                            np.arange(nb_s), unique=True), (-1, c))
                src_aux = T.reshape(T.take(T.reshape(out.aux_logits, (nb_s + nb_t, hw, c)),
                                           np.arange(nb_s), unique=True), (-1, c))
                loss, report = total_loss(src_main, src_aux, src.labels[sidx],
                                          tgt_main, tgt_aux, t_kind, t_cat, contrast,
                                          aux_weight=t.aux_weight, contrast_weight=t.contrast_weight)
                grads = T.backward(loss)
            opt.step(grads, lr)
            rec = {"type": "iter", "iteration": step, "epoch": epoch, "lr": lr,
                   "M_a": budget.labeled, "M_e": budget.expected, "phase": budget.phase.name,
                   "pi_high": thresholds.pi_high, "anchors": n_anchors,
                   **{f"units_{k}": v for k, v in n_units.items()}, **report.as_dict()}
            emit(rec)
            step += 1
        if evaluate_each_epoch or epoch == t.epochs - 1:
            ev = evaluate(net, bench.target_val)
            emit({"type": "epoch", "epoch": epoch, "M_a": budget.labeled, "pi_high": thresholds.pi_high,
                  "iou": [None if np.isnan(v) else float(v) for v in ev["iou"]], "miou": ev["miou"]})
            log.info("epoch %d miou %.4f M_a %d/%d pi_high %.4f", epoch, ev["miou"], budget.labeled,
                     budget.expected, thresholds.pi_high)
    label_log["high_labels"] = int(((labels.kind == GROUND_TRUTH) & (labels.source_group != FROM_MEDIUM)).sum())
    label_log["medium_labels"] = int(((labels.kind == GROUND_TRUTH) & (labels.source_group == FROM_MEDIUM)).sum())
    return TrainResult(net, records, labels, budget, thresholds, dccm, centers, label_log)


# ---------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    variant: str
    mean: float
    std: float
    per_seed: list[float]


def run_variant(base: RunConfig, variant: str, seed: int, bench: Benchmark | None = None,
                pretrained: segnet.SegNet | None = None) -> float:
    cfg = variant_config(base, variant)
    cfg.seed = seed
    bench = bench or make_benchmark(Seeds.derive(seed).data, cfg.data.n_source, cfg.data.n_target,
                                    cfg.data.n_val, cfg.scene, cfg.shift)
    res = train(cfg, bench, pretrained, evaluate_each_epoch=False)
    return float(res.records[-1]["miou"])


def ablate(base: RunConfig, variants: list[str], n_seeds: int,
           bench_for_seed: Callable[[int], Benchmark] | None = None) -> list[AblationRow]:
    """Mean and standard deviation of target-validation mIoU per variant over
    seeds ``base.seed .. base.seed + n_seeds - 1``.  Variants of one seed share
    data and the source-pretrained network."""
    for v in variants:
        variant_config(base, v)
    scores = {v: [] for v in variants}
    for k in range(n_seeds):
        seed = base.seed + k
        cfg = base.copy()
        cfg.seed = seed
        seeds = Seeds.derive(seed)
        bench = bench_for_seed(seed) if bench_for_seed else make_benchmark(
            seeds.data, cfg.data.n_source, cfg.data.n_target, cfg.data.n_val, cfg.scene, cfg.shift)
        net0 = pretrain(cfg, bench.source_train, seeds)
        for v in variants:
            scores[v].append(run_variant(cfg, v, seed, bench, net0))
            log.info("seed %d %s miou %.4f", seed, v, scores[v][-1])
    return [AblationRow(v, float(np.mean(s)), float(np.std(s, ddof=1)) if len(s) > 1 else 0.0, s)
            for v, s in scores.items()]


def format_table(rows: list[AblationRow]) -> str:
    width = max(len(r.variant) for r in rows + [AblationRow("variant", 0, 0, [])])
    lines = [f"{'variant':<{width}}  {'mIoU mean':>9}  {'sd':>7}  seeds"]
    for r in rows:
        lines.append(f"{r.variant:<{width}}  {100 * r.mean:9.2f}  {100 * r.std:7.2f}  "
                     + " ".join(f"{100 * s:.2f}" for s in r.per_seed))
    return "\n".join(lines)


def table_csv(rows: list[AblationRow]) -> str:
    lines = ["variant,miou_mean,miou_sd,per_seed"]
    for r in rows:
        lines.append(f"{r.variant},{r.mean!r},{r.std!r}," + ";".join(repr(s) for s in r.per_seed))
    return "\n".join(lines) + "\n"
