"""Multi-level contrastive units and the weighted InfoNCE losses.

Embeddings of every pixel in a batch live in one row table ``(M, D)``;
anchors and sampled positives/negatives refer to rows of that table, so a
unit is just a handful of integer index arrays.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .centers import CenterBatch


class Level(enum.Enum):
    INTRA_IMAGE = "intra"
    CROSS_IMAGE = "cross"
    CROSS_DOMAIN = "domain"


LEVELS = (Level.INTRA_IMAGE, Level.CROSS_IMAGE, Level.CROSS_DOMAIN)
DOMAINS = ("source", "target")


@dataclass
class ContrastConfig:
    temperature: float = 0.1
    n_pos: int = 8
    n_neg: int = 32
    max_anchors_per_image: int = 16

    def validate(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if min(self.n_pos, self.n_neg, self.max_anchors_per_image) < 1:
            raise ValueError("n_pos, n_neg and max_anchors_per_image must be >= 1")


@dataclass
class ImagePool:
    """Pixels of one batch image as seen by the contrastive machinery.

    ``categories`` holds the known category per pixel (-1 = unknown);
    table row of pixel ``k`` is ``offset + k``.
    """

    domain: str
    image: int
    offset: int
    categories: np.ndarray


@dataclass
class Anchor:
    domain: str
    image: int
    pixel: int
    category: int
    row: int


@dataclass
class ContrastiveUnit:
    level: Level
    anchor: Anchor
    sample_domain: str
    sample_image: int
    pos_rows: np.ndarray
    pos_categories: np.ndarray
    neg_rows: np.ndarray
    neg_categories: np.ndarray


def select_anchors(prediction: np.ndarray, labels: np.ndarray, eligible: np.ndarray | None,
                   pool: ImagePool, cfg: ContrastConfig, rng: np.random.Generator) -> list[Anchor]:
    """Mispredicted pixels with a known label, capped by a uniform subsample.

    ``labels`` uses -1 for unknown; ``eligible`` further restricts the
    candidates (the ground-truth-labelled high-uncertainty set for target
    images, ``None`` for source images).
    """
    pred = np.asarray(prediction).reshape(-1)
    lab = np.asarray(labels).reshape(-1)
    ok = (lab >= 0) & (pred != lab)
    if eligible is not None:
        ok &= np.asarray(eligible, dtype=bool).reshape(-1)
    pix = np.flatnonzero(ok)
    if pix.size > cfg.max_anchors_per_image:
        pix = np.sort(rng.choice(pix, size=cfg.max_anchors_per_image, replace=False))
    return [Anchor(pool.domain, pool.image, int(p), int(lab[p]), pool.offset + int(p)) for p in pix]


def _sample_pool(anchor: Anchor, pool: ImagePool, cfg: ContrastConfig, rng: np.random.Generator,
                 level: Level) -> ContrastiveUnit | None:
    cats = pool.categories.reshape(-1)
    pos = np.flatnonzero(cats == anchor.category)
    if level == Level.INTRA_IMAGE:
        pos = pos[pos != anchor.pixel]
    neg = np.flatnonzero((cats >= 0) & (cats != anchor.category))
    if pos.size == 0 or neg.size == 0:
        return None
    if pos.size > cfg.n_pos:
        pos = np.sort(rng.choice(pos, size=cfg.n_pos, replace=False))
    if neg.size > cfg.n_neg:
        neg = np.sort(rng.choice(neg, size=cfg.n_neg, replace=False))
    return ContrastiveUnit(level, anchor, pool.domain, pool.image,
                           pool.offset + pos, cats[pos].astype(np.int64),
                           pool.offset + neg, cats[neg].astype(np.int64))


def build_units(level: Level, anchors: list[Anchor], pools: list[ImagePool], cfg: ContrastConfig,
                rng: np.random.Generator) -> list[ContrastiveUnit]:
    """One unit per anchor drawn from the level's pool; units lacking a
    positive or a negative are dropped."""
    by_key = {(p.domain, p.image): p for p in pools}
    units = []
    for a in anchors:
        if level == Level.INTRA_IMAGE:
            choices = [by_key[(a.domain, a.image)]]
        elif level == Level.CROSS_IMAGE:
            choices = [p for p in pools if p.domain == a.domain and p.image != a.image]
        else:
            choices = [p for p in pools if p.domain != a.domain]
        if not choices:
            continue
        pool = choices[int(rng.integers(len(choices)))] if len(choices) > 1 else choices[0]
        unit = _sample_pool(a, pool, cfg, rng, level)
        if unit is not None:
            units.append(unit)
    return units


def _pad(rows: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    idx = np.zeros((len(rows), width), dtype=np.int64)
    mask = np.zeros((len(rows), width))
    for i, r in enumerate(rows):
        idx[i, : len(r)] = r
        mask[i, : len(r)] = 1.0
    return idx, mask


def weighted_infonce(anchors: T.Tensor, positives: T.Tensor, pos_mask: np.ndarray,
                     negatives: T.Tensor, neg_mask: np.ndarray, pos_weight: np.ndarray,
                     neg_weight: np.ndarray, temperature: float) -> T.Tensor:
    """Mean over units of the mean over positives of ``-log H``.

    anchors (U,D), positives (U,P,D), negatives (U,N,D); each positive gets
    its own denominator of itself plus all of the unit's negatives.
    """
    u, d = anchors.shape
    a = T.reshape(anchors, (u, 1, d))
    sp = T.sum(T.mul(positives, a), axis=-1)
    sn = T.sum(T.mul(negatives, a), axis=-1)
    lp = T.mul(sp, pos_weight / temperature)
    ln = T.mul(sn, neg_weight / temperature)
    # constant per-unit shift for stability (no gradient through it)
    shift = np.maximum(np.where(pos_mask > 0, lp.data, -np.inf).max(axis=1),
                       np.where(neg_mask > 0, ln.data, -np.inf).max(axis=1))[:, None]
    lp_s = T.sub(lp, shift)
    neg_sum = T.sum(T.mul(T.exp(T.sub(ln, shift)), neg_mask), axis=1, keepdims=True)
    per_pos = T.sub(T.log(T.add(T.exp(lp_s), neg_sum)), lp_s)
    per_unit = T.mul(T.sum(T.mul(per_pos, pos_mask), axis=1), 1.0 / pos_mask.sum(axis=1))
    return T.mean(per_unit)


def _zero() -> T.Tensor:
    return T.Tensor(0.0)


def p2p_loss(units: list[ContrastiveUnit], table: T.Tensor, weights: np.ndarray,
             cfg: ContrastConfig) -> T.Tensor:
    """Pixel-to-pixel loss averaged over units; zero for no units."""
    if not units:
        return _zero()
    pos_idx, pos_mask = _pad([un.pos_rows for un in units])
    neg_idx, neg_mask = _pad([un.neg_rows for un in units])
    pos_cat, _ = _pad([un.pos_categories for un in units])
    neg_cat, _ = _pad([un.neg_categories for un in units])
    anchor_cat = np.array([un.anchor.category for un in units])
    anchors = T.take(table, np.array([un.anchor.row for un in units]))
    # anchor category u binds the row of W; the sample's category the column
    pos_w = weights[anchor_cat[:, None], pos_cat]
    neg_w = weights[anchor_cat[:, None], neg_cat]
    return weighted_infonce(anchors, T.take(table, pos_idx), pos_mask, T.take(table, neg_idx),
                            neg_mask, pos_w, neg_w, cfg.temperature)


def _c2c_units(anchor_valid: np.ndarray, sample_valid: np.ndarray, anchor_offset: int,
               sample_offset: int):
    anchors, pos, negs = [], [], []
    for c in np.flatnonzero(anchor_valid & sample_valid):
        neg = np.flatnonzero(sample_valid & (np.arange(len(sample_valid)) != c))
        if neg.size == 0:
            continue
        anchors.append((anchor_offset + c, c))
        pos.append(sample_offset + c)
        negs.append((sample_offset + neg, neg))
    return anchors, pos, negs


def c2c_loss(centers: dict[str, CenterBatch], weights: np.ndarray, cfg: ContrastConfig,
             cross_domain: bool) -> T.Tensor:
    """Centre-to-centre loss.

    Within-domain (``cross_domain=False``): each valid centre is an anchor,
    its own centre the positive and the domain's other valid centres the
    negatives.  Cross-domain: the positive is the same category's centre in
    the other domain and the negatives that domain's other valid centres;
    both directions are used.  Zero when no pool has two valid centres.
    """
    src, tgt = centers["source"], centers["target"]
    c = src.valid.shape[0]
    table = T.concat([src.vectors, tgt.vectors], axis=0)
    valid = {"source": (src.valid, 0), "target": (tgt.valid, c)}
    pairs = [("source", "target"), ("target", "source")] if cross_domain else [
        ("source", "source"), ("target", "target")]
    anchors, pos, negs = [], [], []
    for a_dom, s_dom in pairs:
        a_valid, a_off = valid[a_dom]
        s_valid, s_off = valid[s_dom]
        aa, pp, nn = _c2c_units(a_valid, s_valid, a_off, s_off)
        anchors += aa
        pos += pp
        negs += nn
    if not anchors:
        return _zero()
    anchor_rows = np.array([a[0] for a in anchors])
    anchor_cat = np.array([a[1] for a in anchors])
    neg_idx, neg_mask = _pad([n[0] for n in negs])
    neg_cat, _ = _pad([n[1] for n in negs])
    pos_idx = np.array(pos)[:, None]
    pos_w = weights[anchor_cat, anchor_cat][:, None]
    neg_w = weights[anchor_cat[:, None], neg_cat]
    return weighted_infonce(T.take(table, anchor_rows), T.take(table, pos_idx), np.ones((len(pos), 1)),
                            T.take(table, neg_idx), neg_mask, pos_w, neg_w, cfg.temperature)


CONTRAST_KEYS = ("p2p_intra", "c2c_intra", "p2p_cross", "c2c_cross", "p2p_domain", "c2c_domain")


def total_contrastive_loss(units: dict[Level, list[ContrastiveUnit]], table: T.Tensor,
                           centers: dict[str, CenterBatch] | None, weights: np.ndarray,
                           cfg: ContrastConfig, image_levels: bool = True,
                           domain_level: bool = True) -> dict[str, T.Tensor]:
    """The six contrast terms keyed by :data:`CONTRAST_KEYS`.

    Within-domain centre contrast does not depend on which image the anchor
    came from, so it is computed once and reported under ``c2c_intra``;
    ``c2c_cross`` is identically zero.
    """
    out = {k: _zero() for k in CONTRAST_KEYS}
    if image_levels:
        out["p2p_intra"] = p2p_loss(units.get(Level.INTRA_IMAGE, []), table, weights, cfg)
        out["p2p_cross"] = p2p_loss(units.get(Level.CROSS_IMAGE, []), table, weights, cfg)
        if centers is not None:
            out["c2c_intra"] = c2c_loss(centers, weights, cfg, cross_domain=False)
    if domain_level:
        out["p2p_domain"] = p2p_loss(units.get(Level.CROSS_DOMAIN, []), table, weights, cfg)
        if centers is not None:
            out["c2c_domain"] = c2c_loss(centers, weights, cfg, cross_domain=True)
    return out
