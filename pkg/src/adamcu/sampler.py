"""Budgeted pixel annotation with threshold decay and phased sampling.

Ground-truth labels are charged against a single global budget: the first
half comes from the high-uncertainty group, the rest from the medium group
(with adaptive sampling) and afterwards only pseudo labels are handed out.
Pseudo labels come from the low-uncertainty group and never cost budget.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .uncertainty import PixelGroups, Thresholds

UNLABELED, GROUND_TRUTH, PSEUDO = 0, 1, 2
_KIND_NAMES = {GROUND_TRUTH: "gt", PSEUDO: "pseudo"}
# provenance of ground-truth labels
FROM_HIGH, FROM_MEDIUM = 1, 2


class Phase(enum.IntEnum):
    HIGH = 0
    MEDIUM = 1
    PSEUDO_ONLY = 2


@dataclass
class SamplerConfig:
    r: float = 0.9
    pi_high_init: float = 0.9
    pi_low: float = 0.25
    k_batch: int = 64
    adaptive: bool = True

    def validate(self):
        if not 0 < self.r < 1:
            raise ValueError(f"decay rate r must be in (0, 1), got {self.r}")
        if self.k_batch < 1:
            raise ValueError(f"k_batch must be >= 1, got {self.k_batch}")
        Thresholds(self.pi_high_init, self.pi_low)


@dataclass
class BudgetState:
    expected: int  # M_e
    total: int  # M_t
    labeled: int = 0  # M_a
    phase: Phase = Phase.HIGH
    adaptive: bool = True

    def __post_init__(self):
        if not 0 <= self.expected <= self.total:
            raise ValueError(f"need 0 <= M_e <= M_t, got M_e={self.expected}, M_t={self.total}")
        if self.expected == 0:
            self.phase = Phase.PSEUDO_ONLY

    @classmethod
    def from_ratio(cls, ratio: float, total: int, adaptive: bool = True) -> "BudgetState":
        if not 0 <= ratio <= 1:
            raise ValueError(f"budget ratio must be in [0, 1], got {ratio}")
        return cls(int(round(ratio * total)), total, adaptive=adaptive)

    @property
    def active(self) -> bool:
        """Target supervision of any kind happens only with a positive budget."""
        return self.expected > 0

    @property
    def high_quota(self) -> int:
        return math.ceil(self.expected / 2) if self.adaptive else self.expected

    def advance(self):
        if self.phase == Phase.HIGH and self.labeled >= self.high_quota:
            self.phase = Phase.MEDIUM if self.adaptive and self.labeled < self.expected else Phase.PSEUDO_ONLY
        if self.phase == Phase.MEDIUM and self.labeled >= self.expected:
            self.phase = Phase.PSEUDO_ONLY


@dataclass
class LabelState:
    """Per target pixel (flattened per image): kind, category and, for
    ground truth, the group it was drawn from."""

    kind: np.ndarray  # n_images, H*W int8
    category: np.ndarray  # n_images, H*W int16
    source_group: np.ndarray  # n_images, H*W int8
    height: int
    width: int
    ids: list[str] = field(default_factory=list)

    @classmethod
    def empty(cls, n_images: int, height: int, width: int, ids=None) -> "LabelState":
        n = height * width
        return cls(
            np.zeros((n_images, n), dtype=np.int8),
            np.full((n_images, n), -1, dtype=np.int16),
            np.zeros((n_images, n), dtype=np.int8),
            height,
            width,
            list(ids) if ids is not None else [str(i) for i in range(n_images)],
        )

    def count(self, kind: int) -> int:
        return int((self.kind == kind).sum())

    def mask(self, image: int, kind: int) -> np.ndarray:
        return (self.kind[image] == kind).reshape(self.height, self.width)

    def export(self, path) -> None:
        """Write "image_id, row, col, kind, category" lines for labelled pixels."""
        lines = []
        for i, ident in enumerate(self.ids):
            for pix in np.flatnonzero(self.kind[i]):
                r, c = divmod(int(pix), self.width)
                lines.append(f"{ident}, {r}, {c}, {_KIND_NAMES[int(self.kind[i, pix])]}, {int(self.category[i, pix])}")
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def update_threshold(state: BudgetState, t: Thresholds, cfg: SamplerConfig) -> Thresholds:
    """Once per epoch: shrink pi_high by r while the high-group quota is unmet.

    pi_high is kept >= pi_low so the thresholds stay ordered.
    """
    if state.active and state.labeled < state.high_quota:
        return Thresholds(max(t.pi_high * cfg.r, t.pi_low), t.pi_low)
    return Thresholds(t.pi_high, t.pi_low)


def oracle_label(labels: np.ndarray, image: int, pixel: int) -> int:
    """Simulated annotator: the stored ground truth of ``labels[image]`` at the
    flat ``pixel`` index."""
    n_images = labels.shape[0]
    n_pix = labels[0].size if n_images else 0
    if not (0 <= image < n_images and 0 <= pixel < n_pix):
        raise IndexError(f"oracle: pixel ({image}, {pixel}) outside {n_images} images x {n_pix} pixels")
    return int(labels[image].reshape(-1)[pixel])


def _oracle_many(labels: np.ndarray, image: int, pixels: np.ndarray) -> np.ndarray:
    flat = labels[image].reshape(-1)
    if pixels.size and (pixels.min() < 0 or pixels.max() >= flat.size):
        raise IndexError(f"oracle: pixel index outside image {image}")
    return flat[pixels].astype(np.int16)


def annotate_image(image: int, groups: PixelGroups, prediction: np.ndarray,
                   labels: LabelState, budget: BudgetState, oracle: np.ndarray,
                   cfg: SamplerConfig, rng: np.random.Generator) -> dict[str, int]:
    """Annotate one target image visited in the current iteration.

    ``oracle`` is the full ground-truth label array of the target set and is
    only read at pixels that get charged to the budget.
    """
    added = {"high": 0, "medium": 0, "pseudo": 0}
    if not budget.active:
        return added
    kind = labels.kind[image]
    unlabeled = kind != GROUND_TRUTH

    budget.advance()
    if budget.phase in (Phase.HIGH, Phase.MEDIUM):
        if budget.phase == Phase.HIGH:
            group, limit, tag, src = groups.high, budget.high_quota, "high", FROM_HIGH
        else:
            group, limit, tag, src = groups.medium, budget.expected, "medium", FROM_MEDIUM
        cand = np.flatnonzero(group.reshape(-1) & unlabeled)
        n = min(cfg.k_batch, limit - budget.labeled, cand.size)
        if n > 0:
            pick = np.sort(rng.choice(cand, size=n, replace=False))
            kind[pick] = GROUND_TRUTH
            labels.category[image, pick] = _oracle_many(oracle, image, pick)
            labels.source_group[image, pick] = src
            budget.labeled += n
            added[tag] = n
        budget.advance()

    # pseudo labels are redrawn on every visit
    stale = kind == PSEUDO
    kind[stale] = UNLABELED
    labels.category[image, stale] = -1
    cand = np.flatnonzero(groups.low.reshape(-1) & (kind != GROUND_TRUTH))
    if cfg.adaptive and cand.size > cfg.k_batch:
        cand = np.sort(rng.choice(cand, size=cfg.k_batch, replace=False))
    kind[cand] = PSEUDO
    labels.category[image, cand] = prediction.reshape(-1)[cand]
    added["pseudo"] = int(cand.size)
    return added


def annotate_batch(images: list[int], groups: list[PixelGroups], predictions: list[np.ndarray],
                   labels: LabelState, budget: BudgetState, oracle: np.ndarray,
                   cfg: SamplerConfig, rng: np.random.Generator) -> dict[str, int]:
    total = {"high": 0, "medium": 0, "pseudo": 0}
    for img, grp, pred in zip(images, groups, predictions):
        for k, v in annotate_image(img, grp, pred, labels, budget, oracle, cfg, rng).items():
            total[k] += v
    return total
