"""Category centre embeddings and the dynamic category correlation matrix."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T

CENTER_MOMENTUM = 0.9
_ZERO_NORM = 1e-12


@dataclass
class DomainCenters:
    """Persistent (detached) centres of one domain."""

    vectors: np.ndarray  # C,D unit rows where seen
    seen: np.ndarray  # C bool

    @classmethod
    def empty(cls, num_classes: int, dim: int) -> "DomainCenters":
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes, dtype=bool))


@dataclass
class CategoryCenters:
    source: DomainCenters
    target: DomainCenters

    @classmethod
    def empty(cls, num_classes: int, dim: int) -> "CategoryCenters":
        return cls(DomainCenters.empty(num_classes, dim), DomainCenters.empty(num_classes, dim))

    def __getitem__(self, domain: str) -> DomainCenters:
        return getattr(self, domain)


@dataclass
class CenterBatch:
    """Centres for the current iteration: differentiable rows plus validity."""

    vectors: T.Tensor  # C,D
    valid: np.ndarray  # C bool
    state: DomainCenters = field(repr=False)


def compute_centers(embeddings, labels: np.ndarray, num_classes: int,
                    previous: DomainCenters | None = None,
                    momentum: float = CENTER_MOMENTUM) -> CenterBatch:
    """Unit-norm mean embedding per category.

    Categories present in the batch blend into the previous centre
    ``normalize(m * prev + (1 - m) * batch_centre)`` (or take the batch
    centre if never seen); absent categories carry the previous centre
    forward; a category whose member mean has zero norm is invalid this
    round.  Gradients flow only through the current batch.
    """
    emb = T.as_tensor(embeddings)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    m, d = emb.shape
    if labels.shape != (m,):
        raise ValueError(f"compute_centers: shape mismatch {emb.shape} vs labels {labels.shape}")
    if previous is None:
        previous = DomainCenters.empty(num_classes, d)

    onehot = np.zeros((num_classes, m))
    if m:
        onehot[labels, np.arange(m)] = 1.0
    counts = onehot.sum(axis=1)
    present = counts > 0
    # placeholder direction for rows that have no data; never reported valid
    dummy = np.zeros((num_classes, d))
    dummy[:, 0] = 1.0

    sums = T.matmul(T.Tensor(onehot), emb) if m else T.Tensor(np.zeros((num_classes, d)))
    mean_data = sums.data / np.maximum(counts, 1)[:, None]
    degenerate = present & (np.linalg.norm(mean_data, axis=1) < _ZERO_NORM)
    usable = present & ~degenerate
    scale = np.where(usable, 1.0 / np.maximum(counts, 1), 0.0)[:, None]
    batch_mean = T.add(T.mul(sums, scale), np.where(usable[:, None], 0.0, dummy))
    batch_center = T.l2_normalize(batch_mean, axis=1)

    blend_prev = usable & previous.seen
    a = np.where(blend_prev, momentum, np.where(usable, 0.0, 1.0))[:, None]
    b = np.where(blend_prev, 1.0 - momentum, np.where(usable, 1.0, 0.0))[:, None]
    prev_rows = np.where(previous.seen[:, None], previous.vectors, dummy)
    mixed = T.add(T.mul(batch_center, b), prev_rows * a)
    centers = T.l2_normalize(mixed, axis=1)

    valid = usable | (~present & previous.seen)
    new_seen = previous.seen | usable
    new_vectors = np.where(new_seen[:, None], centers.data, previous.vectors)
    return CenterBatch(centers, valid, DomainCenters(new_vectors.copy(), new_seen))


def confusion_rates(pred: np.ndarray, true: np.ndarray, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalised confusion ``R[u, v] = #(true u, predicted v) / #(true u)``.

    Returns ``(R, observed)`` where unobserved rows are all zero.
    """
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    true = np.asarray(true, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError(f"confusion_rates: shape mismatch {pred.shape} vs {true.shape}")
    counts = np.bincount(true * num_classes + pred, minlength=num_classes ** 2)
    counts = counts.reshape(num_classes, num_classes).astype(np.float64)
    totals = counts.sum(axis=1)
    observed = totals > 0
    rates = np.zeros_like(counts)
    rates[observed] = counts[observed] / totals[observed, None]
    return rates, observed


@dataclass
class Dccm:
    weights: np.ndarray
    beta: float = 0.9
    eps_floor: float = 0.05

    @classmethod
    def initial(cls, num_classes: int, beta: float = 0.9, eps_floor: float = 0.05) -> "Dccm":
        w = np.full((num_classes, num_classes), eps_floor)
        np.fill_diagonal(w, 1.0)
        return cls(w, beta, eps_floor)

    @classmethod
    def uniform(cls, num_classes: int) -> "Dccm":
        """All-ones weights: the contrastive losses reduce to plain InfoNCE."""
        return cls(np.ones((num_classes, num_classes)), 0.0, 1.0)

    def update(self, rates: np.ndarray, observed: np.ndarray) -> "Dccm":
        """EMA towards ``rates`` on observed rows, clamped to [eps_floor, 1]."""
        w = self.weights.copy()
        ema = self.beta * w + (1.0 - self.beta) * rates
        w[observed] = np.clip(ema[observed], self.eps_floor, 1.0)
        return Dccm(w, self.beta, self.eps_floor)

    def dump(self, path, names: list[str] | None = None) -> None:
        c = self.weights.shape[0]
        names = names or [f"class{i}" for i in range(c)]
        lines = ["," + ",".join(names)]
        for name, row in zip(names, self.weights):
            lines.append(name + "," + ",".join(f"{v:.6f}" for v in row))
        Path(path).write_text("\n".join(lines) + "\n")


def update_dccm(w: Dccm, rates: np.ndarray, observed: np.ndarray | None = None) -> Dccm:
    if observed is None:
        observed = rates.sum(axis=1) > 0
    return w.update(rates, observed)
