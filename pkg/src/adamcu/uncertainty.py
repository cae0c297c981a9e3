"""Per-pixel uncertainty scores and the high/medium/low partition."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12
DEFAULT_GAMMA = 0.5


@dataclass
class Thresholds:
    pi_high: float
    pi_low: float

    def __post_init__(self):
        if not (self.pi_high >= self.pi_low >= 0):
            raise ValueError(f"need pi_high >= pi_low >= 0, got {self.pi_high}, {self.pi_low}")


@dataclass
class UncertaintyMap:
    scores: np.ndarray
    gamma: float


@dataclass
class PixelGroups:
    """Boolean masks over the image grid; exactly one is true per pixel."""

    high: np.ndarray
    medium: np.ndarray
    low: np.ndarray

    def indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(getattr(self, name))

    def label_of(self) -> np.ndarray:
        """0 = low, 1 = medium, 2 = high."""
        return self.medium.astype(np.int8) + 2 * self.high.astype(np.int8)


def _check_distribution(p: np.ndarray, name: str):
    if p.shape[-1] < 2:
        raise ValueError(f"{name}: need at least 2 categories, got {p.shape[-1]}")
    if np.any(p < -1e-12) or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-6):
        raise ValueError(f"{name}: input is not a per-pixel probability distribution")


def entropy_map(probs: np.ndarray) -> np.ndarray:
    """Entropy normalised by log C, in [0, 1]; 0 log 0 counts as 0."""
    probs = np.asarray(probs, dtype=np.float64)
    _check_distribution(probs, "entropy_map")
    c = probs.shape[-1]
    safe = np.clip(probs, PROB_FLOOR, 1.0)
    plogp = np.where(probs > 0, probs * np.log(safe), 0.0)
    return np.clip(-plogp.sum(axis=-1) / np.log(c), 0.0, 1.0)


def kl_map(p: np.ndarray, p_hat: np.ndarray) -> np.ndarray:
    """KL(p || p_hat) per pixel with both arguments clamped to [1e-12, 1]."""
    p = np.asarray(p, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if p.shape != p_hat.shape:
        raise ValueError(f"kl_map: shape mismatch {p.shape} vs {p_hat.shape}")
    _check_distribution(p, "kl_map")
    _check_distribution(p_hat, "kl_map")
    lp = np.log(np.clip(p, PROB_FLOOR, 1.0))
    lq = np.log(np.clip(p_hat, PROB_FLOOR, 1.0))
    kl = np.where(p > 0, p * (lp - lq), 0.0).sum(axis=-1)
    return np.maximum(kl, 0.0)


def uncertainty_score(main_probs: np.ndarray, aux_probs: np.ndarray,
                      gamma: float = DEFAULT_GAMMA) -> UncertaintyMap:
    """S = E(main) + gamma * KL(main || aux)."""
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    main_probs = np.asarray(main_probs, dtype=np.float64)
    aux_probs = np.asarray(aux_probs, dtype=np.float64)
    if main_probs.shape != aux_probs.shape:
        raise ValueError(f"uncertainty_score: shape mismatch {main_probs.shape} vs {aux_probs.shape}")
    scores = entropy_map(main_probs)
    if gamma:
        scores = scores + gamma * kl_map(main_probs, aux_probs)
    return UncertaintyMap(scores, gamma)


def partition(scores, t: Thresholds) -> PixelGroups:
    """high: S > pi_high; medium: pi_low < S <= pi_high; low: S <= pi_low."""
    s = scores.scores if isinstance(scores, UncertaintyMap) else np.asarray(scores)
    high = s > t.pi_high
    low = s <= t.pi_low
    return PixelGroups(high, ~high & ~low, low)
