"""Expected improvement and next-pipeline selection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Collection, Sequence

import numpy as np
from scipy.stats import norm

from .predictor import PosteriorPrediction

POLICIES = ("ei", "greedy_mean", "random")


class ExhaustedError(LookupError):
    """Every candidate has already been evaluated."""


@dataclass(frozen=True)
class AcquisitionConfig:
    policy: str = "ei"
    xi: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if not np.isfinite(self.xi):
            raise ValueError("xi must be finite")


def expected_improvement(mean, variance, y_best, xi=0.01):
    """Closed-form EI of a Gaussian prediction over ``y_best + xi``.

    Works elementwise on arrays. With zero variance the improvement is
    deterministic: ``max(0, mean - y_best - xi)``.
    """
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if np.any(variance < 0):
        raise ValueError("variance must be nonnegative")
    gap = mean - y_best - xi
    s = np.sqrt(variance)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = np.where(s > 0, gap / np.where(s > 0, s, 1.0), 0.0)
        ei = np.where(s > 0, s * (z * norm.cdf(z) + norm.pdf(z)), np.maximum(gap, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def policy_scores(
    preds: Sequence[PosteriorPrediction], cfg: AcquisitionConfig, y_best: float
) -> np.ndarray:
    mean = np.array([p.mean for p in preds], dtype=float)
    if cfg.policy == "ei":
        var = np.array([p.variance for p in preds], dtype=float)
        return np.atleast_1d(expected_improvement(mean, var, y_best, cfg.xi))
    if cfg.policy == "greedy_mean":
        return mean
    return np.zeros(len(preds))


def select_next(
    preds: Sequence[PosteriorPrediction],
    evaluated: Collection[int],
    cfg: AcquisitionConfig,
    y_best: float,
    rng: np.random.Generator | None = None,
) -> int:
    """Pipeline maximizing the policy score among unevaluated candidates.

    Exact ties are broken uniformly at random; ``rng`` defaults to a
    generator seeded from ``cfg.seed``.
    """
    open_preds = [p for p in preds if p.pipeline not in evaluated]
    if not open_preds:
        raise ExhaustedError("no unevaluated candidates left")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    scores = policy_scores(open_preds, cfg, y_best)
    best = np.flatnonzero(scores == scores.max())
    pick = best[0] if best.size == 1 else rng.choice(best)
    return open_preds[int(pick)].pipeline
