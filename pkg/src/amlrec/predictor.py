"""GP posterior over unevaluated pipelines for a single target dataset."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .gplvm import Model
from .kernel import gram, gram_cross, jittered_cholesky

NEGATIVE_VARIANCE_TOL = 1e-10


@dataclass(frozen=True)
class PosteriorPrediction:
    pipeline: int
    mean: float
    variance: float


class DatasetObservations:
    """Scores already measured on the target dataset, in evaluation order."""

    def __init__(self, pairs: Iterable[tuple[int, float]] = ()):
        self._pairs: list[tuple[int, float]] = []
        self._seen: set[int] = set()
        for i, y in pairs:
            self.add(i, y)

    def add(self, pipeline: int, score: float) -> None:
        pipeline = int(pipeline)
        if pipeline < 0:
            raise ValueError(f"negative pipeline index {pipeline}")
        if pipeline in self._seen:
            raise ValueError(f"pipeline {pipeline} already observed")
        self._seen.add(pipeline)
        self._pairs.append((pipeline, float(score)))

    @property
    def pairs(self) -> list[tuple[int, float]]:
        return list(self._pairs)

    @property
    def pipelines(self) -> np.ndarray:
        return np.array([i for i, _ in self._pairs], dtype=np.intp)

    @property
    def scores(self) -> np.ndarray:
        return np.array([y for _, y in self._pairs], dtype=float)

    def __len__(self) -> int:
        return len(self._pairs)

    def __contains__(self, pipeline: int) -> bool:
        return int(pipeline) in self._seen


def _prior_diag(model: Model, Xc: np.ndarray) -> np.ndarray:
    p = model.params
    if p.family == "linear":
        return np.einsum("ij,ij->i", Xc, Xc)
    return np.full(Xc.shape[0], p.alpha)


def posterior_batch(
    model: Model,
    obs: DatasetObservations,
    candidates: Sequence[int],
    center: bool = False,
) -> list[PosteriorPrediction]:
    """Posterior mean and variance for every candidate from one factorization.

    With ``center`` the observed scores are shifted to zero mean before
    conditioning and the shift is added back to each predicted mean.
    """
    candidates = np.asarray(list(candidates), dtype=np.intp)
    if candidates.size == 0:
        return []
    if np.unique(candidates).size != candidates.size:
        raise ValueError("candidates must be distinct")
    X, p = model.X, model.params
    n = X.shape[0]
    if candidates.min() < 0 or candidates.max() >= n:
        raise IndexError(f"candidate outside [0, {n})")
    Xc = X[candidates]
    noise = p.noise_sigma**2
    prior_var = _prior_diag(model, Xc) + noise

    if len(obs) == 0:
        mean = np.zeros(candidates.size)
        var = prior_var
    else:
        idx = obs.pipelines
        if idx.max() >= n:
            raise IndexError(f"observed pipeline outside [0, {n})")
        y = obs.scores
        offset = y.mean() if center else 0.0
        L = jittered_cholesky(gram(X[idx], p, add_noise=True), p.alpha)
        Kc = gram_cross(X[idx], Xc, p)
        V = solve_triangular(L, Kc, lower=True, check_finite=False)
        w = solve_triangular(L, y - offset, lower=True, check_finite=False)
        mean = V.T @ w + offset
        var = prior_var - np.einsum("ij,ij->j", V, V)

    worst = var.min()
    if worst < -NEGATIVE_VARIANCE_TOL:
        warnings.warn(f"clamping negative posterior variance {worst:.3g}", stacklevel=2)
    var = np.maximum(var, 0.0)
    return [
        PosteriorPrediction(int(c), float(mu), float(v))
        for c, mu, v in zip(candidates, mean, var)
    ]


def posterior(
    model: Model, obs: DatasetObservations, m: int, center: bool = False
) -> PosteriorPrediction:
    return posterior_batch(model, obs, [m], center=center)[0]
