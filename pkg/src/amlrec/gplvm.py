"""Latent embedding of pipelines by GP-LVM on a sparse performance matrix.

Every dataset column is an independent draw from a zero-mean Gaussian
process over the pipeline embedding; a missing entry is marginalized by
dropping its row and column from that dataset's covariance. The embedding
and kernel hyperparameters are fit by minibatch stochastic gradient descent
(plain or Adam) on the summed negative log-likelihood.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.linalg import cho_solve, lapack

from .kernel import (
    KernelParams,
    LatentEmbedding,
    NumericalError,
    gram,
    jittered_cholesky,
)
from .perf_matrix import SparsePerfMatrix

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_LR = {"sgd": 1e-7, "adam": 1e-2}


class InitializationError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Non-finite objective or failed factorization during training."""

    def __init__(self, message: str, epoch: int, column: int | None = None):
        self.epoch = epoch
        self.column = column
        where = f"epoch {epoch}" + (f", column {column}" if column is not None else "")
        super().__init__(f"{message} ({where})")


@dataclass
class TrainConfig:
    q: int = 20
    learning_rate: float | None = None
    optimizer: str = "sgd"
    epochs: int = 300
    column_batch: int = 50
    seed: int = 0
    init: str = "pca"
    family: str = "rbf_ard"
    # multiplier on the learning rate of (log) alpha, gamma and sigma
    hyper_lr_scale: float = 1.0
    learn_noise: bool = True
    workers: int = 1
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.q < 1:
            raise ValueError("q must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.column_batch < 1:
            raise ValueError("column_batch must be at least 1")
        if self.optimizer not in DEFAULT_LR:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.init not in ("pca", "random"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    @property
    def lr(self) -> float:
        if self.learning_rate is None:
            return DEFAULT_LR[self.optimizer]
        return self.learning_rate


@dataclass
class Model:
    embedding: LatentEmbedding
    params: KernelParams
    training_meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.params.family == "rbf_ard" and self.params.q != self.embedding.q:
            raise ValueError("embedding and kernel disagree on Q")

    @property
    def X(self) -> np.ndarray:
        return self.embedding.X

    @property
    def q(self) -> int:
        return self.embedding.q

    def to_dict(self) -> dict:
        p = self.params
        return {
            "q": self.q,
            "kernel": {
                "family": p.family,
                "alpha": p.alpha,
                "gamma": p.gamma.tolist(),
                "sigma": p.noise_sigma,
                "jitter": p.jitter,
            },
            "X": self.X.tolist(),
            "meta": self.training_meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Model":
        k = doc["kernel"]
        params = KernelParams(
            family=k["family"],
            alpha=k["alpha"],
            lengthscale_inverses=k["gamma"],
            noise_sigma=k["sigma"],
            jitter=k.get("jitter", 0.0),
        )
        X = np.array(doc["X"], dtype=float).reshape(-1, int(doc["q"]))
        return cls(LatentEmbedding(X), params, dict(doc.get("meta", {})))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Model":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# -- initialization ---------------------------------------------------------


def _row_mean_imputed(m: SparsePerfMatrix) -> np.ndarray:
    Y = m.to_dense()
    observed = ~np.isnan(Y)
    if not observed.any():
        raise InitializationError("matrix has no observed entries")
    counts = observed.sum(axis=1)
    sums = np.where(observed, Y, 0.0).sum(axis=1)
    global_mean = sums.sum() / counts.sum()
    row_means = np.where(counts > 0, sums / np.maximum(counts, 1), global_mean)
    return np.where(observed, Y, row_means[:, None])


def pca_scores(Y: np.ndarray, q: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``q`` principal-component scores and loadings of a dense matrix.

    Columns are centered first. Scores are ``U * s`` so each latent dimension
    carries the variance of its component; each loading vector is signed so
    its largest-magnitude entry is positive.
    """
    Yc = Y - Y.mean(axis=0, keepdims=True)
    U, s, Vt = np.linalg.svd(Yc, full_matrices=False)
    U, s, Vt = U[:, :q], s[:q], Vt[:q]
    for k in range(q):
        if Vt[k, np.argmax(np.abs(Vt[k]))] < 0:
            U[:, k] *= -1.0
            Vt[k] *= -1.0
    return U * s, Vt


def pca_init(m: SparsePerfMatrix, q: int) -> LatentEmbedding:
    if m.n_pipelines < 1:
        raise InitializationError("matrix has no pipelines")
    if q > min(m.shape):
        raise InitializationError(f"q={q} exceeds min(N, D)={min(m.shape)}")
    scores, _ = pca_scores(_row_mean_imputed(m), q)
    return LatentEmbedding(scores)


def random_init(m: SparsePerfMatrix, q: int, seed: int) -> LatentEmbedding:
    rng = np.random.default_rng(seed)
    return LatentEmbedding(rng.standard_normal((m.n_pipelines, q)))


def init_params(m: SparsePerfMatrix, q: int, family: str = "rbf_ard") -> KernelParams:
    """Scale-aware starting hyperparameters from the observed scores."""
    scores = np.array(list(m.entries.values()), dtype=float)
    alpha = max(float(np.var(scores)) if scores.size else 1.0, 1e-6)
    return KernelParams(
        family=family,
        alpha=alpha,
        lengthscale_inverses=np.full(q, 1.0 / q),
        noise_sigma=0.1 * math.sqrt(alpha),
        jitter=1e-8 * alpha,
    )


# -- likelihood and gradients -----------------------------------------------


@dataclass
class Gradient:
    """Partials of the negative log-likelihood in natural parameterization."""

    X: np.ndarray
    alpha: float
    gamma: np.ndarray
    sigma: float


def _as_X(X) -> np.ndarray:
    return X.X if isinstance(X, LatentEmbedding) else np.asarray(X, dtype=float)


def _group_terms(Xg: np.ndarray, p: KernelParams, Yg: np.ndarray, with_grad: bool):
    """NLL (and gradients) of several columns sharing one observed index set.

    ``Yg`` is ``(m, B)``: B dataset columns observed on the same m pipelines.
    """
    m, B = Yg.shape
    C = gram(Xg, p, add_noise=True)
    L = jittered_cholesky(C, p.alpha)
    A = cho_solve((L, True), Yg, check_finite=False)
    nll = (
        B * np.sum(np.log(np.diag(L)))
        + 0.5 * float(np.sum(Yg * A))
        + 0.5 * B * m * LOG_2PI
    )
    if not with_grad:
        return nll, None

    Cinv, info = lapack.dpotri(L, lower=1)
    if info != 0:
        raise NumericalError(f"dpotri failed with info={info}")
    Cinv = np.tril(Cinv) + np.tril(Cinv, -1).T
    G = 0.5 * (B * Cinv - A @ A.T)  # dNLL/dC
    d_sigma = 2.0 * p.noise_sigma * float(np.trace(G))
    if p.family == "linear":
        return nll, (2.0 * G @ Xg, 0.0, np.zeros(Xg.shape[1]), d_sigma)

    K = C.copy()
    K[np.diag_indices_from(K)] -= p.noise_sigma**2 + p.jitter
    W = G * K
    row = W.sum(axis=1)
    WX = W @ Xg
    d_alpha = float(W.sum()) / p.alpha
    d_gamma = -(row @ (Xg * Xg) - np.sum(Xg * WX, axis=0))
    d_X = -2.0 * p.gamma * (row[:, None] * Xg - WX)
    return nll, (d_X, d_alpha, d_gamma, d_sigma)


def _check_column(y, idx) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float).reshape(-1)
    idx = np.asarray(idx, dtype=np.intp).reshape(-1)
    if idx.size == 0:
        raise ValueError("column has no observations")
    if y.size != idx.size:
        raise ValueError(f"{y.size} scores for {idx.size} indices")
    return y, idx


def nll_column(X, p: KernelParams, y, idx) -> float:
    """Gaussian negative log-likelihood of one observed column."""
    y, idx = _check_column(y, idx)
    nll, _ = _group_terms(_as_X(X)[idx], p, y[:, None], with_grad=False)
    return float(nll)


def grad_column(X, p: KernelParams, y, idx) -> Gradient:
    """Gradient of :func:`nll_column`; latent rows outside ``idx`` stay zero."""
    y, idx = _check_column(y, idx)
    X = _as_X(X)
    _, (d_X, d_alpha, d_gamma, d_sigma) = _group_terms(
        X[idx], p, y[:, None], with_grad=True
    )
    full = np.zeros_like(X)
    full[idx] = d_X
    return Gradient(full, d_alpha, d_gamma, d_sigma)


def _column_groups(m: SparsePerfMatrix, columns: Sequence[int]):
    """Bundle columns with identical observed index sets, first-seen order."""
    groups: dict[bytes, tuple[np.ndarray, list[int]]] = {}
    for j in columns:
        idx, _ = m.column_arrays(j)
        if idx.size == 0:
            continue
        key = idx.tobytes()
        if key not in groups:
            groups[key] = (idx, [])
        groups[key][1].append(j)
    return list(groups.values())


def _stack(m: SparsePerfMatrix, cols: list[int]) -> np.ndarray:
    return np.column_stack([m.column_arrays(j)[1] for j in cols])


def nll_total(X, p: KernelParams, m: SparsePerfMatrix) -> float:
    """Sum of per-column NLLs over every dataset with an observation."""
    X = _as_X(X)
    total = 0.0
    for idx, cols in _column_groups(m, range(m.n_datasets)):
        nll, _ = _group_terms(X[idx], p, _stack(m, cols), with_grad=False)
        total += nll
    return float(total)


# -- training ---------------------------------------------------------------


def _pack(p: KernelParams) -> np.ndarray:
    return np.log(np.concatenate([[p.alpha], p.gamma, [p.noise_sigma]]))


def _unpack(theta: np.ndarray, template: KernelParams) -> KernelParams:
    v = np.exp(theta)
    return template.replace(alpha=v[0], lengthscale_inverses=v[1:-1], noise_sigma=v[-1])


class _Adam:
    def __init__(self, shape, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, value, grad, rows=None):
        self.t += 1
        sel = slice(None) if rows is None else rows
        g = grad[sel]
        self.m[sel] = self.b1 * self.m[sel] + (1 - self.b1) * g
        self.v[sel] = self.b2 * self.v[sel] + (1 - self.b2) * g * g
        m_hat = self.m[sel] / (1 - self.b1**self.t)
        v_hat = self.v[sel] / (1 - self.b2**self.t)
        value[sel] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def initial_model(m: SparsePerfMatrix, cfg: TrainConfig) -> tuple[np.ndarray, KernelParams]:
    if m.n_observed == 0:
        raise InitializationError("matrix has no observed entries")
    if cfg.init == "pca":
        X = pca_init(m, cfg.q).X
    else:
        X = random_init(m, cfg.q, cfg.seed).X
    return X.copy(), init_params(m, cfg.q, cfg.family)


def train(
    m: SparsePerfMatrix,
    cfg: TrainConfig,
    X0: np.ndarray | None = None,
    params0: KernelParams | None = None,
) -> Model:
    """Fit the embedding and hyperparameters to ``m``.

    Each epoch visits the observed columns in a seeded random order, in
    batches of ``cfg.column_batch``. Gradients are summed over a batch and
    applied once; only latent rows observed in the batch move.
    """
    X, p = initial_model(m, cfg)
    if X0 is not None:
        X = np.array(X0, dtype=float)
    if params0 is not None:
        p = params0
    n, q = X.shape
    theta = _pack(p)
    n_theta = theta.size
    # which entries of theta are trainable
    free = np.ones(n_theta, dtype=bool)
    if p.family == "linear":
        free[:-1] = False
    if not cfg.learn_noise:
        free[-1] = False

    rng = np.random.default_rng(cfg.seed)
    columns = np.array([j for j in range(m.n_datasets) if m.column_arrays(j)[0].size])
    lr, hyper_lr = cfg.lr, cfg.lr * cfg.hyper_lr_scale
    if cfg.optimizer == "adam":
        adam_x = _Adam((n, q), lr)
        adam_t = _Adam(n_theta, hyper_lr)

    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    history: list[float] = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(columns)
            for start in range(0, order.size, cfg.column_batch):
                batch = order[start : start + cfg.column_batch].tolist()
                params = _unpack(theta, p)
                groups = _column_groups(m, batch)

                def work(group, X=X, params=params):
                    idx, cols = group
                    return _group_terms(X[idx], params, _stack(m, cols), True)

                try:
                    results = list(pool.map(work, groups)) if pool else [work(g) for g in groups]
                except NumericalError as exc:
                    raise TrainingError(str(exc), epoch, batch[0]) from exc

                g_X = np.zeros_like(X)
                g_nat = np.zeros(n_theta)
                touched = np.zeros(n, dtype=bool)
                for (idx, cols), (nll, (d_X, d_a, d_g, d_s)) in zip(groups, results):
                    if not np.isfinite(nll):
                        raise TrainingError("non-finite likelihood", epoch, cols[0])
                    g_X[idx] += d_X
                    g_nat[0] += d_a
                    g_nat[1:-1] += d_g
                    g_nat[-1] += d_s
                    touched[idx] = True
                # chain rule into log space
                g_theta = np.where(free, g_nat * np.exp(theta), 0.0)
                rows = np.flatnonzero(touched)
                if cfg.optimizer == "sgd":
                    X[rows] -= lr * g_X[rows]
                    theta -= hyper_lr * g_theta
                else:
                    adam_x.step(X, g_X, rows)
                    adam_t.step(theta, g_theta)
                # log-space values past ~700 overflow or underflow on exp
                if not (np.all(np.isfinite(X)) and np.all(np.abs(theta) < 700)):
                    raise TrainingError("non-finite parameters", epoch, batch[0])

            try:
                nll = nll_total(X, _unpack(theta, p), m)
            except NumericalError as exc:
                raise TrainingError(str(exc), epoch) from exc
            if not math.isfinite(nll):
                raise TrainingError("non-finite likelihood", epoch)
            history.append(nll)
            logger.debug("epoch %d nll %.6f", epoch, nll)
            if (
                cfg.checkpoint_every
                and cfg.checkpoint_path
                and epoch % cfg.checkpoint_every == 0
            ):
                _model(X, theta, p, cfg, m, history).save(cfg.checkpoint_path)
    finally:
        if pool:
            pool.shutdown()
    return _model(X, theta, p, cfg, m, history)


def _model(X, theta, p, cfg, m, history) -> Model:
    meta = {
        "epochs_run": len(history),
        "final_nll": history[-1] if history else None,
        "seed": cfg.seed,
        "optimizer": cfg.optimizer,
        "nll_history": list(history),
        "config": {k: v for k, v in asdict(cfg).items() if k not in ("workers",)},
        "pipeline_ids": list(m.pipeline_ids),
    }
    return Model(LatentEmbedding(X.copy()), _unpack(theta, p), meta)
