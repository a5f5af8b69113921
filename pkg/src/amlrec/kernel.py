"""Covariance functions over latent pipeline vectors.

Two families are supported:

* ``rbf_ard``: ``k(a, b) = alpha * exp(-0.5 * sum_q gamma_q * (a_q - b_q)**2)``
* ``linear``:  ``k(a, b) = a @ b`` (no hyperparameters; equivalent to linear
  matrix factorization with the loading matrix integrated out)
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cholesky
from scipy.spatial.distance import cdist

FAMILIES = ("rbf_ard", "linear")

JITTER_START = 1e-8
JITTER_STOP = 1e-2


class NumericalError(ArithmeticError):
    """Cholesky factorization failed even after jitter escalation."""

    def __init__(self, message: str, jitter: float | None = None):
        self.jitter = jitter
        super().__init__(message)


@dataclass(frozen=True)
class KernelParams:
    """Kernel hyperparameters plus observation noise.

    ``lengthscale_inverses`` holds one inverse squared length-scale per latent
    dimension. ``jitter`` is always added to the diagonal of a Gram matrix.
    """

    family: str = "rbf_ard"
    alpha: float = 1.0
    lengthscale_inverses: np.ndarray = field(default_factory=lambda: np.ones(1))
    noise_sigma: float = 0.1
    jitter: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        gamma = np.array(self.lengthscale_inverses, dtype=float).reshape(-1)
        gamma.setflags(write=False)
        object.__setattr__(self, "lengthscale_inverses", gamma)
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "noise_sigma", float(self.noise_sigma))
        object.__setattr__(self, "jitter", float(self.jitter))
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if gamma.size == 0 or not np.all(gamma > 0):
            raise ValueError("lengthscale inverses must be positive")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be positive")
        if not self.jitter >= 0:
            raise ValueError("jitter must be nonnegative")

    @property
    def q(self) -> int:
        return self.lengthscale_inverses.size

    @property
    def gamma(self) -> np.ndarray:
        return self.lengthscale_inverses

    def replace(self, **changes) -> "KernelParams":
        return replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, KernelParams):
            return NotImplemented
        return (
            self.family == other.family
            and self.alpha == other.alpha
            and np.array_equal(self.gamma, other.gamma)
            and self.noise_sigma == other.noise_sigma
            and self.jitter == other.jitter
        )

    __hash__ = None


@dataclass(frozen=True)
class LatentEmbedding:
    """One latent row per pipeline."""

    X: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim != 2:
            raise ValueError("embedding must be a 2-d array")
        if not np.all(np.isfinite(X)):
            raise ValueError("embedding contains non-finite values")
        object.__setattr__(self, "X", X)

    @property
    def q(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[0]


def _check_dims(Xa: np.ndarray, p: KernelParams) -> None:
    if p.family == "rbf_ard" and Xa.shape[-1] != p.q:
        raise ValueError(
            f"latent dimension {Xa.shape[-1]} does not match {p.q} lengthscales"
        )


def kernel_value(x_i, x_j, p: KernelParams) -> float:
    x_i = np.asarray(x_i, dtype=float).reshape(-1)
    x_j = np.asarray(x_j, dtype=float).reshape(-1)
    if x_i.shape != x_j.shape:
        raise ValueError(f"dimension mismatch: {x_i.size} vs {x_j.size}")
    _check_dims(x_i, p)
    if p.family == "linear":
        return float(x_i @ x_j)
    diff = x_i - x_j
    return float(p.alpha * np.exp(-0.5 * np.sum(p.gamma * diff * diff)))


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    return X


def gram_cross(Xa, Xb, p: KernelParams) -> np.ndarray:
    """Cross-covariance ``K(Xa, Xb)`` with no noise and no jitter."""
    Xa, Xb = _as_matrix(Xa), _as_matrix(Xb)
    if Xa.shape[1] != Xb.shape[1]:
        raise ValueError(f"dimension mismatch: {Xa.shape[1]} vs {Xb.shape[1]}")
    _check_dims(Xa, p)
    if p.family == "linear":
        return Xa @ Xb.T
    scale = np.sqrt(p.gamma)
    r2 = cdist(Xa * scale, Xb * scale, "sqeuclidean")
    return p.alpha * np.exp(-0.5 * r2)


def gram(Xs, p: KernelParams, add_noise: bool = True) -> np.ndarray:
    """Symmetric Gram matrix of ``Xs``; jitter always, noise on request."""
    Xs = _as_matrix(Xs)
    if Xs.shape[0] < 1:
        raise ValueError("gram needs at least one point")
    K = gram_cross(Xs, Xs, p)
    K = np.triu(K) + np.triu(K, 1).T
    diag = p.jitter + (p.noise_sigma**2 if add_noise else 0.0)
    K[np.diag_indices_from(K)] += diag
    return K


def jittered_cholesky(C: np.ndarray, scale: float) -> np.ndarray:
    """Lower Cholesky factor of ``C``, escalating diagonal jitter on failure.

    Extra jitter starts at ``1e-8 * scale`` and grows tenfold up to
    ``1e-2 * scale``.
    """
    try:
        return cholesky(C, lower=True, check_finite=False)
    except LinAlgError:
        pass
    if not np.all(np.isfinite(C)):
        raise NumericalError("covariance contains non-finite values", jitter=0.0)
    jitter = JITTER_START * scale
    while jitter <= JITTER_STOP * scale * (1 + 1e-9):
        try:
            return cholesky(
                C + jitter * np.eye(C.shape[0]), lower=True, check_finite=False
            )
        except LinAlgError:
            jitter *= 10.0
    raise NumericalError(
        f"Cholesky failed with jitter up to {jitter / 10.0:.3g}", jitter=jitter / 10.0
    )


@dataclass
class KernelGradients:
    """Analytic partials of a Gram matrix ``K`` (noise and jitter excluded).

    ``d_x[q, i, j]`` is the derivative of ``K[i, j]`` with respect to
    ``X[i, q]``; the derivative with respect to ``X[j, q]`` is ``d_x[q, j, i]``.
    Hence ``dK[i, j]/dX[n, q] = [n == i] d_x[q, i, j] + [n == j] d_x[q, j, i]``.
    """

    d_alpha: np.ndarray
    d_gamma: np.ndarray
    d_x: np.ndarray


def kernel_gradients(Xs, p: KernelParams) -> KernelGradients:
    Xs = _as_matrix(Xs)
    _check_dims(Xs, p)
    m, q = Xs.shape
    diff = Xs[:, None, :] - Xs[None, :, :]  # (m, m, q)
    if p.family == "linear":
        zeros = np.zeros((m, m))
        d_x = np.broadcast_to(Xs.T[:, None, :], (q, m, m)).copy()
        return KernelGradients(zeros, np.zeros((q, m, m)), d_x)
    K = gram_cross(Xs, Xs, p)
    sq = np.moveaxis(diff * diff, 2, 0)  # (q, m, m)
    d_gamma = -0.5 * sq * K
    d_x = -p.gamma[:, None, None] * np.moveaxis(diff, 2, 0) * K
    return KernelGradients(K / p.alpha, d_gamma, d_x)
