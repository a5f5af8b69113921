"""Shared oracles for the test suite."""

import numpy as np

from amlrec.gplvm import grad_column, nll_column
from amlrec.kernel import KernelParams

FD_STEP = 1e-6
# below this magnitude a gradient component is compared absolutely; central
# differences at FD_STEP carry ~1e-9 absolute rounding noise
FD_FLOOR = 1e-3


def random_instance(rng, n=12, q=2, family="rbf_ard"):
    """Random embedding, kernel, and a partially observed column."""
    X = rng.standard_normal((n, q))
    p = KernelParams(
        family,
        alpha=float(np.exp(rng.normal(0, 0.5))),
        lengthscale_inverses=np.exp(rng.normal(0, 0.5, q)),
        noise_sigma=float(rng.uniform(0.2, 1.0)),
        jitter=0.0,
    )
    m = int(rng.integers(3, n))
    idx = np.sort(rng.choice(n, m, replace=False))
    y = rng.standard_normal(m)
    return X, p, y, idx


def _rel(a, f):
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), FD_FLOOR)


def fd_gradients(X, p, y, idx, h=FD_STEP):
    """Central finite differences of nll_column in natural parameters."""
    f = lambda X=X, p=p: nll_column(X, p, y, idx)  # noqa: E731
    gX = np.zeros_like(X)
    for i in range(X.shape[0]):
        for q in range(X.shape[1]):
            Xp, Xm = X.copy(), X.copy()
            Xp[i, q] += h
            Xm[i, q] -= h
            gX[i, q] = (f(Xp) - f(Xm)) / (2 * h)
    g_alpha = (f(p=p.replace(alpha=p.alpha + h)) - f(p=p.replace(alpha=p.alpha - h))) / (2 * h)
    g_gamma = np.zeros(p.q)
    for q in range(p.q):
        up, dn = p.gamma.copy(), p.gamma.copy()
        up[q] += h
        dn[q] -= h
        g_gamma[q] = (
            f(p=p.replace(lengthscale_inverses=up)) - f(p=p.replace(lengthscale_inverses=dn))
        ) / (2 * h)
    g_sigma = (
        f(p=p.replace(noise_sigma=p.noise_sigma + h)) - f(p=p.replace(noise_sigma=p.noise_sigma - h))
    ) / (2 * h)
    return gX, g_alpha, g_gamma, g_sigma


def fd_relative_error(X, p, y, idx) -> float:
    """Largest per-coordinate relative error of grad_column vs. differences."""
    g = grad_column(X, p, y, idx)
    gX, g_alpha, g_gamma, g_sigma = fd_gradients(X, p, y, idx)
    errs = [_rel(g.X, gX).max(), _rel(np.array(g.sigma), g_sigma)]
    if p.family == "rbf_ard":
        errs += [_rel(np.array(g.alpha), g_alpha), _rel(g.gamma, g_gamma).max()]
    return float(max(errs))
