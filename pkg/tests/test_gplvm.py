import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from amlrec.gplvm import (
    InitializationError,
    Model,
    TrainConfig,
    TrainingError,
    grad_column,
    nll_column,
    nll_total,
    pca_init,
    train,
)
from amlrec.kernel import KernelParams, gram
from amlrec.perf_matrix import SparsePerfMatrix

from .helpers import fd_relative_error, random_instance


def test_pca_zero_matrix():
    m = SparsePerfMatrix.from_dense(np.zeros((6, 4)))
    np.testing.assert_array_equal(pca_init(m, 2).X, np.zeros((6, 2)))


def test_pca_rank_one_matches_svd_oracle():
    rng = np.random.default_rng(0)
    u = rng.standard_normal(10)
    u -= u.mean()
    w = rng.standard_normal(5)
    Y = np.outer(u, w)
    X = pca_init(SparsePerfMatrix.from_dense(Y), 1).X[:, 0]
    # proportional to u
    ratio = X / u
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-10)
    # reconstruction through the first component
    U, s, Vt = np.linalg.svd(Y, full_matrices=False)
    v = Vt[0] * np.sign(Vt[0, np.argmax(np.abs(Vt[0]))])
    # v is signed so its largest-magnitude loading is positive
    np.testing.assert_allclose(np.outer(X, v), Y, atol=1e-10)


def test_pca_with_missing_equals_imputed_dense():
    rng = np.random.default_rng(1)
    Y = rng.random((12, 6))
    Y[rng.random(Y.shape) < 0.3] = np.nan
    Y[0, :] = np.nan  # an entirely unobserved pipeline
    m = SparsePerfMatrix.from_dense(Y)
    filled = Y.copy()
    observed_means = np.nanmean(Y[1:], axis=1)
    for i in range(1, 12):
        filled[i, np.isnan(Y[i])] = observed_means[i - 1]
    filled[0, :] = np.nanmean(Y)
    dense = pca_init(SparsePerfMatrix.from_dense(filled), 3).X
    np.testing.assert_array_equal(pca_init(m, 3).X, dense)


def test_pca_errors():
    m = SparsePerfMatrix(["a", "b"], ["x", "y"], {})
    with pytest.raises(InitializationError):
        pca_init(m, 1)
    with pytest.raises(InitializationError):
        pca_init(SparsePerfMatrix.from_dense(np.ones((3, 2))), 3)


def test_nll_single_zero_observation():
    p = KernelParams("rbf_ard", 1.3, [1.0, 1.0], 0.2, 1e-6)
    X = np.zeros((3, 2))
    expected = 0.5 * math.log(2 * math.pi * (1.3 + 0.04 + 1e-6))
    assert nll_column(X, p, [0.0], [1]) == pytest.approx(expected, abs=1e-14)


@pytest.mark.parametrize("family", ["rbf_ard", "linear"])
def test_nll_matches_dense_mvn(family):
    rng = np.random.default_rng(2)
    X = rng.standard_normal((9, 2))
    p = KernelParams(family, 0.8, [0.5, 2.0], 0.3, 1e-8)
    y = rng.standard_normal(9)
    idx = np.arange(9)
    ref = -multivariate_normal(np.zeros(9), gram(X, p)).logpdf(y)
    assert nll_column(X, p, y, idx) == pytest.approx(ref, abs=1e-10)


def test_nll_scaling_only_changes_quadratic_term():
    X, p, y, idx = random_instance(np.random.default_rng(3))
    C = gram(X[idx], p)
    quad = y @ np.linalg.solve(C, y)
    delta = nll_column(X, p, 10 * y, idx) - nll_column(X, p, y, idx)
    assert delta == pytest.approx(0.5 * 99 * quad, rel=1e-10)


def test_nll_total_one_entry_and_errors():
    p = KernelParams("rbf_ard", 1.0, [1.0], 0.1, 0.0)
    m = SparsePerfMatrix(["a", "b"], ["x", "y"], {(1, 1): 0.0})
    X = np.zeros((2, 1))
    assert nll_total(X, p, m) == pytest.approx(0.5 * math.log(2 * math.pi * 1.01), abs=1e-14)
    with pytest.raises(ValueError):
        nll_column(X, p, [], [])
    with pytest.raises(ValueError):
        nll_column(X, p, [0.1, 0.2], [0])


def test_nll_total_dense_and_permutation():
    rng = np.random.default_rng(4)
    Y = rng.standard_normal((10, 5))
    X = rng.standard_normal((10, 2))
    p = KernelParams("rbf_ard", 1.1, [0.7, 1.3], 0.25, 1e-8)
    m = SparsePerfMatrix.from_dense(Y)
    C = gram(X, p)
    dense = sum(-multivariate_normal(np.zeros(10), C).logpdf(Y[:, d]) for d in range(5))
    assert nll_total(X, p, m) == pytest.approx(dense, abs=1e-10)
    perm = SparsePerfMatrix.from_dense(Y[:, rng.permutation(5)])
    assert abs(nll_total(X, p, perm) - nll_total(X, p, m)) <= 1e-12


def test_grad_untouched_rows_zero():
    X, p, y, idx = random_instance(np.random.default_rng(5))
    g = grad_column(X, p, y, idx)
    others = np.setdiff1d(np.arange(X.shape[0]), idx)
    assert others.size > 0
    assert np.all(g.X[others] == 0.0)


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("family", ["rbf_ard", "linear"])
def test_grad_finite_differences(seed, family):
    X, p, y, idx = random_instance(np.random.default_rng(seed), family=family)
    assert fd_relative_error(X, p, y, idx) <= 1e-4


def test_grad_sigma_positive_for_zero_targets():
    X, p, _, idx = random_instance(np.random.default_rng(6))
    g = grad_column(X, p, np.zeros(idx.size), idx)
    assert g.sigma > 0


def small_matrix(n=8, d=4, seed=0, missing=0.0):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, 2))
    Y = np.tanh(Z @ rng.standard_normal((2, d))) + 0.05 * rng.standard_normal((n, d))
    Y[rng.random(Y.shape) < missing] = np.nan
    return SparsePerfMatrix.from_dense(Y)


def test_train_smoke_and_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    model = train(small_matrix(5, 3), TrainConfig(q=2, epochs=1))
    assert math.isfinite(model.training_meta["final_nll"])
    assert model.training_meta["epochs_run"] == 1
    assert model.X.shape == (5, 2)


def test_train_adam_descends():
    cfg = TrainConfig(q=2, optimizer="adam", epochs=200, seed=1)
    m = SparsePerfMatrix.from_dense(np.random.default_rng(0).random((8, 4)))
    hist = train(m, cfg).training_meta["nll_history"]
    assert len(hist) == 200
    tail = np.array(hist[19:])
    assert np.all(np.diff(tail) <= 1e-3)
    assert hist[-1] < hist[0]


def test_train_deterministic_and_worker_independent():
    m = small_matrix(12, 7, seed=2, missing=0.3)
    cfg = dict(q=2, optimizer="adam", epochs=15, column_batch=3, seed=9)
    a = train(m, TrainConfig(**cfg))
    b = train(m, TrainConfig(**cfg))
    c = train(m, TrainConfig(**cfg, workers=3))
    assert np.array_equal(a.X, b.X) and a.params == b.params
    assert np.array_equal(a.X, c.X) and a.params == c.params
    assert a.training_meta["nll_history"] == b.training_meta["nll_history"]


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_unobserved_rows_keep_initial_value(optimizer):
    Y = small_matrix(10, 5, seed=3).to_dense()
    Y[[2, 7], :] = np.nan
    m = SparsePerfMatrix.from_dense(Y)
    X0 = pca_init(m, 2).X
    model = train(m, TrainConfig(q=2, optimizer=optimizer, learning_rate=1e-2, epochs=5))
    np.testing.assert_array_equal(model.X[[2, 7]], X0[[2, 7]])
    assert not np.array_equal(model.X[0], X0[0])


def test_training_error_reports_epoch():
    with pytest.raises(TrainingError) as exc:
        train(small_matrix(), TrainConfig(q=2, optimizer="sgd", learning_rate=1e6, epochs=5))
    assert exc.value.epoch >= 1


def test_model_json_roundtrip_and_checkpoint(tmp_path):
    path = tmp_path / "ckpt.json"
    cfg = TrainConfig(q=2, epochs=4, checkpoint_every=2, checkpoint_path=str(path), optimizer="adam")
    model = train(small_matrix(), cfg)
    assert path.exists()
    saved = Model.load(path)
    assert saved.training_meta["epochs_run"] == 4
    assert np.array_equal(saved.X, model.X)
    assert saved.params == model.params
    import json

    doc = json.loads(path.read_text())
    assert set(doc) == {"q", "kernel", "X", "meta"}
    assert set(doc["kernel"]) >= {"family", "alpha", "gamma", "sigma"}
