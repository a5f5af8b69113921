"""Pipeline recommendation by probabilistic matrix factorization.

A GP-LVM embeds ML pipelines from a sparse pipeline x dataset score matrix;
a GP posterior with expected improvement then picks pipelines to try on a
new dataset.
"""

__version__ = "0.1.0"

from .acquisition import AcquisitionConfig, expected_improvement, select_next
from .gplvm import Model, TrainConfig, nll_column, nll_total, grad_column, pca_init, train
from .kernel import KernelParams, LatentEmbedding, gram, gram_cross, kernel_value
from .perf_matrix import SparsePerfMatrix, load_matrix, mask_holdout, save_matrix
from .predictor import DatasetObservations, posterior, posterior_batch
from .recommender import ColumnOracle, random_baseline, run_episode, warm_start

__all__ = [
    "AcquisitionConfig",
    "ColumnOracle",
    "DatasetObservations",
    "KernelParams",
    "LatentEmbedding",
    "Model",
    "SparsePerfMatrix",
    "TrainConfig",
    "expected_improvement",
    "grad_column",
    "gram",
    "gram_cross",
    "kernel_value",
    "load_matrix",
    "mask_holdout",
    "nll_column",
    "nll_total",
    "pca_init",
    "posterior",
    "posterior_batch",
    "random_baseline",
    "run_episode",
    "save_matrix",
    "select_next",
    "train",
    "warm_start",
]
