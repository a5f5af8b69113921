"""Replay simulation of the selection protocol over many test datasets."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .acquisition import AcquisitionConfig
from .evaluation import (
    CurveSet,
    SynthConfig,
    build_curves,
    difficulty_weighted_sample,
    synth_dense,
)
from .gplvm import Model, TrainConfig, train
from .perf_matrix import SparsePerfMatrix, mask_holdout
from .recommender import (
    ColumnOracle,
    SelectionTrace,
    random_baseline,
    run_episode,
    warm_start,
)

logger = logging.getLogger(__name__)

METHODS = ("pmf-ei", "pmf-greedy", "random", "random2x", "random4x")
_POLICY = {"pmf-ei": "ei", "pmf-greedy": "greedy_mean"}
_MULTIPLIER = {"random": 1, "random2x": 2, "random4x": 4}


def episode_seed(seed: int, dataset: int, replicate: int, method: str) -> int:
    tag = METHODS.index(method) if method in METHODS else len(METHODS)
    ss = np.random.SeedSequence([seed, dataset, replicate, tag])
    return int(ss.generate_state(1)[0])


def simulate(
    model: Model | None,
    oracles: Sequence[ColumnOracle],
    budget: int,
    warm: Sequence[int],
    methods: Sequence[str] = METHODS,
    n_seeds: int = 1,
    xi: float = 0.01,
    seed: int = 0,
    center: bool = False,
) -> dict[str, list[SelectionTrace]]:
    """Traces per method, ordered dataset-major then replicate.

    Warm-start picks count toward the budget of the model-based methods.
    """
    out: dict[str, list[SelectionTrace]] = {m: [] for m in methods}
    for method in methods:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        for d, oracle in enumerate(oracles):
            for r in range(n_seeds):
                s = episode_seed(seed, d, r, method)
                if method in _POLICY:
                    cfg = AcquisitionConfig(_POLICY[method], xi, s)
                    w = list(warm)[: min(len(warm), budget)]
                    tr = run_episode(model, oracle, budget, cfg, w, s, method, center)
                else:
                    tr = random_baseline(oracle, budget, _MULTIPLIER[method], s, method)
                out[method].append(tr)
        logger.info("simulated %s on %d datasets", method, len(oracles))
    return out


@dataclass
class SuiteConfig:
    """Desk-scale held-out-dataset benchmark on a synthetic matrix."""

    synth: SynthConfig = field(
        default_factory=lambda: SynthConfig(
            n_pipelines=500, n_datasets=130, q_true=4, noise_sigma=0.01, surface="nonlinear"
        )
    )
    n_test: int = 30
    train_missing: float = 0.2
    difficulty_trials: int = 100
    difficulty_iters: int = 300
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(q=5, optimizer="adam", epochs=100)
    )
    budget: int = 100
    warm: int = 5
    n_seeds: int = 20
    xi: float = 0.01
    seed: int = 0
    methods: tuple[str, ...] = ("pmf-ei", "random", "random2x", "random4x")


@dataclass
class SuiteResult:
    config: SuiteConfig
    model: Model
    train_matrix: SparsePerfMatrix
    test_datasets: list[int]
    oracles: list[ColumnOracle]
    traces: dict[str, list[SelectionTrace]]
    curves: CurveSet


def build_suite(cfg: SuiteConfig) -> tuple[SparsePerfMatrix, list[int], list[int], SparsePerfMatrix]:
    """Full matrix, test and training columns, and the thinned training matrix."""
    full = SparsePerfMatrix.from_dense(synth_dense(cfg.synth))
    test = difficulty_weighted_sample(
        full, cfg.n_test, cfg.difficulty_trials, cfg.difficulty_iters, cfg.seed
    )
    test_set = set(test)
    train_cols = [d for d in range(full.n_datasets) if d not in test_set]
    m_train = full.select_datasets(train_cols)
    if cfg.train_missing > 0:
        m_train, _ = mask_holdout(m_train, cfg.train_missing, cfg.seed)
    return full, test, train_cols, m_train


def run_suite(cfg: SuiteConfig, m_train: SparsePerfMatrix | None = None) -> SuiteResult:
    full, test, _, built_train = build_suite(cfg)
    m_train = built_train if m_train is None else m_train
    model = train(m_train, cfg.train)
    oracles = [ColumnOracle.from_matrix(full, d) for d in test]
    warm = warm_start(m_train, cfg.warm) if cfg.warm else []
    traces = simulate(
        model, oracles, cfg.budget, warm, cfg.methods, cfg.n_seeds, cfg.xi, cfg.seed
    )
    curves = build_curves(traces, {o.name: o for o in oracles}, model)
    return SuiteResult(cfg, model, m_train, test, oracles, traces, curves)


def thinned(cfg: SuiteConfig, density: float) -> SuiteConfig:
    """Same suite with the training matrix thinned to ``density``."""
    return replace(cfg, train_missing=1.0 - density)
