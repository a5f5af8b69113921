"""Sequential pipeline selection on a target dataset, plus random baselines."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import IO, Iterable, Iterator, Sequence

import numpy as np
from scipy.stats import rankdata

from .acquisition import AcquisitionConfig, select_next
from .gplvm import Model
from .perf_matrix import SparsePerfMatrix
from .predictor import DatasetObservations, posterior_batch

MIN_WARM_DATASETS = 5


class ColumnOracle:
    """Ground-truth scores of one dataset; ``None`` where never measured."""

    def __init__(self, scores: Sequence[float], name: str | int | None = None):
        self.scores = np.asarray(scores, dtype=float)
        self.scores.setflags(write=False)
        self.name = name

    @classmethod
    def from_matrix(cls, m: SparsePerfMatrix, d: int) -> "ColumnOracle":
        dense = np.full(m.n_pipelines, np.nan)
        idx, val = m.column_arrays(d)
        dense[idx] = val
        return cls(dense, name=m.dataset_ids[d])

    def __len__(self) -> int:
        return self.scores.size

    def __call__(self, pipeline: int) -> float | None:
        y = self.scores[pipeline]
        return None if math.isnan(y) else float(y)

    @property
    def observed(self) -> np.ndarray:
        return np.flatnonzero(~np.isnan(self.scores))

    def max(self) -> float:
        if self.observed.size == 0:
            raise ValueError("column has no observed scores")
        return float(np.nanmax(self.scores))

    def min(self) -> float:
        if self.observed.size == 0:
            raise ValueError("column has no observed scores")
        return float(np.nanmin(self.scores))


@dataclass
class Step:
    iteration: int
    pipeline: int
    observed: float | None
    best_so_far: float | None
    pred_mean: float | None = None
    pred_variance: float | None = None
    # every pipeline drawn in this step when a baseline aggregates draws
    draws: list[int] | None = None


@dataclass
class SelectionTrace:
    dataset: str | int
    method: str
    seed: int
    budget: int
    steps: list[Step] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def pipelines(self) -> list[int]:
        return [s.pipeline for s in self.steps]

    def best_so_far(self) -> np.ndarray:
        """Best score per step; NaN before the first observation."""
        return np.array(
            [np.nan if s.best_so_far is None else s.best_so_far for s in self.steps]
        )


# -- trace files ------------------------------------------------------------


def _clean(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def write_traces(traces: Iterable[SelectionTrace], fh: IO[str]) -> None:
    """JSON lines: a header object per episode followed by its step objects."""
    for tr in traces:
        header = {
            "type": "header",
            "method": tr.method,
            "dataset": tr.dataset,
            "seed": tr.seed,
            "budget": tr.budget,
            "n_steps": len(tr.steps),
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in tr.steps:
            fh.write(json.dumps({"type": "step", **_clean(asdict(s))}, sort_keys=True) + "\n")


def read_traces(fh: IO[str]) -> Iterator[SelectionTrace]:
    current = None
    for lineno, line in enumerate(fh, start=1):
        if not line.strip():
            continue
        doc = json.loads(line)
        kind = doc.pop("type", None)
        if kind == "header":
            if current is not None:
                yield current
            current = SelectionTrace(doc["dataset"], doc["method"], doc["seed"], doc["budget"])
        elif kind == "step":
            if current is None:
                raise ValueError(f"line {lineno}: step before any header")
            current.steps.append(
                Step(
                    iteration=doc["iteration"],
                    pipeline=doc["pipeline"],
                    observed=doc.get("observed"),
                    best_so_far=doc.get("best_so_far"),
                    pred_mean=doc.get("pred_mean"),
                    pred_variance=doc.get("pred_variance"),
                    draws=doc.get("draws"),
                )
            )
        else:
            raise ValueError(f"line {lineno}: unknown record type {kind!r}")
    if current is not None:
        yield current


# -- warm start -------------------------------------------------------------


def average_ranks(m: SparsePerfMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Mean per-dataset rank (1 = best score) and the number of datasets seen."""
    n = m.n_pipelines
    rank_sum = np.zeros(n)
    counts = np.zeros(n, dtype=int)
    for d in range(m.n_datasets):
        idx, val = m.column_arrays(d)
        if idx.size == 0:
            continue
        rank_sum[idx] += rankdata(-val, method="average")
        counts[idx] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        avg = np.where(counts > 0, rank_sum / np.maximum(counts, 1), np.inf)
    return avg, counts


def warm_start(
    m_train: SparsePerfMatrix, k: int, min_datasets: int = MIN_WARM_DATASETS
) -> list[int]:
    """The ``k`` pipelines with the best average rank over training datasets.

    Pipelines observed on fewer than ``min_datasets`` datasets are ineligible;
    ties go to the lower pipeline index.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    if m_train.n_observed == 0:
        raise ValueError("training matrix is empty")
    if k == 0:
        return []
    avg, counts = average_ranks(m_train)
    eligible = np.flatnonzero(counts >= min_datasets)
    if eligible.size < k:
        raise ValueError(
            f"only {eligible.size} pipelines observed on >= {min_datasets} datasets, "
            f"need {k}"
        )
    order = np.lexsort((eligible, avg[eligible]))
    return eligible[order[:k]].tolist()


# -- episodes ---------------------------------------------------------------


def _best(current: float | None, y: float | None) -> float | None:
    if y is None:
        return current
    return y if current is None or y > current else current


def run_episode(
    model: Model | None,
    oracle: ColumnOracle,
    budget: int,
    cfg: AcquisitionConfig,
    warm: Sequence[int] = (),
    seed: int = 0,
    method: str | None = None,
    center: bool = False,
) -> SelectionTrace:
    """Simulate one selection run against a ground-truth column.

    Warm-start pipelines are evaluated first, in order. After that each step
    conditions the posterior on the scores seen so far, picks the next
    pipeline with ``cfg.policy`` and looks its score up in ``oracle``. A
    missing score uses up a step but adds nothing to the posterior.
    """
    n = len(oracle)
    warm = [int(w) for w in warm]
    if len(set(warm)) != len(warm):
        raise ValueError("warm-start pipelines must be distinct")
    if budget < len(warm):
        raise ValueError(f"budget {budget} smaller than warm start {len(warm)}")
    if budget > n:
        warnings.warn(f"budget {budget} exceeds {n} pipelines; truncating", stacklevel=2)
        budget = n
    needs_model = cfg.policy != "random"
    if needs_model and model is None:
        raise ValueError(f"policy {cfg.policy!r} needs a model")
    if model is not None and model.X.shape[0] != n:
        raise ValueError("model and oracle disagree on the number of pipelines")

    rng = np.random.default_rng(seed)
    trace = SelectionTrace(oracle.name, method or f"pmf-{cfg.policy}", seed, budget)
    obs = DatasetObservations()
    evaluated: set[int] = set()
    best = None

    for t in range(1, budget + 1):
        mean = var = None
        if t <= len(warm):
            pick = warm[t - 1]
            if needs_model:
                pred = posterior_batch(model, obs, [pick], center=center)[0]
                mean, var = pred.mean, pred.variance
        elif needs_model:
            open_ = [i for i in range(n) if i not in evaluated]
            preds = posterior_batch(model, obs, open_, center=center)
            y_ref = best if best is not None else -math.inf
            pick = select_next(preds, evaluated, cfg, y_ref, rng=rng)
            pred = preds[open_.index(pick)]
            mean, var = pred.mean, pred.variance
        else:
            open_ = [i for i in range(n) if i not in evaluated]
            pick = open_[int(rng.integers(len(open_)))]
        y = oracle(pick)
        evaluated.add(pick)
        if y is not None:
            obs.add(pick, y)
        best = _best(best, y)
        trace.steps.append(Step(t, pick, y, best, mean, var))
    return trace


def random_baseline(
    oracle: ColumnOracle,
    budget: int,
    multiplier: int = 1,
    seed: int = 0,
    method: str | None = None,
) -> SelectionTrace:
    """Random search without replacement with ``multiplier`` draws per step.

    Base step ``t`` reports the best of the first ``t * multiplier`` draws,
    as if ``multiplier`` pipelines were evaluated in parallel.
    """
    if multiplier not in (1, 2, 4):
        raise ValueError("multiplier must be 1, 2 or 4")
    n = len(oracle)
    if budget < 0 or budget * multiplier > n:
        raise ValueError(f"budget {budget} x {multiplier} exceeds {n} pipelines")
    rng = np.random.default_rng(seed)
    draws = rng.permutation(n)[: budget * multiplier].tolist()
    name = method or ("random" if multiplier == 1 else f"random{multiplier}x")
    trace = SelectionTrace(oracle.name, name, seed, budget)
    best = None
    for t in range(1, budget + 1):
        group = draws[(t - 1) * multiplier : t * multiplier]
        scores = [oracle(i) for i in group]
        seen = [(y, i) for y, i in zip(scores, group) if y is not None]
        if seen:
            y, pick = max(seen, key=lambda s: s[0])
        else:
            y, pick = None, group[0]
        best = _best(best, y)
        trace.steps.append(
            Step(t, pick, y, best, draws=group if multiplier > 1 else None)
        )
    return trace
