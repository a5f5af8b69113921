"""Evaluation curves, test-set selection and synthetic benchmark matrices."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import IO, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .gplvm import Model
from .perf_matrix import SparsePerfMatrix
from .predictor import DatasetObservations, posterior_batch
from .recommender import ColumnOracle, SelectionTrace

METRICS = ("avg_rank", "regret", "mse", "posterior_variance")


class AlignmentError(ValueError):
    """Traces that should share an iteration axis do not."""


# -- per-trace curves -------------------------------------------------------


def regret_curve(trace: SelectionTrace, oracle: ColumnOracle) -> np.ndarray:
    """Gap between the column maximum and the best score found at each step.

    Before the first observed score the regret is ``max - min`` of the column,
    i.e. no better than having picked the worst pipeline.
    """
    if len(trace) == 0:
        raise ValueError("trace is empty")
    if oracle.observed.size == 0:
        raise ValueError("regret undefined on a column without scores")
    best = trace.best_so_far()
    best = np.where(np.isnan(best), oracle.min(), best)
    return oracle.max() - best


def _check_aligned(traces: Mapping[str, Sequence[SelectionTrace]]) -> tuple[int, int]:
    sizes = {len(v) for v in traces.values()}
    if len(sizes) != 1:
        raise AlignmentError("methods have different numbers of traces")
    n_inst = sizes.pop()
    lengths = {len(t) for v in traces.values() for t in v}
    if len(lengths) > 1:
        raise AlignmentError(f"traces have different lengths {sorted(lengths)}")
    return n_inst, (lengths.pop() if lengths else 0)


def rank_matrix(traces: Mapping[str, Sequence[SelectionTrace]]) -> dict[str, np.ndarray]:
    """Per-instance ranks of each method by best-so-far score (1 = best).

    ``traces[method][k]`` must be the k-th instance (dataset, seed) for every
    method. Ties share the average rank.
    """
    methods = list(traces)
    n_inst, T = _check_aligned(traces)
    out = {m: np.zeros((n_inst, T)) for m in methods}
    for k in range(n_inst):
        best = np.vstack([traces[m][k].best_so_far() for m in methods]).reshape(len(methods), T)
        best = np.where(np.isnan(best), -np.inf, best)
        for t in range(T):
            r = rankdata(-best[:, t], method="average")
            for mi, m in enumerate(methods):
                out[m][k, t] = r[mi]
    return out


def rank_curves(traces: Mapping[str, Sequence[SelectionTrace]]) -> dict[str, np.ndarray]:
    """Average rank per iteration over all instances; lower is better."""
    return {m: r.mean(axis=0) for m, r in rank_matrix(traces).items()}


def _trace_key(trace: SelectionTrace) -> tuple:
    return (trace.dataset, tuple((s.pipeline, s.observed) for s in trace.steps))


def prediction_matrix(
    model: Model,
    traces: Sequence[SelectionTrace],
    oracles: Sequence[ColumnOracle],
    center: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-trace MSE and mean posterior variance after each step.

    After step t the posterior is conditioned on the trace's first t scores
    and evaluated on every pipeline with a known score that has not been
    picked yet. Entries are NaN where that candidate set is empty.
    """
    if len(traces) != len(oracles):
        raise AlignmentError("one oracle per trace required")
    T = len(traces[0]) if traces else 0
    mse = np.full((len(traces), T), np.nan)
    var = np.full((len(traces), T), np.nan)
    cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
    for k, (tr, oracle) in enumerate(zip(traces, oracles)):
        if len(tr) != T:
            raise AlignmentError("traces have different lengths")
        key = _trace_key(tr)
        if key in cache:
            mse[k], var[k] = cache[key]
            continue
        known = set(oracle.observed.tolist())
        obs = DatasetObservations()
        picked: set[int] = set()
        for t, step in enumerate(tr.steps):
            picked.add(step.pipeline)
            if step.draws:
                picked.update(step.draws)
            if step.observed is not None:
                obs.add(step.pipeline, step.observed)
            cand = sorted(known - picked)
            if not cand:
                continue
            preds = posterior_batch(model, obs, cand, center=center)
            mu = np.array([p.mean for p in preds])
            v = np.array([p.variance for p in preds])
            mse[k, t] = float(np.mean((mu - oracle.scores[cand]) ** 2))
            var[k, t] = float(np.mean(v))
        cache[key] = (mse[k].copy(), var[k].copy())
    return mse, var


def prediction_curves(model, traces, oracles, center: bool = False):
    """Dataset-averaged MSE and posterior variance per iteration."""
    mse, var = prediction_matrix(model, traces, oracles, center=center)
    return _nanmean(mse), _nanmean(var)


def _nanmean(a: np.ndarray) -> np.ndarray:
    counts = np.sum(~np.isnan(a), axis=0)
    sums = np.nansum(a, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


# -- curve sets -------------------------------------------------------------


@dataclass
class CurveSet:
    """Per-method, per-metric mean curves with standard-error bands."""

    values: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    stderr: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def add(self, method: str, metric: str, per_instance: np.ndarray, groups: Sequence) -> None:
        """Aggregate an ``(instances, T)`` matrix: mean over instances of the
        same group (dataset) first, then mean and standard error across groups.
        """
        mean, se = aggregate_by_group(per_instance, groups)
        self.values.setdefault(method, {})[metric] = mean
        self.stderr.setdefault(method, {})[metric] = se

    def get(self, method: str, metric: str) -> np.ndarray:
        return self.values[method][metric]

    def write_csv(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "iteration", "metric", "value", "stderr"])
        for method in sorted(self.values):
            for metric in METRICS:
                if metric not in self.values[method]:
                    continue
                vals = self.values[method][metric]
                errs = self.stderr[method][metric]
                for t, (v, e) in enumerate(zip(vals, errs), start=1):
                    w.writerow([method, t, metric, _fmt(v), _fmt(e)])

    @classmethod
    def read_csv(cls, fh: IO[str]) -> "CurveSet":
        rows: dict[tuple[str, str], list[tuple[int, float, float]]] = {}
        for row in csv.DictReader(fh):
            rows.setdefault((row["method"], row["metric"]), []).append(
                (int(row["iteration"]), float(row["value"]), float(row["stderr"]))
            )
        out = cls()
        for (method, metric), items in rows.items():
            items.sort()
            out.values.setdefault(method, {})[metric] = np.array([v for _, v, _ in items])
            out.stderr.setdefault(method, {})[metric] = np.array([e for _, _, e in items])
        return out


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def aggregate_by_group(per_instance: np.ndarray, groups: Sequence) -> tuple[np.ndarray, np.ndarray]:
    per_instance = np.asarray(per_instance, dtype=float)
    if per_instance.ndim != 2 or per_instance.shape[0] != len(groups):
        raise AlignmentError("one group label per instance row required")
    labels = list(dict.fromkeys(groups))
    rows = np.array([_nanmean(per_instance[[g == lab for g in groups]]) for lab in labels])
    if rows.size == 0:
        return np.zeros(per_instance.shape[1]), np.zeros(per_instance.shape[1])
    mean = _nanmean(rows)
    counts = np.sum(~np.isnan(rows), axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        dev = np.where(np.isnan(rows), 0.0, rows - mean) ** 2
        sd = np.sqrt(dev.sum(axis=0) / np.maximum(counts - 1, 1))
        se = np.where(counts > 1, sd / np.sqrt(np.maximum(counts, 1)), 0.0)
    return mean, se


def build_curves(
    traces: Mapping[str, Sequence[SelectionTrace]],
    oracles: Mapping[str | int, ColumnOracle],
    model: Model | None = None,
    model_methods: Sequence[str] = ("pmf-ei", "pmf-greedy"),
    center: bool = False,
) -> CurveSet:
    """All curves for aligned per-method traces; grouped by dataset.

    ``oracles`` maps a trace's dataset label to its ground-truth column. MSE
    and variance are computed only for methods in ``model_methods`` and only
    when a model is supplied.
    """
    _check_aligned(traces) if traces else None
    out = CurveSet()
    if not traces:
        return out
    ranks = rank_matrix(traces)
    for method, trs in traces.items():
        groups = [t.dataset for t in trs]
        T = len(trs[0]) if trs else 0
        if T == 0:
            for metric in ("avg_rank", "regret"):
                out.add(method, metric, np.zeros((len(trs), 0)), groups)
            continue
        regrets = np.array([regret_curve(t, oracles[t.dataset]) for t in trs])
        out.add(method, "avg_rank", ranks[method], groups)
        out.add(method, "regret", regrets, groups)
        if model is not None and method in model_methods:
            mse, var = prediction_matrix(model, trs, [oracles[t.dataset] for t in trs], center)
            out.add(method, "mse", mse, groups)
            out.add(method, "posterior_variance", var, groups)
    return out


# -- difficulty-weighted test set -------------------------------------------


def difficulty_weights(
    m: SparsePerfMatrix,
    trials: int = 100,
    iters: int = 300,
    seed: int = 0,
    aggregate: str = "mean",
) -> np.ndarray:
    """How badly random search does on each dataset.

    For every dataset, ``trials`` random searches draw ``iters`` pipelines
    without replacement from all N (a missing score wastes the draw). The
    difficulty is the regret averaged over iterations and trials
    (``aggregate="mean"``) or the final regret averaged over trials
    (``"final"``).
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if aggregate not in ("mean", "final"):
        raise ValueError(f"unknown aggregate {aggregate!r}")
    n = m.n_pipelines
    iters = min(iters, n)
    streams = np.random.SeedSequence(seed).spawn(m.n_datasets)
    out = np.zeros(m.n_datasets)
    for d in range(m.n_datasets):
        idx, val = m.column_arrays(d)
        if idx.size == 0:
            continue
        col = np.full(n, -np.inf)
        col[idx] = val
        rng = np.random.default_rng(streams[d])
        order = rng.permuted(np.tile(np.arange(n), (trials, 1)), axis=1)[:, :iters]
        best = np.maximum.accumulate(col[order], axis=1)
        best = np.where(np.isneginf(best), val.min(), best)
        regret = val.max() - best
        out[d] = regret.mean() if aggregate == "mean" else regret[:, -1].mean()
    return out


def weighted_sample_without_replacement(
    weights: np.ndarray, k: int, rng: np.random.Generator
) -> list[int]:
    """Successive draws with probability proportional to the remaining weights.

    Zero-weight items are drawn (uniformly) only once every positive-weight
    item is taken; all-zero weights reduce to uniform sampling.
    """
    weights = np.asarray(weights, dtype=float)
    if k > weights.size:
        raise ValueError(f"cannot draw {k} of {weights.size}")
    positive = np.flatnonzero(weights > 0)
    zero = np.flatnonzero(weights <= 0)
    if k <= positive.size:
        p = weights[positive] / weights[positive].sum()
        return positive[rng.choice(positive.size, size=k, replace=False, p=p)].tolist()
    first = positive.tolist()
    if positive.size:
        p = weights[positive] / weights[positive].sum()
        first = positive[rng.choice(positive.size, size=positive.size, replace=False, p=p)].tolist()
    rest = rng.choice(zero, size=k - positive.size, replace=False).tolist()
    return first + rest


def difficulty_weighted_sample(
    m: SparsePerfMatrix,
    n_test: int,
    trials: int = 100,
    iters: int = 300,
    seed: int = 0,
    aggregate: str = "mean",
) -> list[int]:
    """Draw ``n_test`` dataset indices, favouring datasets hard for random search."""
    if n_test > m.n_datasets:
        raise ValueError(f"n_test {n_test} exceeds {m.n_datasets} datasets")
    w = difficulty_weights(m, trials, iters, seed, aggregate)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    return weighted_sample_without_replacement(w, n_test, rng)


# -- synthetic matrices -----------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_pipelines: int = 200
    n_datasets: int = 50
    q_true: int = 3
    noise_sigma: float = 0.01
    missing_fraction: float = 0.0
    surface: str = "linear"
    seed: int = 0

    def __post_init__(self):
        if self.q_true < 1 or self.q_true > min(self.n_pipelines, self.n_datasets):
            raise ValueError("q_true must lie in [1, min(N, D)]")
        if not 0.0 <= self.missing_fraction < 1.0:
            raise ValueError("missing_fraction must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.surface not in ("linear", "nonlinear"):
            raise ValueError(f"unknown surface {self.surface!r}")


def synth_dense(cfg: SynthConfig) -> np.ndarray:
    """Fully observed synthetic score matrix (noise included)."""
    rng = np.random.default_rng(cfg.seed)
    n, d, q = cfg.n_pipelines, cfg.n_datasets, cfg.q_true
    Z = rng.standard_normal((n, q))
    if cfg.surface == "linear":
        W = rng.standard_normal((q, d))
        Y = Z @ W
    else:
        # each dataset: q sigmoidal ridge features of the shared latent factors
        A = rng.standard_normal((d, q, q)) * 1.5
        c = rng.standard_normal((d, q))
        w = rng.standard_normal((d, q)) / math.sqrt(q)
        act = np.einsum("nk,dqk->ndq", Z, A) + c[None]
        Y = np.einsum("ndq,dq->nd", 1.0 / (1.0 + np.exp(-act)), w)
    return Y + cfg.noise_sigma * rng.standard_normal((n, d))


def synth_generate(cfg: SynthConfig) -> SparsePerfMatrix:
    """Synthetic matrix with ``round(missing_fraction * N * D)`` cells dropped."""
    Y = synth_dense(cfg)
    n_drop = int(round(cfg.missing_fraction * Y.size))
    if n_drop:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
        flat = rng.choice(Y.size, size=n_drop, replace=False)
        Y = Y.copy()
        Y.flat[flat] = np.nan
    return SparsePerfMatrix.from_dense(Y)


# -- SVG --------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def curves_svg(curves: CurveSet, metric: str, width: int = 640, height: int = 400) -> str:
    """Small self-contained SVG line chart of one metric for every method."""
    series = [
        (m, curves.values[m][metric])
        for m in sorted(curves.values)
        if metric in curves.values[m] and curves.values[m][metric].size
    ]
    pad = 50
    finite = np.concatenate([s[~np.isnan(s)] for _, s in series]) if series else np.zeros(0)
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    T = max((s.size for _, s in series), default=1)

    def xy(t, v):
        x = pad + (width - 2 * pad) * (t / max(T - 1, 1))
        y = height - pad - (height - 2 * pad) * ((v - lo) / (hi - lo))
        return f"{x:.2f},{y:.2f}"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14">{metric}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{pad - 5}" y="{height - pad}" text-anchor="end" font-size="10">{lo:.3g}</text>',
        f'<text x="{pad - 5}" y="{pad + 4}" text-anchor="end" font-size="10">{hi:.3g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 15}" text-anchor="end" font-size="10">{T}</text>',
    ]
    for k, (method, s) in enumerate(series):
        color = _COLORS[k % len(_COLORS)]
        pts = " ".join(xy(t, v) for t, v in enumerate(s) if not math.isnan(v))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(
            f'<text x="{width - pad + 2}" y="{pad + 14 * k}" font-size="10" fill="{color}">{method}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
