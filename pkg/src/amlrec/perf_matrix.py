"""Sparse pipeline x dataset performance matrix.

Rows are pipelines, columns are datasets. Missing entries are structurally
absent: they are never stored as sentinels, so every consumer sees only the
observed scores of a column.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Mapping

import numpy as np


class ParseError(ValueError):
    """Raised when a matrix file cannot be parsed."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ValidationError(ValueError):
    """Raised when matrix contents violate an invariant."""


class SparsePerfMatrix:
    """Immutable sparse matrix of pipeline scores.

    Args:
        pipeline_ids: N distinct pipeline identifiers.
        dataset_ids: D distinct dataset identifiers.
        entries: mapping ``(pipeline_index, dataset_index) -> score``.
    """

    def __init__(
        self,
        pipeline_ids: Iterable[str],
        dataset_ids: Iterable[str],
        entries: Mapping[tuple[int, int], float],
    ):
        self._pipeline_ids = tuple(str(p) for p in pipeline_ids)
        self._dataset_ids = tuple(str(d) for d in dataset_ids)
        _check_unique(self._pipeline_ids, "pipeline")
        _check_unique(self._dataset_ids, "dataset")
        n, d = len(self._pipeline_ids), len(self._dataset_ids)

        rows = [[] for _ in range(d)]
        clean: dict[tuple[int, int], float] = {}
        for (i, j), score in entries.items():
            i, j = int(i), int(j)
            if not (0 <= i < n and 0 <= j < d):
                raise ValidationError(f"entry ({i}, {j}) outside {n}x{d} matrix")
            score = float(score)
            if not math.isfinite(score):
                raise ValidationError(f"entry ({i}, {j}) is not finite")
            clean[(i, j)] = score
            rows[j].append(i)
        self._entries = clean

        self._col_idx = []
        self._col_val = []
        for j in range(d):
            idx = np.array(sorted(rows[j]), dtype=np.intp)
            val = np.array([clean[(int(i), j)] for i in idx], dtype=float)
            idx.setflags(write=False)
            val.setflags(write=False)
            self._col_idx.append(idx)
            self._col_val.append(val)

    # -- basic properties -------------------------------------------------

    @property
    def n_pipelines(self) -> int:
        return len(self._pipeline_ids)

    @property
    def n_datasets(self) -> int:
        return len(self._dataset_ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_pipelines, self.n_datasets

    @property
    def pipeline_ids(self) -> tuple[str, ...]:
        return self._pipeline_ids

    @property
    def dataset_ids(self) -> tuple[str, ...]:
        return self._dataset_ids

    @property
    def entries(self) -> Mapping[tuple[int, int], float]:
        return dict(self._entries)

    @property
    def n_observed(self) -> int:
        return len(self._entries)

    @property
    def density(self) -> float:
        cells = self.n_pipelines * self.n_datasets
        return self.n_observed / cells if cells else 0.0

    @property
    def empty_columns(self) -> list[int]:
        """Dataset columns without a single observation."""
        return [j for j, idx in enumerate(self._col_idx) if idx.size == 0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparsePerfMatrix):
            return NotImplemented
        return (
            self._pipeline_ids == other._pipeline_ids
            and self._dataset_ids == other._dataset_ids
            and self._entries == other._entries
        )

    def __repr__(self) -> str:
        return (
            f"SparsePerfMatrix(N={self.n_pipelines}, D={self.n_datasets}, "
            f"density={self.density:.3f})"
        )

    def get(self, pipeline: int, dataset: int) -> float | None:
        return self._entries.get((pipeline, dataset))

    # -- column access ----------------------------------------------------

    def _check_dataset(self, d: int) -> None:
        if not 0 <= d < self.n_datasets:
            raise IndexError(f"dataset index {d} out of range [0, {self.n_datasets})")

    def observed_index(self, d: int) -> list[int]:
        """Sorted pipeline indices observed on dataset ``d``."""
        self._check_dataset(d)
        return self._col_idx[d].tolist()

    def column(self, d: int) -> list[tuple[int, float]]:
        """``(pipeline_index, score)`` pairs of dataset ``d`` in index order."""
        self._check_dataset(d)
        return list(zip(self._col_idx[d].tolist(), self._col_val[d].tolist()))

    def column_arrays(self, d: int) -> tuple[np.ndarray, np.ndarray]:
        """Read-only ``(indices, scores)`` arrays for dataset ``d``."""
        self._check_dataset(d)
        return self._col_idx[d], self._col_val[d]

    def to_dense(self) -> np.ndarray:
        """Dense copy with NaN at missing cells."""
        out = np.full(self.shape, np.nan)
        for j in range(self.n_datasets):
            out[self._col_idx[j], j] = self._col_val[j]
        return out

    def dataset_index(self, dataset_id: str) -> int:
        try:
            return self._dataset_ids.index(dataset_id)
        except ValueError:
            raise KeyError(f"unknown dataset id {dataset_id!r}") from None

    # -- derived matrices -------------------------------------------------

    @classmethod
    def from_dense(
        cls,
        values: np.ndarray,
        pipeline_ids: Iterable[str] | None = None,
        dataset_ids: Iterable[str] | None = None,
    ) -> "SparsePerfMatrix":
        """Build from a dense array; NaN marks a missing cell."""
        values = np.asarray(values, dtype=float)
        if values.ndim != 2:
            raise ValidationError("dense input must be two-dimensional")
        n, d = values.shape
        if pipeline_ids is None:
            pipeline_ids = [f"p{i}" for i in range(n)]
        if dataset_ids is None:
            dataset_ids = [f"d{j}" for j in range(d)]
        rows, cols = np.nonzero(~np.isnan(values))
        entries = {(int(i), int(j)): float(values[i, j]) for i, j in zip(rows, cols)}
        return cls(pipeline_ids, dataset_ids, entries)

    def select_datasets(self, datasets: Iterable[int]) -> "SparsePerfMatrix":
        """Matrix restricted to the given dataset columns, in that order."""
        datasets = [int(j) for j in datasets]
        for j in datasets:
            self._check_dataset(j)
        entries = {}
        for new_j, j in enumerate(datasets):
            for i, y in zip(self._col_idx[j].tolist(), self._col_val[j].tolist()):
                entries[(i, new_j)] = y
        return SparsePerfMatrix(
            self._pipeline_ids, [self._dataset_ids[j] for j in datasets], entries
        )

    def without_entries(self, removed: Iterable[tuple[int, int]]) -> "SparsePerfMatrix":
        entries = dict(self._entries)
        for key in removed:
            del entries[key]
        return SparsePerfMatrix(self._pipeline_ids, self._dataset_ids, entries)


def _check_unique(ids: tuple[str, ...], kind: str) -> None:
    if len(set(ids)) != len(ids):
        seen = set()
        dup = next(x for x in ids if x in seen or seen.add(x))
        raise ValidationError(f"duplicate {kind} id {dup!r}")


@dataclass(frozen=True)
class ObservationMask:
    """Entries removed from a matrix for held-out evaluation."""

    held_out: frozenset = field(default_factory=frozenset)
    seed: int = 0


def mask_holdout(
    m: SparsePerfMatrix, fraction: float, seed: int
) -> tuple[SparsePerfMatrix, ObservationMask]:
    """Hold out ``floor(fraction * |entries|)`` observed entries uniformly at random.

    Returns the training view and the mask describing the removed entries.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    keys = sorted(m.entries)
    n_hold = int(math.floor(fraction * len(keys)))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(keys), size=n_hold, replace=False) if n_hold else []
    held = frozenset(keys[k] for k in chosen)
    return m.without_entries(held), ObservationMask(held_out=held, seed=seed)


# -- serialization ----------------------------------------------------------


def _as_text(source) -> io.TextIOBase:
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(source.decode("utf-8"))
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8", newline="")


def load_matrix(source: BinaryIO | bytes, format: str = "csv") -> SparsePerfMatrix:
    """Parse a matrix from a CSV or JSON byte stream.

    CSV layout: the header row is an empty cell followed by dataset ids; each
    following row starts with a pipeline id. Empty cells are missing entries.
    JSON layout: ``{"pipeline_ids": [...], "dataset_ids": [...],
    "entries": [[i, j, score], ...]}``.
    """
    text = _as_text(source)
    if format == "csv":
        m = _load_csv(text)
    elif format == "json":
        m = _load_json(text)
    else:
        raise ValueError(f"unknown matrix format {format!r}")
    outside = sum(1 for y in m.entries.values() if not 0.0 <= y <= 1.0)
    if outside:
        warnings.warn(f"{outside} scores fall outside [0, 1]", stacklevel=2)
    return m


def _load_csv(text) -> SparsePerfMatrix:
    reader = csv.reader(text)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file", row=1) from None
    dataset_ids = header[1:]
    width = len(header)
    pipeline_ids = []
    entries = {}
    for rownum, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != width:
            raise ParseError(f"expected {width} cells, found {len(row)}", row=rownum)
        i = len(pipeline_ids)
        pipeline_ids.append(row[0])
        for j, cell in enumerate(row[1:]):
            cell = cell.strip()
            if not cell:
                continue
            try:
                entries[(i, j)] = float(cell)
            except ValueError:
                raise ParseError(f"non-numeric cell {cell!r}", row=rownum) from None
    return SparsePerfMatrix(pipeline_ids, dataset_ids, entries)


def _load_json(text) -> SparsePerfMatrix:
    try:
        doc = json.load(text)
        entries = {(int(i), int(j)): float(y) for i, j, y in doc["entries"]}
        return SparsePerfMatrix(doc["pipeline_ids"], doc["dataset_ids"], entries)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ParseError(f"invalid matrix JSON: {exc}") from exc


def save_matrix(m: SparsePerfMatrix, sink: BinaryIO, format: str = "csv") -> None:
    """Write ``m`` so that :func:`load_matrix` recovers it exactly."""
    text = io.StringIO(newline="")
    if format == "csv":
        writer = csv.writer(text, lineterminator="\n")
        writer.writerow([""] + list(m.dataset_ids))
        dense = m.to_dense()
        for i, pid in enumerate(m.pipeline_ids):
            writer.writerow(
                [pid] + ["" if math.isnan(v) else repr(float(v)) for v in dense[i]]
            )
    elif format == "json":
        doc = {
            "pipeline_ids": list(m.pipeline_ids),
            "dataset_ids": list(m.dataset_ids),
            "entries": [[i, j, y] for (i, j), y in sorted(m.entries.items())],
        }
        json.dump(doc, text)
        text.write("\n")
    else:
        raise ValueError(f"unknown matrix format {format!r}")
    sink.write(text.getvalue().encode("utf-8"))


def format_from_path(path: str | os.PathLike) -> str:
    return "json" if str(path).lower().endswith(".json") else "csv"


def read_matrix(path: str | os.PathLike) -> SparsePerfMatrix:
    with open(path, "rb") as fh:
        return load_matrix(fh, format_from_path(path))


def write_matrix(m: SparsePerfMatrix, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        save_matrix(m, fh, format_from_path(path))
