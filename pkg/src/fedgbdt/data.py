"""LIBSVM ingestion, train/test splitting and equal client partitioning."""

from __future__ import annotations

import enum
import math
import sys
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class TaskKind(str, enum.Enum):
    CLASSIFICATION = "classification"
    REGRESSION = "regression"

    @classmethod
    def parse(cls, value: "str | TaskKind") -> "TaskKind":
        if isinstance(value, TaskKind):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown task kind {value!r}") from None


class LibsvmParseError(ValueError):
    """Raised for malformed LIBSVM input; ``lineno`` is 1-based."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True)
class SparseExample:
    indices: tuple[int, ...]
    values: tuple[float, ...]
    label: float

    def __post_init__(self):
        if len(self.indices) != len(self.values):
            raise ValueError("indices and values differ in length")
        prev = 0
        for idx in self.indices:
            if idx <= prev:
                raise ValueError("feature indices must be positive and strictly increasing")
            prev = idx

    @property
    def max_index(self) -> int:
        return self.indices[-1] if self.indices else 0

    def value(self, feature: int) -> float:
        """Value of a 1-based feature; absent features read as 0.0."""
        for idx, val in zip(self.indices, self.values):
            if idx == feature:
                return val
            if idx > feature:
                break
        return 0.0

    @classmethod
    def from_dense(cls, row: Sequence[float], label: float) -> "SparseExample":
        pairs = [(i + 1, float(v)) for i, v in enumerate(row) if v != 0.0]
        return cls(tuple(i for i, _ in pairs), tuple(v for _, v in pairs), float(label))


@dataclass(frozen=True, eq=True)
class Dataset:
    examples: tuple[SparseExample, ...]
    dimension: int
    task: TaskKind
    _dense: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        object.__setattr__(self, "task", TaskKind.parse(self.task))
        for ex in self.examples:
            if ex.max_index > self.dimension:
                raise ValueError(
                    f"example has feature index {ex.max_index} beyond dimension {self.dimension}"
                )
        if self.task is TaskKind.CLASSIFICATION:
            if any(ex.label not in (0.0, 1.0) for ex in self.examples):
                raise ValueError("classification labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def size(self) -> int:
        return len(self.examples)

    @cached_property
    def X(self) -> np.ndarray:
        """Dense ``(N, D)`` float64 view; absent features are zero."""
        if self._dense is not None:
            return self._dense
        out = np.zeros((len(self.examples), self.dimension), dtype=np.float64)
        for i, ex in enumerate(self.examples):
            if ex.indices:
                out[i, np.asarray(ex.indices) - 1] = ex.values
        out.flags.writeable = False
        return out

    @cached_property
    def y(self) -> np.ndarray:
        out = np.fromiter((ex.label for ex in self.examples), dtype=np.float64,
                          count=len(self.examples))
        out.flags.writeable = False
        return out

    def subset(self, rows: Iterable[int]) -> "Dataset":
        rows = list(rows)
        dense = self.X[rows] if "X" in self.__dict__ else None
        if dense is not None:
            dense.flags.writeable = False
        return Dataset(tuple(self.examples[i] for i in rows), self.dimension, self.task, dense)

    def with_dimension(self, dimension: int) -> "Dataset":
        return Dataset(self.examples, dimension, self.task)

    @classmethod
    def from_arrays(cls, X: np.ndarray, y: np.ndarray, task: "TaskKind | str") -> "Dataset":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or len(X) != len(y):
            raise ValueError("X must be 2-D with one row per label")
        examples = tuple(SparseExample.from_dense(row, label) for row, label in zip(X, y))
        dense = X.copy()
        dense.flags.writeable = False
        return cls(examples, X.shape[1], TaskKind.parse(task), dense)


def _normalize_labels(labels: list[float]) -> list[float]:
    distinct = sorted(set(labels))
    if set(distinct) <= {0.0, 1.0}:
        return labels
    if set(distinct) <= {-1.0, 1.0}:
        return [1.0 if v > 0 else 0.0 for v in labels]
    if len(distinct) == 2:
        low = distinct[0]
        return [0.0 if v == low else 1.0 for v in labels]
    raise LibsvmParseError(
        f"classification input needs a two-class label set, found {len(distinct)} labels"
    )


def parse_libsvm(text: "str | bytes", task: "TaskKind | str",
                 dimension: int | None = None) -> Dataset:
    """Parse LIBSVM text into a :class:`Dataset`.

    ``dimension`` may declare D larger than the largest observed index.
    Classification labels are normalized so the smaller class becomes 0.
    """
    task = TaskKind.parse(task)
    if isinstance(text, bytes):
        text = text.decode("utf-8")

    labels: list[float] = []
    rows: list[tuple[tuple[int, ...], tuple[float, ...]]] = []
    max_index = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise LibsvmParseError(f"non-numeric label {tokens[0]!r}", lineno) from None
        if not math.isfinite(label):
            raise LibsvmParseError(f"non-finite label {tokens[0]!r}", lineno)
        indices: list[int] = []
        values: list[float] = []
        prev = 0
        for tok in tokens[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise LibsvmParseError(f"expected idx:val, got {tok!r}", lineno)
            try:
                idx = int(idx_s)
            except ValueError:
                raise LibsvmParseError(f"non-integer feature index {idx_s!r}", lineno) from None
            if idx <= 0:
                raise LibsvmParseError(f"feature index {idx} must be >= 1", lineno)
            if idx <= prev:
                raise LibsvmParseError(
                    f"feature indices must be strictly increasing ({idx} after {prev})", lineno
                )
            try:
                val = float(val_s)
            except ValueError:
                raise LibsvmParseError(f"non-numeric feature value {val_s!r}", lineno) from None
            indices.append(idx)
            values.append(val)
            prev = idx
        max_index = max(max_index, prev)
        labels.append(label)
        rows.append((tuple(indices), tuple(values)))

    if not rows:
        raise LibsvmParseError("input contains no examples")
    if task is TaskKind.CLASSIFICATION:
        labels = _normalize_labels(labels)
    if dimension is None:
        dimension = max_index
    elif dimension < max_index:
        raise LibsvmParseError(f"declared dimension {dimension} is below max index {max_index}")

    examples = tuple(SparseExample(idx, val, lab) for (idx, val), lab in zip(rows, labels))
    return Dataset(examples, dimension, task)


def load_libsvm(path: "str | Path", task: "TaskKind | str", dimension: int | None = None) -> Dataset:
    """Read a LIBSVM file; ``"-"`` reads standard input."""
    if str(path) == "-":
        return parse_libsvm(sys.stdin.buffer.read(), task, dimension)
    return parse_libsvm(Path(path).read_bytes(), task, dimension)


def _format_number(value: float) -> str:
    if value == int(value) and abs(value) < 2**53:
        return str(int(value))
    return repr(float(value))


def dump_libsvm(ds: Dataset) -> str:
    lines = []
    for ex in ds.examples:
        parts = [_format_number(ex.label)]
        parts.extend(f"{i}:{_format_number(v)}" for i, v in zip(ex.indices, ex.values))
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def train_test_split(ds: Dataset, test_fraction: float = 0.25,
                     seed: int = 0) -> tuple[Dataset, Dataset]:
    n = len(ds)
    if n < 2:
        raise ValueError("need at least two examples to split")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    # round half up; Python's round() is banker's rounding
    n_test = int(math.floor(n * test_fraction + 0.5))
    if n_test == 0 or n_test == n:
        raise ValueError(f"test_fraction {test_fraction} leaves an empty side for N={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return ds.subset(perm[n_test:]), ds.subset(perm[:n_test])


def partition_equal(ds: Dataset, k: int, seed: int = 0) -> list[Dataset]:
    """Shuffle and cut into ``k`` IID shards; lower client ids get the remainder."""
    n = len(ds)
    if k <= 0:
        raise ValueError("number of shards must be positive")
    if k > n:
        raise ValueError(f"cannot split {n} examples into {k} shards")
    perm = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, k)
    shards = []
    start = 0
    for cid in range(k):
        stop = start + base + (1 if cid < extra else 0)
        shards.append(ds.subset(perm[start:stop]))
        start = stop
    return shards
