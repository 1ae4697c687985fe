"""LibSVM ingestion, client partitioning and synthetic quadratic instances."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .problems import GlobalProblem, quadratic_problem


class ParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(frozen=True, eq=False)
class Dataset:
    """Sparse rows in CSR layout.  Feature indices are stored 1-based."""

    labels: np.ndarray  # int8, entries +1 / -1
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    dim: int

    @property
    def count(self) -> int:
        return len(self.labels)

    def row(self, r: int) -> tuple[int, dict[int, float]]:
        lo, hi = self.indptr[r], self.indptr[r + 1]
        feats = {int(j): float(v) for j, v in zip(self.indices[lo:hi], self.values[lo:hi])}
        return int(self.labels[r]), feats

    @property
    def rows(self):
        return [self.row(r) for r in range(self.count)]

    def dense(self) -> np.ndarray:
        X = np.zeros((self.count, self.dim))
        for r in range(self.count):
            lo, hi = self.indptr[r], self.indptr[r + 1]
            X[r, self.indices[lo:hi] - 1] = self.values[lo:hi]
        return X

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.dim == other.dim
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.values, other.values))


def parse_libsvm(text: bytes | str) -> Dataset:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    raw, indptr, indices, values = [], [0], [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        try:
            raw.append(float(tokens[0]))
        except ValueError:
            raise ParseError(lineno, f"non-numeric label {tokens[0]!r}") from None
        prev = 0
        for tok in tokens[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise ParseError(lineno, f"expected idx:val, got {tok!r}")
            try:
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise ParseError(lineno, f"non-numeric token {tok!r}") from None
            if idx < 1:
                raise ParseError(lineno, f"feature index {idx} < 1")
            if idx <= prev:
                raise ParseError(lineno, f"feature index {idx} not increasing")
            prev = idx
            indices.append(idx)
            values.append(val)
        indptr.append(len(indices))
    if not raw:
        raise ParseError(0, "empty file")
    indices = np.asarray(indices, dtype=np.int64)
    return Dataset(
        labels=_map_labels(np.asarray(raw)),
        indptr=np.asarray(indptr, dtype=np.int64),
        indices=indices,
        values=np.asarray(values, dtype=np.float64),
        dim=int(indices.max()) if indices.size else 0,
    )


def _map_labels(raw: np.ndarray) -> np.ndarray:
    # sign mapping, except for two-class files that use two positive codes
    # (e.g. 1/2), where the smaller code becomes -1
    uniq = np.unique(raw)
    if len(uniq) == 2 and uniq[0] > 0:
        return np.where(raw == uniq[0], -1, 1).astype(np.int8)
    return np.where(raw > 0, 1, -1).astype(np.int8)


def load_libsvm(path) -> Dataset:
    with open(path, "rb") as fh:
        return parse_libsvm(fh.read())


def to_libsvm(ds: Dataset) -> str:
    out = []
    for r in range(ds.count):
        lo, hi = ds.indptr[r], ds.indptr[r + 1]
        parts = ["+1" if ds.labels[r] > 0 else "-1"]
        parts += [f"{int(j)}:{float(v)!r}" for j, v in zip(ds.indices[lo:hi], ds.values[lo:hi])]
        out.append(" ".join(parts))
    return "\n".join(out) + "\n"


@dataclass(frozen=True)
class Partition:
    shards: tuple[tuple[int, ...], ...]
    n: int
    m: int


def partition(ds: Dataset, n: int, mode: str = "random", seed: int = 0) -> Partition:
    """Split rows into n equal shards.

    The last ``count mod n`` rows are dropped first.  ``random`` permutes the
    retained rows with a seeded generator; ``label_sorted`` sorts them stably
    by label (-1 before +1).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if n > ds.count:
        raise ValueError(f"cannot split {ds.count} rows across {n} clients")
    m = ds.count // n
    keep = np.arange(n * m)
    if mode == "random":
        order = keep[np.random.default_rng(seed).permutation(n * m)]
    elif mode == "label_sorted":
        order = keep[np.argsort(ds.labels[keep], kind="stable")]
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    shards = tuple(tuple(int(v) for v in order[i * m:(i + 1) * m]) for i in range(n))
    return Partition(shards, n, m)


@dataclass(frozen=True)
class QuadraticSpec:
    n: int
    m: int
    d: int
    mu: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not (self.n >= 1 and self.m >= 1 and self.d >= 1):
            raise ValueError("n, m, d must be positive")
        if self.m > self.d:
            raise ValueError(f"m={self.m} orthonormal vectors do not fit in d={self.d}")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")


# instance types: 0/2 and 1/3 share parameters, only the seed stream differs
INSTANCE_TYPES = {0: 1, 1: 10, 2: 1, 3: 10}


def instance_spec(kind: int, n: int, d: int, mu: float = 1e-3, seed: int = 0) -> QuadraticSpec:
    if kind not in INSTANCE_TYPES:
        raise ValueError(f"instance type must be one of {sorted(INSTANCE_TYPES)}")
    return QuadraticSpec(n, INSTANCE_TYPES[kind], d, mu, seed * 4 + kind)


def _orthonormal(rng, m, d, retries=10):
    for _ in range(retries):
        G = rng.standard_normal((d, m))
        Q, R = np.linalg.qr(G)
        if np.abs(np.diag(R)).min() > 1e-8 * math.sqrt(d):
            return Q.T
    raise RuntimeError("orthogonalization stayed rank deficient")


def make_quadratic(spec: QuadraticSpec, solve: bool = True) -> GlobalProblem:
    A = np.empty((spec.n, spec.m, spec.d))
    z = np.empty((spec.n, spec.d))
    for i in range(spec.n):
        rng = np.random.default_rng([spec.seed, i])
        z[i] = rng.standard_normal(spec.d)
        A[i] = _orthonormal(rng, spec.m, spec.d)
    return quadratic_problem(A, z, spec.mu, solve=solve)
