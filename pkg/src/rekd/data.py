"""Planted-rationale classification data and the flat text dataset format.

Each synthetic sample has ``L`` feature rows of width ``D``. ``k_signal``
rows, chosen uniformly at random, hold the unit-norm signature vector of the
sample's class; every other row is Gaussian noise. Only the signal rows are
needed to classify, which gives rationale selection an objective target.

Text format, one sample per line after a ``#L=<int> D=<int> C=<int>`` header::

    label,v_0,...,v_{L*D-1}[|m_0,...,m_{L-1}]
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from rekd.tensor import Rng


class ConfigError(ValueError):
    pass


class ParseError(ValueError):
    pass


@dataclass
class Sample:
    X: np.ndarray
    y: int
    true_mask: np.ndarray | None = None


@dataclass
class Dataset:
    """Stacked samples: ``X [N, L, D]``, ``y [N]``, optional ``true_mask [N, L]``."""

    X: np.ndarray
    y: np.ndarray
    true_mask: np.ndarray | None = None
    C: int | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.true_mask is not None:
            self.true_mask = np.asarray(self.true_mask, dtype=np.float64)
        if self.C is None:
            self.C = int(self.y.max()) + 1 if len(self.y) else 0

    def __len__(self):
        return len(self.y)

    def __getitem__(self, idx) -> "Dataset":
        if isinstance(idx, (int, np.integer)):
            idx = [idx]
        tm = None if self.true_mask is None else self.true_mask[idx]
        return Dataset(self.X[idx], self.y[idx], tm, self.C)

    def sample(self, i: int) -> Sample:
        tm = None if self.true_mask is None else self.true_mask[i]
        return Sample(self.X[i], int(self.y[i]), tm)

    @property
    def L(self) -> int:
        return self.X.shape[1]

    @property
    def D(self) -> int:
        return self.X.shape[2]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.C)


@dataclass(frozen=True)
class DatasetSpec:
    L: int = 20
    D: int = 8
    C: int = 4
    k_signal: int = 3
    n_train: int = 800
    n_dev: int = 200
    n_test: int = 400
    noise_std: float = 1.0
    seed: int = 0

    def validate(self):
        if min(self.L, self.D, self.C) < 1:
            raise ConfigError("L, D and C must be positive")
        if not 1 <= self.k_signal < self.L:
            raise ConfigError(f"k_signal must be in [1, L), got {self.k_signal}")
        for name in ("n_train", "n_dev", "n_test"):
            n = getattr(self, name)
            if n < 0 or n % self.C:
                raise ConfigError(f"{name}={n} must be a non-negative multiple of C={self.C}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


def class_signatures(C: int, D: int, rng: Rng) -> np.ndarray:
    """``C`` unit vectors in ``R^D``; orthonormal when ``C <= D``."""
    A = rng.generator.standard_normal((D, max(C, D)))
    if C <= D:
        q, _ = np.linalg.qr(A[:, :C])
        return q.T.copy()
    sig = A[:, :C].T
    return sig / np.linalg.norm(sig, axis=1, keepdims=True)


def _generate(spec: DatasetSpec, n: int, signatures: np.ndarray, rng: Rng) -> Dataset:
    gen = rng.generator
    y = np.tile(np.arange(spec.C), n // spec.C)
    X = spec.noise_std * gen.standard_normal((n, spec.L, spec.D))
    mask = np.zeros((n, spec.L))
    for i in range(n):
        pos = gen.choice(spec.L, size=spec.k_signal, replace=False)
        X[i, pos] = signatures[y[i]]
        mask[i, pos] = 1.0
    order = gen.permutation(n)
    return Dataset(X[order], y[order], mask[order], spec.C)


def gen_planted(spec: DatasetSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Train/dev/test splits, each exactly class-balanced."""
    spec.validate()
    root = Rng(spec.seed, (7,))
    sig = class_signatures(spec.C, spec.D, root.child(0))
    n_total = spec.n_train + spec.n_dev + spec.n_test
    pool = _generate(spec, n_total, sig, root.child(1))
    fractions = [spec.n_train / n_total, spec.n_dev / n_total, spec.n_test / n_total]
    train, dev, test = split(pool, fractions, seed=spec.seed)
    return train, dev, test


def split(samples: Dataset, fractions: Sequence[float], seed: int) -> list[Dataset]:
    """Stratified, disjoint and exhaustive split by per-class fractions."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be non-negative and sum to 1, got {fractions}")
    gen = Rng(seed, (11,)).generator
    parts: list[list[int]] = [[] for _ in fractions]
    for c in range(samples.C):
        idx = np.flatnonzero(samples.y == c)
        idx = idx[gen.permutation(len(idx))]
        counts = np.floor(fractions * len(idx) + 1e-9).astype(int)
        # hand leftovers to the largest remainders, earliest split first on ties
        rem = np.maximum(fractions * len(idx) - counts, 0.0)
        for j in np.argsort(-rem, kind="stable")[: len(idx) - counts.sum()]:
            counts[j] += 1
        for j, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            if fractions[j] > 0 and len(chunk) == 0 and len(idx) > 0:
                raise ConfigError(f"class {c} is empty in split {j}")
            parts[j].extend(chunk.tolist())
    return [samples[sorted(p)] for p in parts]


def batch_iter(samples: Dataset, batch_size: int, rng: Rng | None) -> Iterator[Dataset]:
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = len(samples)
    order = np.arange(n) if rng is None else rng.generator.permutation(n)
    for start in range(0, n, batch_size):
        yield samples[order[start:start + batch_size]]


# ---------------------------------------------------------------- text format


def save_table(path: str | os.PathLike, samples: Dataset) -> None:
    N, L, D = samples.X.shape if len(samples) else (0, samples.X.shape[1], samples.X.shape[2])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#L={L} D={D} C={samples.C}\n")
        for i in range(N):
            row = [str(int(samples.y[i]))] + [repr(float(v)) for v in samples.X[i].reshape(-1)]
            line = ",".join(row)
            if samples.true_mask is not None:
                line += "|" + ",".join(str(int(m)) for m in samples.true_mask[i])
            fh.write(line + "\n")


def load_table(path: str | os.PathLike, L: int | None = None, D: int | None = None,
               C: int | None = None) -> Dataset:
    """Read the text format; header values fill any dimension not given."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    start = 0
    if lines and lines[0].startswith("#"):
        header = dict(tok.split("=", 1) for tok in lines[0][1:].split())
        try:
            hL, hD, hC = int(header["L"]), int(header["D"]), int(header["C"])
        except (KeyError, ValueError) as exc:
            raise ParseError(f"{path}:1: malformed header {lines[0]!r}") from exc
        for name, given, found in (("L", L, hL), ("D", D, hD), ("C", C, hC)):
            if given is not None and given != found:
                raise ParseError(f"{path}:1: header {name}={found} but {given} expected")
        L, D, C = hL, hD, hC
        start = 1
    if L is None or D is None or C is None:
        if not lines:
            return Dataset(np.zeros((0, L or 0, D or 0)), np.zeros(0, dtype=np.int64), None, C or 0)
        raise ParseError(f"{path}: no header and L, D, C not given")

    X, y, masks = [], [], []
    has_mask = None
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        body, sep, mask_part = line.partition("|")
        fields = body.split(",")
        if len(fields) != 1 + L * D:
            raise ParseError(f"{path}:{lineno}: expected {1 + L * D} values, got {len(fields)}")
        try:
            label = int(fields[0])
            values = np.array([float(v) for v in fields[1:]])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        if not 0 <= label < C:
            raise ValueError(f"{path}:{lineno}: label {label} outside [0, {C})")
        if has_mask is None:
            has_mask = bool(sep)
        elif has_mask != bool(sep):
            raise ParseError(f"{path}:{lineno}: mask block present on some rows only")
        if sep:
            m = mask_part.split(",")
            if len(m) != L or any(v not in ("0", "1") for v in m):
                raise ParseError(f"{path}:{lineno}: mask block needs {L} binary values")
            masks.append([float(v) for v in m])
        X.append(values.reshape(L, D))
        y.append(label)
    if not X:
        return Dataset(np.zeros((0, L, D)), np.zeros(0, dtype=np.int64), None, C)
    return Dataset(np.stack(X), np.array(y), np.array(masks) if has_mask else None, C)
