"""Examples, dataset splits, and the seeded synthetic generators."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, ValidationError


@dataclass(frozen=True, eq=False)
class Example:
    """One data point.

    ``target`` is a float vector for squared-error models and an integer
    class index for likelihood (classification) models. ``components`` is the
    number S of loss sub-terms the example's loss splits into, if any.
    """

    features: np.ndarray
    target: np.ndarray | int
    components: int | None = None

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.features, dtype=np.float64))
        if x.ndim != 1:
            raise ValidationError(f"features must be a vector, got shape {x.shape}")
        object.__setattr__(self, "features", x)
        t = self.target
        if isinstance(t, (int, np.integer)) and not isinstance(t, bool):
            object.__setattr__(self, "target", int(t))
        else:
            object.__setattr__(self, "target", np.atleast_1d(np.asarray(t, dtype=np.float64)))
        if self.components is not None:
            s = int(self.components)
            if s < 1:
                raise ValidationError(f"components must be >= 1, got {s}")
            object.__setattr__(self, "components", s)

    @property
    def is_classification(self) -> bool:
        return isinstance(self.target, int)


@dataclass(frozen=True, eq=False)
class Batch:
    """Examples stacked into arrays: ``X`` is (B, in); ``Y`` is (B, out) floats
    or (B,) integer labels. ``components`` holds S per example (0 = none)."""

    X: np.ndarray
    Y: np.ndarray
    components: np.ndarray

    def __len__(self) -> int:
        return self.X.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.X[idx], self.Y[idx], self.components[idx])

    @property
    def has_components(self) -> bool:
        return bool(len(self)) and bool(np.all(self.components > 0))


def stack(examples: Sequence[Example]) -> Batch:
    if len(examples) == 0:
        raise ValidationError("cannot stack an empty list of examples")
    in_dim = examples[0].features.shape[0]
    cls = examples[0].is_classification
    for k, ex in enumerate(examples):
        if ex.features.shape[0] != in_dim:
            raise DimensionError(f"features of example {k}", in_dim, ex.features.shape[0])
        if ex.is_classification != cls:
            raise ValidationError(f"example {k} mixes class-index and vector targets")
    X = np.stack([ex.features for ex in examples])
    if cls:
        Y = np.array([ex.target for ex in examples], dtype=np.int64)
    else:
        out_dim = examples[0].target.shape[0]
        for k, ex in enumerate(examples):
            if ex.target.shape[0] != out_dim:
                raise DimensionError(f"target of example {k}", out_dim, ex.target.shape[0])
        Y = np.stack([ex.target for ex in examples])
    comps = np.array([ex.components or 0 for ex in examples], dtype=np.int64)
    return Batch(X, Y, comps)


def unstack(batch: Batch) -> list[Example]:
    out = []
    for k in range(len(batch)):
        target = int(batch.Y[k]) if batch.Y.ndim == 1 else batch.Y[k].copy()
        s = int(batch.components[k]) or None
        out.append(Example(batch.X[k].copy(), target, s))
    return out


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    train: list[Example]
    query: list[Example]

    def __post_init__(self):
        if len(self.train) < 1:
            raise ValidationError("training set is empty (n >= 1 required)")
        if len(self.query) < 1:
            raise ValidationError("query set is empty (q >= 1 required)")
        object.__setattr__(self, "train", list(self.train))
        object.__setattr__(self, "query", list(self.query))
        stack(self.train + self.query)  # dimension compatibility

    @property
    def n(self) -> int:
        return len(self.train)

    @property
    def q(self) -> int:
        return len(self.query)

    def train_batch(self) -> Batch:
        return stack(self.train)

    def query_batch(self) -> Batch:
        return stack(self.query)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, b in (("train", self.train_batch()), ("query", self.query_batch())):
            h.update(name.encode())
            for arr in (b.X, b.Y, b.components):
                a = np.ascontiguousarray(arr)
                h.update(str(a.dtype).encode() + str(a.shape).encode())
                h.update(a.astype(a.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()


def _split(X, Y, n_train, components=None) -> DatasetSplit:
    def make(lo, hi):
        exs = []
        for k in range(lo, hi):
            t = int(Y[k]) if Y.ndim == 1 else Y[k]
            exs.append(Example(X[k], t, components))
        return exs

    return DatasetSplit(make(0, n_train), make(n_train, X.shape[0]))


def two_gaussians(n_train: int, n_query: int, dim: int = 2, separation: float = 2.0,
                  seed: int = 0) -> DatasetSplit:
    """Binary classification: balanced classes drawn from unit-variance
    Gaussians whose means sit at +-separation/2 along a random unit direction."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    total = n_train + n_query
    y = rng.integers(0, 2, size=total)
    X = rng.standard_normal((total, dim)) + np.outer(2 * y - 1, u) * (separation / 2)
    return _split(X, y.astype(np.int64), n_train)


def linear_teacher(n_train: int, n_query: int, dim: int = 5, out_dim: int = 1,
                   noise: float = 0.1, seed: int = 0,
                   components: bool = False) -> DatasetSplit:
    """Regression targets ``y = W x + noise`` from a random Gaussian teacher.

    With ``components=True`` every example declares one loss component per
    output coordinate.
    """
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((out_dim, dim)) / np.sqrt(dim)
    total = n_train + n_query
    X = rng.standard_normal((total, dim))
    Y = X @ W.T + noise * rng.standard_normal((total, out_dim))
    return _split(X, Y, n_train, out_dim if components else None)


GENERATORS = {"two-gaussians": two_gaussians, "linear-teacher": linear_teacher}


def load_dataset(path: str | Path) -> DatasetSplit:
    """Load a split from ``.npz`` (arrays ``X_train, Y_train, X_query, Y_query``
    and optional ``components``) or ``.json`` (same keys, nested lists).

    Integer-typed 1-D targets are class labels; anything else is regression.
    """
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
    elif path.suffix == ".json":
        raw = json.loads(path.read_text())
        arrays = {k: np.asarray(v) for k, v in raw.items()}
    else:
        raise ValidationError(f"unsupported dataset format: {path.suffix}")
    missing = {"X_train", "Y_train", "X_query", "Y_query"} - set(arrays)
    if missing:
        raise ValidationError(f"dataset {path} lacks arrays: {sorted(missing)}")
    comps = arrays.get("components")
    comps = int(comps) if comps is not None else None

    def examples(X, Y):
        X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
        Y = np.asarray(Y)
        if Y.ndim == 1 and np.issubdtype(Y.dtype, np.integer):
            return [Example(x, int(t), comps) for x, t in zip(X, Y)]
        Y = Y.astype(np.float64).reshape(len(Y), -1)
        return [Example(x, t, comps) for x, t in zip(X, Y)]

    return DatasetSplit(examples(arrays["X_train"], arrays["Y_train"]),
                        examples(arrays["X_query"], arrays["Y_query"]))
