"""BIF matrices from chain traces.

The BIF of train row i on observable j is minus the sample covariance of
their traces, ``-Cov(L_i, Phi_j)``, with the unbiased ``1/(N-1)``
normalization and means taken over the pooled draws of all chains. The
normalized BIF replaces the covariance by the Pearson correlation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IncompatibleError, InsufficientDrawsError, UnsupportedError, ValidationError
from .sgld import ChainTrace

MATRIX_KINDS = ("bif", "normalized_bif", "dampened_if", "gradsim")


@dataclass(frozen=True, eq=False)
class InfluenceMatrix:
    """An attribution matrix: rows are train examples (or their components),
    columns are observables. ``metadata`` is free-form JSON-able detail."""

    values: np.ndarray
    row_labels: tuple[str, ...]
    col_labels: tuple[str, ...]
    kind: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValidationError(f"influence matrix must be 2-D, got shape {v.shape}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "row_labels", tuple(self.row_labels))
        object.__setattr__(self, "col_labels", tuple(self.col_labels))
        if v.shape != (len(self.row_labels), len(self.col_labels)):
            raise ValidationError(
                f"shape {v.shape} does not match {len(self.row_labels)} row and "
                f"{len(self.col_labels)} column labels")
        if self.kind not in MATRIX_KINDS:
            raise ValidationError(f"unknown matrix kind {self.kind!r}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("influence matrix has non-finite entries")
        if self.kind == "normalized_bif" and v.size and np.max(np.abs(v)) > 1.0:
            raise ValidationError("normalized BIF entries must lie in [-1, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _center(X: np.ndarray) -> np.ndarray:
    Xc = X - X.mean(axis=1, keepdims=True)
    # constant rows are exactly zero, not rounding noise
    Xc[np.ptp(X, axis=1) == 0] = 0.0
    return Xc


def _center_per_chain(X: np.ndarray, slices) -> np.ndarray:
    return np.concatenate([_center(X[:, s]) for s in slices], axis=1)


def bif_from_trace(trace: ChainTrace, per_chain_centering: bool = False) -> InfluenceMatrix:
    """``-Cov(L_i, Phi_j)`` over the pooled trace.

    ``per_chain_centering`` subtracts each chain's own means instead (and
    normalizes by ``N - C``); it is a diagnostic, not the estimator.
    """
    N = trace.draw_count
    if N < 2:
        raise InsufficientDrawsError(N)
    if per_chain_centering:
        slices = trace.chain_slices()
        if N - len(slices) < 1:
            raise InsufficientDrawsError(N)
        Lc = _center_per_chain(trace.train_losses, slices)
        Pc = _center_per_chain(trace.observables, slices)
        denom = N - len(slices)
    else:
        Lc, Pc = _center(trace.train_losses), _center(trace.observables)
        denom = N - 1
    values = -(Lc @ Pc.T) / denom
    meta = {"draws": N, "chains": trace.chains, "centering": "per_chain" if per_chain_centering else "pooled"}
    return InfluenceMatrix(values, trace.row_labels, trace.col_labels, "bif", meta)


def _correlation(Lc, Pc):
    nl = np.linalg.norm(Lc, axis=1)
    npp = np.linalg.norm(Pc, axis=1)
    zl, zp = nl == 0, npp == 0
    U = Lc / np.where(zl, 1.0, nl)[:, None]
    V = Pc / np.where(zp, 1.0, npp)[:, None]
    corr = np.clip(U @ V.T, -1.0, 1.0)
    return corr, zl, zp


def normalized_bif_from_trace(trace: ChainTrace) -> InfluenceMatrix:
    """``-corr(L_i, Phi_j)``; rows or columns with zero variance give 0 and are
    listed in ``metadata``."""
    N = trace.draw_count
    if N < 2:
        raise InsufficientDrawsError(N)
    corr, zl, zp = _correlation(_center(trace.train_losses), _center(trace.observables))
    values = -corr
    values[values == 0] = 0.0  # no negative zeros in artifacts
    meta = {"draws": N, "chains": trace.chains,
            "zero_variance_rows": np.flatnonzero(zl).tolist(),
            "zero_variance_cols": np.flatnonzero(zp).tolist()}
    return InfluenceMatrix(values, trace.row_labels, trace.col_labels, "normalized_bif", meta)


class StreamingCovariance:
    """Single-pass cross-covariance between two vector streams.

    Keeps running means, the cross co-moment and the two marginal second
    moments (Welford); memory does not grow with the number of draws.
    States built on disjoint draws combine with :meth:`merge`.
    """

    def __init__(self, n_rows: int, n_cols: int, row_labels=None, col_labels=None):
        self.count = 0
        self.mean_l = np.zeros(n_rows)
        self.mean_p = np.zeros(n_cols)
        self.comoment = np.zeros((n_rows, n_cols))
        self.m2_l = np.zeros(n_rows)
        self.m2_p = np.zeros(n_cols)
        self.row_labels = tuple(row_labels) if row_labels is not None else tuple(f"train/{i}" for i in range(n_rows))
        self.col_labels = tuple(col_labels) if col_labels is not None else tuple(f"query/{j}" for j in range(n_cols))

    @classmethod
    def like(cls, trace: ChainTrace) -> "StreamingCovariance":
        return cls(len(trace.row_labels), len(trace.col_labels), trace.row_labels, trace.col_labels)

    def update(self, l_column, phi_column) -> "StreamingCovariance":
        l = np.asarray(l_column, dtype=np.float64)
        p = np.asarray(phi_column, dtype=np.float64)
        if l.shape != self.mean_l.shape:
            raise IncompatibleError(f"loss column has length {l.size}, state expects {self.mean_l.size}")
        if p.shape != self.mean_p.shape:
            raise IncompatibleError(f"observable column has length {p.size}, state expects {self.mean_p.size}")
        self.count += 1
        dl = l - self.mean_l
        self.mean_l += dl / self.count
        dp = p - self.mean_p
        self.mean_p += dp / self.count
        dp_new = p - self.mean_p
        self.comoment += np.outer(dl, dp_new)
        self.m2_l += dl * (l - self.mean_l)
        self.m2_p += dp * dp_new
        return self

    def merge(self, other: "StreamingCovariance") -> "StreamingCovariance":
        """Combine with a state over disjoint draws (pairwise update)."""
        if self.comoment.shape != other.comoment.shape:
            raise IncompatibleError("cannot merge streaming states of different shapes")
        na, nb = self.count, other.count
        if nb == 0:
            return self
        if na == 0:
            for name in ("count", "mean_l", "mean_p", "comoment", "m2_l", "m2_p"):
                val = getattr(other, name)
                setattr(self, name, val.copy() if isinstance(val, np.ndarray) else val)
            return self
        n = na + nb
        dl = other.mean_l - self.mean_l
        dp = other.mean_p - self.mean_p
        w = na * nb / n
        self.comoment += other.comoment + w * np.outer(dl, dp)
        self.m2_l += other.m2_l + w * dl * dl
        self.m2_p += other.m2_p + w * dp * dp
        self.mean_l += dl * (nb / n)
        self.mean_p += dp * (nb / n)
        self.count = n
        return self

    def finalize(self, normalized: bool = False) -> InfluenceMatrix:
        if self.count < 2:
            raise InsufficientDrawsError(self.count)
        if not normalized:
            return InfluenceMatrix(-self.comoment / (self.count - 1), self.row_labels, self.col_labels,
                                   "bif", {"draws": self.count, "centering": "pooled"})
        sl, sp = np.sqrt(self.m2_l), np.sqrt(self.m2_p)
        zl, zp = sl == 0, sp == 0
        corr = self.comoment / np.outer(np.where(zl, 1.0, sl), np.where(zp, 1.0, sp))
        corr[zl, :] = 0.0
        corr[:, zp] = 0.0
        values = -np.clip(corr, -1.0, 1.0)
        values[values == 0] = 0.0
        meta = {"draws": self.count, "zero_variance_rows": np.flatnonzero(zl).tolist(),
                "zero_variance_cols": np.flatnonzero(zp).tolist()}
        return InfluenceMatrix(values, self.row_labels, self.col_labels, "normalized_bif", meta)


def streaming_cov_update(state: StreamingCovariance, l_column, phi_column) -> StreamingCovariance:
    return state.update(l_column, phi_column)


def streaming_bif_from_trace(trace: ChainTrace, normalized: bool = False) -> InfluenceMatrix:
    """Per-chain streaming states merged in chain order."""
    total = StreamingCovariance.like(trace)
    for s in trace.chain_slices():
        part = StreamingCovariance.like(trace)
        for l, p in zip(trace.train_losses[:, s].T, trace.observables[:, s].T):
            part.update(l, p)
        total.merge(part)
    out = total.finalize(normalized)
    out.metadata["chains"] = trace.chains
    return out


def _parent(label: str) -> str | None:
    parts = label.split("/")
    return "/".join(parts[:2]) if len(parts) == 3 else None


def _group(labels):
    parents = [_parent(l) for l in labels]
    if any(p is None for p in parents):
        return None
    order, index = [], {}
    for p in parents:
        if p not in index:
            index[p] = len(order)
            order.append(p)
    return order, np.array([index[p] for p in parents])


def aggregate_components(mat: InfluenceMatrix, mode: str) -> InfluenceMatrix:
    """Sum per-component rows (``sum_over_train_components``) or columns
    (``sum_over_query_components``) into one entry per parent example.

    Covariance is bilinear, so the result equals the BIF of the summed losses.
    """
    if mode not in ("sum_over_query_components", "sum_over_train_components"):
        raise ValidationError(f"unknown aggregation mode {mode!r}")
    if mat.kind in ("normalized_bif", "gradsim"):
        raise UnsupportedError(f"{mat.kind} scores are not additive over components")
    by_cols = mode == "sum_over_query_components"
    grouped = _group(mat.col_labels if by_cols else mat.row_labels)
    if grouped is None:
        axis = "column" if by_cols else "row"
        raise UnsupportedError(f"{axis} labels carry no component structure")
    parents, idx = grouped
    if by_cols:
        values = np.zeros((mat.shape[0], len(parents)))
        np.add.at(values, (slice(None), idx), mat.values)
        return InfluenceMatrix(values, mat.row_labels, parents, mat.kind, dict(mat.metadata, aggregated=mode))
    values = np.zeros((len(parents), mat.shape[1]))
    np.add.at(values, idx, mat.values)
    return InfluenceMatrix(values, parents, mat.col_labels, mat.kind, dict(mat.metadata, aggregated=mode))


def top_k(mat: InfluenceMatrix, k: int = 10, order: str = "abs") -> list[dict]:
    """Per observable, the ``k`` train rows with the largest scores.

    ``order`` is ``"abs"`` (largest magnitude), ``"desc"`` or ``"asc"``; ties
    break by row index so the output is deterministic.
    """
    if order not in ("abs", "desc", "asc"):
        raise ValidationError(f"unknown order {order!r}")
    records = []
    for j, col_label in enumerate(mat.col_labels):
        col = mat.values[:, j]
        key = {"abs": -np.abs(col), "desc": -col, "asc": col}[order]
        ranked = np.lexsort((np.arange(col.size), key))[:k]
        for rank, i in enumerate(ranked):
            records.append({"query_id": col_label, "rank": rank + 1,
                            "train_id": mat.row_labels[i], "score": float(col[i])})
    return records
