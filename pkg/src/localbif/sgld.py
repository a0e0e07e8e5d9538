"""Localized SGLD chains that record train-loss and observable traces.

Each update is

    w <- w - (eps/2) * [ (n_beta/m) * sum_{k in batch} grad l_k(w) + gamma * (w - w_star) ] + N(0, eps)

with the minibatch drawn uniformly with replacement. Losses and observables
are recorded *before* each update. Every chain restarts from ``w_star`` and
owns an RNG stream derived from ``(seed, chain_index)``.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Batch, DatasetSplit, Example, stack
from .errors import DivergenceError, UnsupportedDecompositionError, ValidationError
from .models import (
    ModelSpec,
    as_batch,
    check_params,
    component_losses_unchecked,
    grad_sum_unchecked,
    losses_unchecked,
)

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1e12
PRECONDITIONERS = ("none", "rmsprop")


@dataclass(frozen=True)
class SgldConfig:
    """Sampler hyperparameters. Defaults are the retraining-experiment row of
    the reference hyperparameter table (m=1024, C=4, T=100, b=0, eps=1e-5,
    n_beta=200, gamma=1e4)."""

    epsilon: float = 1e-5
    n_beta: float = 200.0
    gamma: float = 10000.0
    batch_size: int = 1024
    chains: int = 4
    draws_per_chain: int = 100
    burn_in: int = 0
    seed: int = 0
    preconditioner: str = "none"
    rmsprop_decay: float = 0.99
    rmsprop_damping: float = 1e-8
    weight_mask: tuple[bool, ...] | None = None
    # test-only: drop the injected Gaussian noise
    zero_noise: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.n_beta > 0:
            raise ValidationError(f"n_beta must be > 0, got {self.n_beta}")
        if not self.gamma >= 0:
            raise ValidationError(f"gamma must be >= 0, got {self.gamma}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.chains < 1:
            raise ValidationError(f"chains must be >= 1, got {self.chains}")
        if self.draws_per_chain < 2:
            raise ValidationError(f"draws_per_chain must be >= 2, got {self.draws_per_chain}")
        if self.burn_in < 0:
            raise ValidationError(f"burn_in must be >= 0, got {self.burn_in}")
        if not 0 <= self.seed < 2**64:
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.preconditioner not in PRECONDITIONERS:
            raise ValidationError(f"unknown preconditioner {self.preconditioner!r}")
        if not 0 <= self.rmsprop_decay < 1:
            raise ValidationError(f"rmsprop_decay must lie in [0, 1), got {self.rmsprop_decay}")
        if not self.rmsprop_damping > 0:
            raise ValidationError(f"rmsprop_damping must be > 0, got {self.rmsprop_damping}")
        if self.weight_mask is not None:
            mask = tuple(bool(m) for m in self.weight_mask)
            if not any(mask):
                raise ValidationError("weight_mask must leave at least one weight free")
            object.__setattr__(self, "weight_mask", mask)

    def check_against(self, spec: ModelSpec, n: int) -> None:
        if self.batch_size > n:
            raise ValidationError(f"batch_size {self.batch_size} exceeds training set size {n}")
        if self.weight_mask is not None and len(self.weight_mask) != spec.d:
            raise ValidationError(f"weight_mask has length {len(self.weight_mask)}, model has d={spec.d}")

    @property
    def total_draws(self) -> int:
        return self.chains * self.draws_per_chain


@dataclass
class RmspropState:
    """Running mean of squared drift; the per-coordinate scale is
    ``1 / (sqrt(v_hat) + damping)`` with Adam-style bias correction."""

    v: np.ndarray
    steps: int = 0

    @classmethod
    def zeros(cls, d: int) -> "RmspropState":
        return cls(np.zeros(d))


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, chain]))


# -- observables -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ObservableSet:
    """Scalar functions of the parameters: per-example losses, or per-component
    losses when ``per_component`` is set."""

    batch: Batch
    per_component: bool
    labels: tuple[str, ...]
    _groups: tuple = field(default=(), repr=False)

    def __len__(self) -> int:
        return len(self.labels)

    def evaluate(self, spec: ModelSpec, params: np.ndarray) -> np.ndarray:
        b = self.batch
        if not self.per_component:
            return losses_unchecked(spec, params, b.X, b.Y)
        out = np.empty(len(self.labels))
        for S, rows, slots in self._groups:
            out[slots] = component_losses_unchecked(spec, params, b.X[rows], b.Y[rows], S).ravel()
        return out


def observable_set_from_examples(examples: Sequence[Example] | Batch, prefix: str,
                                 per_component: bool = False) -> ObservableSet:
    b = examples if isinstance(examples, Batch) else stack(list(examples))
    if not per_component:
        return ObservableSet(b, False, tuple(f"{prefix}/{k}" for k in range(len(b))))
    if not b.has_components:
        missing = int(np.flatnonzero(b.components == 0)[0])
        raise UnsupportedDecompositionError(
            f"per-component observables requested but {prefix}/{missing} declares no components")
    labels, slot_of = [], {}
    for k, S in enumerate(b.components):
        for s in range(S):
            slot_of[(k, s)] = len(labels)
            labels.append(f"{prefix}/{k}/{s}")
    groups = []
    for S in sorted(set(int(s) for s in b.components)):
        rows = np.flatnonzero(b.components == S)
        slots = np.array([slot_of[(int(k), s)] for k in rows for s in range(S)])
        groups.append((S, rows, slots))
    return ObservableSet(b, True, tuple(labels), tuple(groups))


def observable_set_from_queries(data: DatasetSplit, per_component: bool = False) -> ObservableSet:
    """One observable per query loss, or per (query, component) pair."""
    return observable_set_from_examples(data.query, "query", per_component)


# -- trace -------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ChainTrace:
    """``train_losses`` is L (rows x C*T), ``observables`` is Phi; column
    ``c*T + t`` holds draw t of chain c. ``chain_boundaries`` lists each
    chain's first column followed by the total column count."""

    train_losses: np.ndarray
    observables: np.ndarray
    chain_boundaries: tuple[int, ...]
    row_labels: tuple[str, ...]
    col_labels: tuple[str, ...]

    def __post_init__(self):
        L, P = self.train_losses, self.observables
        if L.ndim != 2 or P.ndim != 2 or L.shape[1] != P.shape[1]:
            raise ValidationError(f"trace matrices disagree in draw count: {L.shape} vs {P.shape}")
        if L.shape[0] != len(self.row_labels) or P.shape[0] != len(self.col_labels):
            raise ValidationError("trace labels do not match matrix rows")
        if self.chain_boundaries[-1] != L.shape[1]:
            raise ValidationError("chain boundaries do not cover the trace")
        if not (np.all(np.isfinite(L)) and np.all(np.isfinite(P))):
            raise ValidationError("trace contains non-finite entries")

    @property
    def draw_count(self) -> int:
        return self.train_losses.shape[1]

    @property
    def chains(self) -> int:
        return len(self.chain_boundaries) - 1

    def chain_slices(self) -> list[slice]:
        b = self.chain_boundaries
        return [slice(b[c], b[c + 1]) for c in range(len(b) - 1)]


# -- update --------------------------------------------------------------------------

def _drift(spec, w, w_star, X, Y, cfg):
    g = grad_sum_unchecked(spec, w, X, Y)
    return (cfg.n_beta / X.shape[0]) * g + cfg.gamma * (w - w_star)


def _apply(w, drift, cfg, rng, mask, precond):
    eps = cfg.epsilon
    noise = rng.standard_normal(w.shape[0])
    if precond is None:
        step = -0.5 * eps * drift
        if not cfg.zero_noise:
            step += np.sqrt(eps) * noise
    else:
        decay = cfg.rmsprop_decay
        precond.v = decay * precond.v + (1.0 - decay) * drift * drift
        precond.steps += 1
        v_hat = precond.v / (1.0 - decay ** precond.steps)
        scale = 1.0 / (np.sqrt(v_hat) + cfg.rmsprop_damping)
        step = -0.5 * eps * scale * drift
        if not cfg.zero_noise:
            step += np.sqrt(eps * scale) * noise
    if mask is not None:
        step[~mask] = 0.0
    return w + step


def _check_divergence(w, step):
    m = np.max(np.abs(w))
    if not np.isfinite(m) or m > DIVERGENCE_THRESHOLD:
        raise DivergenceError(step, float(m), detail="parameter blew up")


def sgld_step(spec: ModelSpec, w, w_star, batch, cfg: SgldConfig, rng: np.random.Generator,
              precond: RmspropState | None = None, step_index: int = 0) -> np.ndarray:
    """One SGLD update on the given minibatch.

    Masked coordinates (``weight_mask`` False) are returned unchanged. Under
    ``cfg.preconditioner == "rmsprop"`` a ``precond`` state is created if not
    supplied; pass one in to carry the running average across steps.
    """
    w = check_params(spec, w)
    w_star = check_params(spec, w_star)
    b = as_batch(spec, batch)
    mask = None if cfg.weight_mask is None else np.asarray(cfg.weight_mask)
    if cfg.preconditioner == "rmsprop" and precond is None:
        precond = RmspropState.zeros(spec.d)
    elif cfg.preconditioner == "none":
        precond = None
    with np.errstate(over="ignore", invalid="ignore"):
        drift = _drift(spec, w, w_star, b.X, b.Y, cfg)
        w_new = _apply(w, drift, cfg, rng, mask, precond)
    _check_divergence(w_new, step_index)
    return w_new


def _run_chain(spec, w_star, train_b, train_obs, obs, cfg, chain):
    rng = chain_rng(cfg.seed, chain)
    n = len(train_b)
    m = cfg.batch_size
    mask = None if cfg.weight_mask is None else np.asarray(cfg.weight_mask)
    precond = RmspropState.zeros(spec.d) if cfg.preconditioner == "rmsprop" else None
    T, b = cfg.draws_per_chain, cfg.burn_in
    L = np.empty((len(train_obs), T))
    P = np.empty((len(obs), T))
    w = w_star.copy()
    X, Y = train_b.X, train_b.Y
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(b + T):
            t = step - b
            if t >= 0:
                lcol = train_obs.evaluate(spec, w)
                pcol = obs.evaluate(spec, w)
                worst = max(np.max(np.abs(lcol)), np.max(np.abs(pcol)))
                if not np.isfinite(worst) or worst > DIVERGENCE_THRESHOLD:
                    raise DivergenceError(step, float(worst), chain, "recorded loss blew up")
                L[:, t] = lcol
                P[:, t] = pcol
            idx = rng.integers(0, n, size=m)
            drift = _drift(spec, w, w_star, X[idx], Y[idx], cfg)
            w = _apply(w, drift, cfg, rng, mask, precond)
            m_abs = np.max(np.abs(w))
            if not np.isfinite(m_abs) or m_abs > DIVERGENCE_THRESHOLD:
                raise DivergenceError(step, float(m_abs), chain, "parameter blew up")
    return L, P


def _run_chain_star(args):
    return _run_chain(*args)


def run_chains(spec: ModelSpec, w_star, data: DatasetSplit, observables: ObservableSet,
               cfg: SgldConfig, *, per_component_train: bool = False,
               workers: int = 1) -> ChainTrace:
    """Run ``cfg.chains`` localized chains from ``w_star`` and collect traces.

    Chains are independent; with ``workers > 1`` they run in a process pool and
    are concatenated in chain order, so the result does not depend on the
    worker count. A divergence in any chain aborts the whole run.
    """
    w_star = check_params(spec, w_star)
    if len(observables) == 0:
        raise ValidationError("observable set is empty")
    train_b = as_batch(spec, data.train_batch())
    as_batch(spec, observables.batch)
    cfg.check_against(spec, data.n)
    train_obs = observable_set_from_examples(train_b, "train", per_component_train)
    jobs = [(spec, w_star, train_b, train_obs, observables, cfg, c) for c in range(cfg.chains)]
    if workers > 1 and cfg.chains > 1:
        with ProcessPoolExecutor(max_workers=min(workers, cfg.chains)) as pool:
            results = list(pool.map(_run_chain_star, jobs))
    else:
        results = [_run_chain_star(j) for j in jobs]
    T = cfg.draws_per_chain
    log.debug("sampled %d chains x %d draws (burn-in %d)", cfg.chains, T, cfg.burn_in)
    return ChainTrace(
        train_losses=np.concatenate([r[0] for r in results], axis=1),
        observables=np.concatenate([r[1] for r in results], axis=1),
        chain_boundaries=tuple(c * T for c in range(cfg.chains + 1)),
        row_labels=train_obs.labels,
        col_labels=observables.labels,
    )


def with_seed(cfg: SgldConfig, seed: int) -> SgldConfig:
    return replace(cfg, seed=seed)
