"""Linear datamodelling score (LDS): retrain on random subsets and check how
well summed attributions rank the resulting query losses.

For subset ``D_k`` the predicted change of query ``j`` is
``sum_{i in D_k} tau[i, j]``; the per-subset score is the Spearman
correlation, across queries, between those predictions and the query losses
of a model retrained on ``D_k``. Attributions follow the BIF sign
convention: positive means including the example raises the query loss.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import DatasetSplit
from .errors import DimensionError, IncompatibleError, ValidationError
from .estimators import InfluenceMatrix
from .models import ModelSpec, batch_losses, init_params
from .optim import gradient_descent

log = logging.getLogger(__name__)

SEED_POLICIES = ("fixed", "per_subset")


@dataclass(frozen=True)
class RetrainConfig:
    """Full-batch gradient descent on ``(sum_{i in S} l_i + wd/2 ||w||^2) / |S|``.

    ``seed_policy="fixed"`` starts every subset from the same initialization;
    ``"per_subset"`` derives one from ``(seed, k)``.
    """

    steps: int = 20000
    step_size: float = 0.5
    weight_decay: float = 0.0
    init_scale: float = 1.0
    seed_policy: str = "fixed"
    tol: float = 1e-8

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("retrain steps must be >= 1")
        if not self.step_size > 0:
            raise ValidationError("retrain step_size must be > 0")
        if self.weight_decay < 0 or self.init_scale < 0 or not self.tol > 0:
            raise ValidationError("weight_decay and init_scale must be >= 0 and tol > 0")
        if self.seed_policy not in SEED_POLICIES:
            raise ValidationError(f"seed_policy must be one of {SEED_POLICIES}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class LdsConfig:
    alpha_retrain: float = 0.5
    alpha_attribution: float = 1.0
    K: int = 100
    retrain: RetrainConfig = field(default_factory=RetrainConfig)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha_retrain < 1:
            raise ValidationError(f"alpha_retrain must lie in (0, 1), got {self.alpha_retrain}")
        if not 0 < self.alpha_attribution <= 1:
            raise ValidationError(f"alpha_attribution must lie in (0, 1], got {self.alpha_attribution}")
        if self.K < 2:
            raise ValidationError(f"K must be >= 2, got {self.K}")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True, eq=False)
class LdsReport:
    per_subset_correlations: np.ndarray
    mean_lds: float
    std_error: float
    method_label: str
    degenerate_subsets: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {"method": self.method_label, "mean_lds": self.mean_lds, "std_error": self.std_error,
                "K": int(self.per_subset_correlations.size),
                "per_subset_correlations": [float(v) for v in self.per_subset_correlations],
                "degenerate_subsets": list(self.degenerate_subsets)}


def attribution_set(n: int, alpha_attribution: float, seed: int) -> np.ndarray:
    """First ``ceil(alpha * n)`` indices of a seeded shuffle, returned sorted."""
    if n < 1:
        raise ValidationError("need at least one training example")
    if alpha_attribution >= 1:
        return np.arange(n)
    perm = np.random.default_rng(np.random.SeedSequence([seed, 2])).permutation(n)
    return np.sort(perm[:math.ceil(alpha_attribution * n)])


def subsample_datasets(n_attr: int, cfg: LdsConfig) -> list[np.ndarray]:
    """K subsets of ``range(n_attr)``, each element kept with probability
    ``alpha_retrain``; an empty draw is redrawn and logged."""
    if n_attr < 1:
        raise ValidationError("n_attr must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    subsets = []
    for k in range(cfg.K):
        while True:
            idx = np.flatnonzero(rng.random(n_attr) < cfg.alpha_retrain)
            if idx.size:
                break
            log.info("subset %d came out empty; redrawing", k)
        subsets.append(idx)
    return subsets


def init_seed(cfg: LdsConfig, k: int) -> np.random.SeedSequence:
    if cfg.retrain.seed_policy == "fixed":
        return np.random.SeedSequence([cfg.seed, 3])
    return np.random.SeedSequence([cfg.seed, 3, k])


@dataclass(frozen=True, eq=False)
class RetrainResult:
    params: np.ndarray
    converged: bool
    steps: int


def retrain(spec: ModelSpec, data: DatasetSplit, subset, retrain_cfg: RetrainConfig,
            seed: np.random.SeedSequence | int = 0) -> RetrainResult:
    """Fit on the train examples indexed by ``subset`` from a seeded init."""
    subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise ValidationError("retraining subset is empty")
    batch = data.train_batch().take(subset)
    w0 = init_params(spec, np.random.default_rng(seed), scale=retrain_cfg.init_scale)
    w, ok, steps = gradient_descent(spec, batch, w0, retrain_cfg.step_size, retrain_cfg.steps,
                                    retrain_cfg.weight_decay, retrain_cfg.tol)
    return RetrainResult(w, ok, steps)


def _retrain_losses(args):
    spec, data, subset, rcfg, seed = args
    res = retrain(spec, data, subset, rcfg, seed)
    return batch_losses(spec, res.params, data.query_batch()), res.converged


def _cache_key(spec: ModelSpec, data_hash: str, subset, rcfg: RetrainConfig, seed: np.random.SeedSequence) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(spec.to_dict(), sort_keys=True).encode())
    h.update(data_hash.encode())
    h.update(np.asarray(subset, dtype="<i8").tobytes())
    h.update(rcfg.digest().encode())
    h.update(repr((seed.entropy, seed.spawn_key)).encode())
    return h.hexdigest()


def retrained_query_losses(spec: ModelSpec, data: DatasetSplit, subsets, cfg: LdsConfig,
                           attr_idx=None, workers: int = 1, cache_dir: str | Path | None = None):
    """Query losses after retraining on each subset, shape (K, q), plus the
    per-subset convergence flags.

    ``subsets`` index into ``attr_idx`` (the attribution set; default all
    train examples). With ``cache_dir``, results are stored per
    (dataset, subset, retrain config, init seed) hash and reused.
    """
    attr_idx = np.arange(data.n) if attr_idx is None else np.asarray(attr_idx)
    jobs = [(spec, data, attr_idx[s], cfg.retrain, init_seed(cfg, k)) for k, s in enumerate(subsets)]
    out = [None] * len(jobs)
    keys = [None] * len(jobs)
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        data_hash = data.content_hash()
        for k, job in enumerate(jobs):
            keys[k] = _cache_key(spec, data_hash, job[2], job[3], job[4])
            path = cache / f"{keys[k]}.npz"
            if path.exists():
                with np.load(path) as z:
                    out[k] = (z["losses"], bool(z["converged"]))
    todo = [k for k in range(len(jobs)) if out[k] is None]
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_retrain_losses, [jobs[k] for k in todo]))
    else:
        results = [_retrain_losses(jobs[k]) for k in todo]
    for k, res in zip(todo, results):
        out[k] = res
        if cache is not None:
            np.savez(cache / f"{keys[k]}.npz", losses=res[0], converged=res[1])
    losses = np.vstack([o[0] for o in out])
    converged = np.array([o[1] for o in out], dtype=bool)
    if not converged.all():
        log.warning("%d of %d retraining runs hit the step budget", int((~converged).sum()), len(out))
    return losses, converged


def spearman_flagged(x, y) -> tuple[float, bool]:
    """Spearman correlation with average ranks for ties; ``(0.0, True)`` when
    either rank vector is constant."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise DimensionError("spearman inputs", x.size, y.size)
    if x.size < 2:
        raise ValidationError("spearman needs at least 2 points")
    rx = rankdata(x) - (x.size + 1) / 2
    ry = rankdata(y) - (y.size + 1) / 2
    nx, ny = np.sqrt(rx @ rx), np.sqrt(ry @ ry)
    if nx == 0 or ny == 0:
        return 0.0, True
    return float(np.clip((rx @ ry) / (nx * ny), -1.0, 1.0)), False


def spearman(x, y) -> float:
    return spearman_flagged(x, y)[0]


def lds_score(tau: InfluenceMatrix | np.ndarray, subsets, retrained_query_losses, cfg: LdsConfig | None = None,
              method_label: str | None = None) -> LdsReport:
    """Mean and standard error over subsets of the per-subset Spearman score."""
    values = tau.values if isinstance(tau, InfluenceMatrix) else np.asarray(tau, dtype=np.float64)
    label = method_label or (tau.kind if isinstance(tau, InfluenceMatrix) else "custom")
    losses = np.asarray(retrained_query_losses, dtype=np.float64)
    K = len(subsets)
    if losses.shape != (K, values.shape[1]):
        raise IncompatibleError(f"retrained losses have shape {losses.shape}, expected {(K, values.shape[1])}")
    if cfg is not None and K != cfg.K:
        raise IncompatibleError(f"{K} subsets but K = {cfg.K}")
    scores = np.empty(K)
    flagged = []
    for k, s in enumerate(subsets):
        s = np.asarray(s, dtype=np.int64)
        if s.size and (s.min() < 0 or s.max() >= values.shape[0]):
            raise IncompatibleError(f"subset {k} indexes outside the {values.shape[0]} attribution rows")
        pred = values[s].sum(axis=0)
        scores[k], degenerate = spearman_flagged(losses[k], pred)
        if degenerate:
            flagged.append(k)
    return LdsReport(scores, float(scores.mean()), float(scores.std(ddof=1) / np.sqrt(K)), label, tuple(flagged))
