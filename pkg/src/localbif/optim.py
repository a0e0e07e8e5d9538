"""Deterministic minimizers for desk-scale models."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .data import Batch
from .errors import ConvergenceError, DivergenceError
from .models import ModelSpec, grad_sum_unchecked, hessian, losses_unchecked


@dataclass(frozen=True)
class Objective:
    """``sum_k weights_k * l_k(w) + (gamma/2)||w - center||^2 + (l2/2)||w||^2``."""

    spec: ModelSpec
    batch: Batch
    weights: np.ndarray | None = None
    gamma: float = 0.0
    center: np.ndarray | None = None
    l2: float = 0.0

    def _w(self):
        return np.ones(len(self.batch)) if self.weights is None else self.weights

    def value(self, w):
        v = float(self._w() @ losses_unchecked(self.spec, w, self.batch.X, self.batch.Y))
        if self.gamma:
            r = w - self.center
            v += 0.5 * self.gamma * float(r @ r)
        return v + 0.5 * self.l2 * float(w @ w)

    def gradient(self, w):
        wts = self._w()
        g = np.zeros_like(w)
        for c in np.unique(wts):
            rows = wts == c
            if c:
                g += c * grad_sum_unchecked(self.spec, w, self.batch.X[rows], self.batch.Y[rows])
        if self.gamma:
            g += self.gamma * (w - self.center)
        return g + self.l2 * w

    def hessian(self, w):
        wts = self._w()
        H = np.zeros((w.size, w.size))
        for c in np.unique(wts):
            if c:
                H += c * hessian(self.spec, w, self.batch.take(wts == c))
        return H + (self.gamma + self.l2) * np.eye(w.size)


def newton_minimize(obj: Objective, w0, tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
    """Damped Newton with Armijo backtracking; stops at ``||grad|| <= tol``.

    Indefinite Hessians are shifted to positive definiteness before solving.
    """
    w = np.array(w0, dtype=np.float64)
    f = obj.value(w)
    for it in range(max_iter):
        g = obj.gradient(w)
        gnorm = np.linalg.norm(g)
        if gnorm <= tol:
            return w
        H = obj.hessian(w)
        shift = 0.0
        while True:
            try:
                c = scipy.linalg.cho_factor(H + shift * np.eye(w.size))
                break
            except np.linalg.LinAlgError:
                shift = max(2 * shift, 1e-8 * max(1.0, np.abs(H).max()))
        p = -scipy.linalg.cho_solve(c, g)
        slope = float(g @ p)
        if -slope <= 1e-12 * max(1.0, abs(f)):
            # predicted decrease is below the resolution of f: take the full step
            w = w + p
            f = obj.value(w)
            continue
        t = 1.0
        for _ in range(60):
            w_new = w + t * p
            f_new = obj.value(w_new)
            if f_new <= f + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            raise ConvergenceError(f"line search failed at iteration {it} (|grad| = {gnorm:.3g})")
        w, f = w_new, f_new
    if np.linalg.norm(obj.gradient(w)) <= tol:
        return w
    raise ConvergenceError(f"Newton did not reach |grad| <= {tol:g} within {max_iter} iterations")


def gradient_descent(spec: ModelSpec, batch: Batch, w0, step_size: float, max_steps: int,
                     weight_decay: float = 0.0, tol: float = 1e-8) -> tuple[np.ndarray, bool, int]:
    """Full-batch gradient descent on ``(sum_k l_k(w) + (wd/2)||w||^2) / B``.

    Returns ``(params, converged, steps)``; convergence means the gradient norm
    of that objective fell to ``tol`` within ``max_steps``.
    """
    w = np.array(w0, dtype=np.float64)
    B = len(batch)
    X, Y = batch.X, batch.Y
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(max_steps):
            g = (grad_sum_unchecked(spec, w, X, Y) + weight_decay * w) / B
            gnorm = np.linalg.norm(g)
            if not np.isfinite(gnorm):
                raise DivergenceError(step, float(np.max(np.abs(w))), detail="retraining gradient is non-finite")
            if gnorm <= tol:
                return w, True, step
            w = w - step_size * g
        loss = losses_unchecked(spec, w, X, Y)
        if not np.all(np.isfinite(loss)):
            raise DivergenceError(max_steps, float(np.max(np.abs(w))), detail="retraining loss is non-finite")
        g = (grad_sum_unchecked(spec, w, X, Y) + weight_decay * w) / B
    return w, bool(np.linalg.norm(g) <= tol), max_steps
