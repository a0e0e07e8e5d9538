"""Dense reference implementations of classical influence and its Gaussian
second-order correction.

Everything here factors the dampened Hessian ``beta*H + gamma*I`` once and
solves against it; ``d`` is small enough that this is exact and stable.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg

from .data import DatasetSplit
from .errors import FactorizationError, UnsupportedError, ValidationError
from .estimators import InfluenceMatrix
from .models import (
    DEFAULT_HESSIAN_CAP,
    ModelSpec,
    batch_grads,
    batch_losses,
    check_params,
    hessian,
    per_example_hessians,
)
from .optim import Objective, newton_minimize


class DampenedHessian:
    """Cholesky factorization of ``beta*H + gamma*I``.

    Construction fails with :class:`FactorizationError` unless the matrix is
    numerically positive definite.
    """

    def __init__(self, base, gamma: float, beta: float = 1.0):
        H = np.asarray(base, dtype=np.float64)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ValidationError(f"Hessian must be square, got shape {H.shape}")
        if gamma < 0 or beta < 0:
            raise ValidationError("gamma and beta must be >= 0")
        self.base = 0.5 * (H + H.T)
        self.gamma = float(gamma)
        self.beta = float(beta)
        A = self.beta * self.base + self.gamma * np.eye(H.shape[0])
        eig = np.linalg.eigvalsh(A)
        if eig[0] <= 1e-12 * max(1.0, abs(eig[-1])):
            raise FactorizationError(float(eig[0]), self.gamma)
        try:
            self._factor = scipy.linalg.cho_factor(A, lower=True)
        except np.linalg.LinAlgError:
            raise FactorizationError(float(eig[0]), self.gamma) from None
        self.matrix = A

    @classmethod
    def at(cls, spec: ModelSpec, w_star, data: DatasetSplit, gamma: float, beta: float = 1.0,
           cap: int = DEFAULT_HESSIAN_CAP) -> "DampenedHessian":
        return cls(hessian(spec, w_star, data.train_batch(), cap=cap), gamma, beta)

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    def solve(self, rhs) -> np.ndarray:
        """``(beta*H + gamma*I)^{-1} rhs`` for a vector or a (d, k) block."""
        return scipy.linalg.cho_solve(self._factor, np.asarray(rhs, dtype=np.float64))

    def inverse(self) -> np.ndarray:
        inv = self.solve(np.eye(self.d))
        return 0.5 * (inv + inv.T)


def _labels(data: DatasetSplit):
    return (tuple(f"train/{i}" for i in range(data.n)), tuple(f"query/{j}" for j in range(data.q)))


def _if_values(G_train, G_query, dh: DampenedHessian) -> np.ndarray:
    return -(G_train @ dh.solve(G_query.T))


def classical_if(spec: ModelSpec, w_star, data: DatasetSplit, gamma: float, beta: float = 1.0,
                 cap: int = DEFAULT_HESSIAN_CAP) -> InfluenceMatrix:
    """Dampened influence ``-g_qᵀ (beta*H + gamma*I)^{-1} g_i`` at ``w_star``."""
    w = check_params(spec, w_star)
    dh = DampenedHessian.at(spec, w, data, gamma, beta, cap)
    values = _if_values(batch_grads(spec, w, data.train_batch()), batch_grads(spec, w, data.query_batch()), dh)
    rows, cols = _labels(data)
    return InfluenceMatrix(values, rows, cols, "dampened_if", {"gamma": float(gamma), "beta": float(beta)})


def isserlis_term(H_phi, H_i, H_eff) -> float:
    """``-0.5 * tr(H_phi A^{-1} H_i A^{-1})`` with ``A = H_eff``.

    Minus the covariance of two Gaussian quadratic forms ``0.5 xᵀH_phi x`` and
    ``0.5 xᵀH_i x`` under ``x ~ N(0, A^{-1})``.
    """
    H_phi, H_i = np.atleast_2d(H_phi), np.atleast_2d(H_i)
    dh = H_eff if isinstance(H_eff, DampenedHessian) else DampenedHessian(np.atleast_2d(H_eff), 0.0)
    Sigma = dh.inverse()
    return float(-0.5 * np.sum((Sigma @ H_phi @ Sigma) * H_i.T))


def _isserlis_values(Hs_train, Hs_query, Sigma) -> np.ndarray:
    # tr(Hq S Hi S) = sum_ab (S Hi S)_ab (Hq)_ba; Hessians are symmetric
    K = np.einsum("ab,ibc,cd->iad", Sigma, Hs_train, Sigma)
    return -0.5 * np.einsum("iab,jab->ij", K, Hs_query)


def laplace_second_order_term(spec: ModelSpec, w_star, data: DatasetSplit, gamma: float, query_index: int,
                              train_index: int, beta: float = 1.0, cap: int = DEFAULT_HESSIAN_CAP) -> float:
    """Gaussian second-order (quadratic-form) term for one (train, query) pair."""
    w = check_params(spec, w_star)
    dh = DampenedHessian.at(spec, w, data, gamma, beta, cap)
    H_phi = per_example_hessians(spec, w, data.query_batch().take([query_index]), cap)[0]
    H_i = per_example_hessians(spec, w, data.train_batch().take([train_index]), cap)[0]
    return isserlis_term(H_phi, H_i, dh)


def isserlis_matrix(spec: ModelSpec, w_star, data: DatasetSplit, gamma: float, beta: float = 1.0,
                    cap: int = DEFAULT_HESSIAN_CAP) -> np.ndarray:
    """All (train, query) second-order terms as an (n, q) array."""
    w = check_params(spec, w_star)
    Sigma = DampenedHessian.at(spec, w, data, gamma, beta, cap).inverse()
    return _isserlis_values(per_example_hessians(spec, w, data.train_batch(), cap),
                            per_example_hessians(spec, w, data.query_batch(), cap), Sigma)


def analytic_gaussian_bif(spec: ModelSpec, w_star, data: DatasetSplit, gamma: float, n_beta: float,
                          cap: int = DEFAULT_HESSIAN_CAP) -> InfluenceMatrix:
    """Exact local BIF for quadratic losses.

    The localized tempered posterior ``exp(-beta*L(w) - gamma/2 ||w - w*||^2)``
    with ``beta = n_beta / n`` is then Gaussian with precision
    ``A = beta*H + gamma*I`` and mean ``m = w* - A^{-1} beta grad L(w*)``. For
    quadratic ``l_i`` and ``phi`` the covariance is exactly
    ``g_qᵀ A^{-1} g_i + 0.5 tr(H_q A^{-1} H_i A^{-1})`` with gradients at ``m``.
    """
    if not spec.is_quadratic:
        raise UnsupportedError(f"analytic Gaussian BIF needs quadratic losses; {spec.kind} is not")
    w = check_params(spec, w_star)
    beta = float(n_beta) / data.n
    train, query = data.train_batch(), data.query_batch()
    dh = DampenedHessian.at(spec, w, data, gamma, beta, cap)
    G_train = batch_grads(spec, w, train)
    mean = w - dh.solve(beta * G_train.sum(axis=0))
    Sigma = dh.inverse()
    linear = _if_values(batch_grads(spec, mean, train), batch_grads(spec, mean, query), dh)
    quad = _isserlis_values(per_example_hessians(spec, mean, train, cap),
                            per_example_hessians(spec, mean, query, cap), Sigma)
    rows, cols = _labels(data)
    meta = {"method": "analytic_gaussian", "gamma": float(gamma), "n_beta": float(n_beta), "beta": beta}
    return InfluenceMatrix(linear + quad, rows, cols, "bif", meta)


def reweighting_oracle(spec: ModelSpec, w_star, data: DatasetSplit, i: int, query_index: int,
                       delta: float = 1e-3, gamma: float = 0.0, tol: float = 1e-10,
                       max_iter: int = 100) -> float:
    """Finite-difference influence of upweighting train example ``i``.

    Minimizes ``L(w) + c*l_i(w) + gamma/2 ||w - w*||^2`` from ``w_star`` for
    ``c = 0`` and ``c = delta`` and returns the query-loss difference over delta.
    """
    w = check_params(spec, w_star)
    if delta <= 0:
        raise ValidationError("delta must be > 0")
    train = data.train_batch()
    query = data.query_batch().take([query_index])
    weights = np.ones(data.n)
    w0 = newton_minimize(Objective(spec, train, weights, gamma, w), w, tol, max_iter)
    weights = weights.copy()
    weights[i] += delta
    wd = newton_minimize(Objective(spec, train, weights, gamma, w), w, tol, max_iter)
    return float((batch_losses(spec, wd, query)[0] - batch_losses(spec, w0, query)[0]) / delta)


def fit_checkpoint(spec: ModelSpec, data: DatasetSplit, w0, l2: float = 0.0, tol: float = 1e-10,
                   max_iter: int = 100) -> np.ndarray:
    """Newton minimizer of ``L_train(w) + l2/2 ||w||^2``, used as ``w*``."""
    return newton_minimize(Objective(spec, data.train_batch(), l2=l2), check_params(spec, w0), tol, max_iter)


def gradsim(spec: ModelSpec, w_star, data: DatasetSplit) -> InfluenceMatrix:
    """Negated cosine similarity of train and query loss gradients.

    The sign matches BIF: negative means the train point helps the query.
    Entries where either gradient norm is below 1e-12 are 0.
    """
    w = check_params(spec, w_star)
    Gt = batch_grads(spec, w, data.train_batch())
    Gq = batch_grads(spec, w, data.query_batch())
    nt, nq = np.linalg.norm(Gt, axis=1), np.linalg.norm(Gq, axis=1)
    Ut = Gt / np.where(nt < 1e-12, 1.0, nt)[:, None]
    Uq = Gq / np.where(nq < 1e-12, 1.0, nq)[:, None]
    values = -np.clip(Ut @ Uq.T, -1.0, 1.0)
    values[nt < 1e-12, :] = 0.0
    values[:, nq < 1e-12] = 0.0
    values[values == 0] = 0.0
    rows, cols = _labels(data)
    return InfluenceMatrix(values, rows, cols, "gradsim", {"similarity": "cosine"})
