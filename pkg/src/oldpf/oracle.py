"""Exact references used to check the filters: Kalman filter and finite differences."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ParameterStore
from .ssm import LgssmParams


@dataclass
class KalmanResult:
    means: np.ndarray        # (T, d) filtering means
    covs: np.ndarray         # (T, d, d) filtering covariances
    log_evidence: float      # log p(y_1:T)
    increments: np.ndarray   # (T,) log p(y_t | y_1:t-1)


def kalman_filter(params: LgssmParams, observations, prior_mean=None, prior_cov=None) -> KalmanResult:
    """Filtering for ``x_t = A x_{t-1} + N(0, I)``, ``y_t = H x_t + N(0, r I)``.

    Prior on ``x_0`` defaults to N(0, I). Covariances use the Joseph update and
    are symmetrised every step.
    """
    ys = np.asarray(observations, dtype=float)
    a, h = params.theta1, params.theta2
    d, dy = a.shape[0], h.shape[0]
    if ys.ndim != 2 or ys.shape[1] != dy:
        raise ValueError(f"observations of shape {ys.shape} do not match emission matrix {h.shape}")
    q = np.eye(d)
    r = params.obs_var * np.eye(dy)
    m = np.zeros(d) if prior_mean is None else np.asarray(prior_mean, dtype=float)
    p = np.eye(d) if prior_cov is None else np.asarray(prior_cov, dtype=float)
    T = ys.shape[0]
    means, covs, inc = np.empty((T, d)), np.empty((T, d, d)), np.empty(T)
    eye = np.eye(d)
    for t in range(T):
        m = a @ m
        p = a @ p @ a.T + q
        s = h @ p @ h.T + r
        s = 0.5 * (s + s.T)
        try:
            chol = np.linalg.cholesky(s)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(f"innovation covariance singular at step {t + 1}") from None
        innov = ys[t] - h @ m
        white = np.linalg.solve(chol, innov)
        inc[t] = -0.5 * white @ white - np.log(np.diag(chol)).sum() - 0.5 * dy * math.log(2 * math.pi)
        gain = np.linalg.solve(s, h @ p).T
        m = m + gain @ innov
        ikh = eye - gain @ h
        p = ikh @ p @ ikh.T + gain @ r @ gain.T
        p = 0.5 * (p + p.T)
        means[t], covs[t] = m, p
    return KalmanResult(means, covs, float(inc.sum()), inc)


def finite_diff_grad(loss_fn, store: ParameterStore, step: float = 1e-5, names=None) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn(store) -> float`` for every entry of ``store``.

    Entries are perturbed in place and restored afterwards.
    """
    grads = {}
    for name in names or store.names():
        value = store.values[name]
        g = np.zeros_like(value)
        flat, gflat = value.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn(store))
            flat[i] = orig - step
            down = float(loss_fn(store))
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads
