"""Particle filter core: initialisation, proposal and weighting, ESS, resampling.

Particle arrays carry arbitrary leading batch axes: states are ``(..., N, d)``
and log-weights ``(..., N)``. A batch axis runs independent filters side by
side, which is how pretraining and the Monte Carlo checks stay fast.

Any object with ``propose(x_prev, y, noise)``, ``transition_logpdf(x, x_prev)``
and ``measurement_loglik(y, x)`` can serve as the model; see
:class:`oldpf.flows.FlowModel` and :class:`oldpf.ssm.LinearGaussianModel`.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node

log = logging.getLogger(__name__)

COLLAPSE_LEVEL = 1.0 - 1e-12


class FilterDivergence(FloatingPointError):
    """All particle weights vanished."""


class NonFiniteWeightError(FloatingPointError):
    def __init__(self, particle, term):
        self.particle = particle
        self.term = term
        super().__init__(f"non-finite {term} for particle {particle}")


@dataclass
class FilterConfig:
    n_particles: int = 100
    init_low: np.ndarray | None = None
    init_high: np.ndarray | None = None
    ess_threshold: float | None = None
    resample: bool = True

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if self.ess_threshold is None:
            self.ess_threshold = self.n_particles / 2.0
        if not 1.0 < self.ess_threshold <= self.n_particles:
            raise ValueError(f"ess_threshold must lie in (1, {self.n_particles}], got {self.ess_threshold}")


@dataclass
class ParticleEnsemble:
    states: Node
    log_w: Node
    log_w_prev: Node | None = None
    resampled: np.ndarray | bool = False
    ancestors: np.ndarray | None = None

    @property
    def n_particles(self) -> int:
        return self.log_w.shape[-1]

    def detach(self) -> "ParticleEnsemble":
        return ParticleEnsemble(
            self.states.detach(), self.log_w.detach(),
            None if self.log_w_prev is None else self.log_w_prev.detach(),
            self.resampled, self.ancestors,
        )


def init_particles(cfg: FilterConfig, rng: np.random.Generator, batch_shape: tuple = ()) -> ParticleEnsemble:
    """Uniform over the box ``[init_low, init_high]``, weights ``1/N``."""
    low, high = np.asarray(cfg.init_low, dtype=float), np.asarray(cfg.init_high, dtype=float)
    if low.shape != high.shape or not (np.isfinite(low).all() and np.isfinite(high).all()):
        raise ValueError("init bounds must be finite and of equal shape")
    if np.any(low > high):
        raise ValueError(f"inverted init bounds at dims {np.flatnonzero(low > high).tolist()}")
    n = cfg.n_particles
    states = low + (high - low) * rng.random(tuple(batch_shape) + (n, low.size))
    return from_states(states)


def from_states(states) -> ParticleEnsemble:
    """Ensemble at given states with uniform weights ``1/N``."""
    states = np.asarray(states, dtype=float)
    n = states.shape[-2]
    return ParticleEnsemble(Node(states), Node(np.full(states.shape[:-1], -math.log(n))))


def _check_term(term: Node, name: str) -> None:
    v = term.value
    if not np.isfinite(v).all():
        bad = np.argwhere(~np.isfinite(v))[0]
        raise NonFiniteWeightError(tuple(int(i) for i in bad), name)


def propose_and_weight(ens: ParticleEnsemble, y, model, rng: np.random.Generator | None = None,
                       noise=None) -> ParticleEnsemble:
    """Move particles through the proposal and update their log-weights.

    ``log w_t = log w~_{t-1} + log p(y_t|x_t) + log p(x_t|x~_{t-1}) - log q(x_t|x~_{t-1}, y_t)``.
    With flow components the three densities expand into base densities and
    log-Jacobians exactly as in the coupling algebra of :mod:`oldpf.flows`.
    """
    x_prev = ens.states
    y = np.asarray(y, dtype=float)
    y_b = np.broadcast_to(y[..., None, :], x_prev.shape[:-1] + y.shape[-1:])
    if noise is None:
        noise = rng.standard_normal(x_prev.shape)
    x, log_q = model.propose(x_prev, y_b, noise)
    log_p = model.transition_logpdf(x, x_prev)
    log_lik = model.measurement_loglik(y_b, x)
    for term, name in ((log_q, "proposal log-density"), (log_p, "transition log-density"),
                       (log_lik, "measurement log-likelihood")):
        _check_term(term, name)
    log_w = ens.log_w + (log_lik + log_p - log_q)
    return ParticleEnsemble(x, log_w, ens.log_w, False, None)


def normalize(log_w) -> Node:
    """Softmax of log-weights along the particle axis."""
    log_w = ad.as_node(log_w)
    if np.any(np.all(np.isneginf(log_w.value), axis=-1)):
        raise FilterDivergence("all particle weights are zero")
    return ad.exp(log_w - ad.expand_dims(ad.logsumexp(log_w, axis=-1), -1))


def ess(weights) -> np.ndarray:
    w = ad.value_of(weights)
    return 1.0 / np.sum(w * w, axis=-1)


def log_evidence_increment(ens: ParticleEnsemble) -> Node:
    """``log sum_i w_t^i - log sum_j w~_{t-1}^j``."""
    return ad.logsumexp(ens.log_w, axis=-1) - ad.logsumexp(ens.log_w_prev, axis=-1)


def sample_ancestors(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. multinomial ancestor indices for every row of ``weights``."""
    w = np.asarray(weights, dtype=float)
    n = w.shape[-1]
    flat = w.reshape(-1, n)
    rows = flat.shape[0]
    cum = np.cumsum(flat, axis=-1)
    cum /= cum[:, -1:]
    offset = 2.0 * np.arange(rows)[:, None]
    u = rng.random((rows, n)) + offset
    idx = np.searchsorted((cum + offset).ravel(), u.ravel(), side="right").reshape(rows, n)
    idx -= n * np.arange(rows)[:, None]
    return np.minimum(idx, n - 1).reshape(w.shape)


def multinomial_resample(ens: ParticleEnsemble, rng: np.random.Generator, mask=None) -> ParticleEnsemble:
    """Resample rows where ``mask`` holds (all rows by default).

    Resampled rows get ``log w~ = 0``; their states are gathered by ancestor
    index, so gradients reach the surviving particles but not the choice.
    """
    w = normalize(ens.log_w).value
    lead = w.shape[:-1]
    n = w.shape[-1]
    mask = np.ones(lead, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    ancestors = sample_ancestors(w, rng)
    ancestors = np.where(mask[..., None], ancestors, np.arange(n))
    states = ad.gather(ens.states, ancestors)
    if mask.all():
        log_w = Node(np.zeros(ens.log_w.shape))
    else:
        log_w = ad.where(np.broadcast_to(mask[..., None], ens.log_w.shape), 0.0, ens.log_w)
    return ParticleEnsemble(states, log_w, ens.log_w_prev, mask, ancestors)


def estimate_state(ens: ParticleEnsemble) -> Node:
    w = normalize(ens.log_w)
    return ad.sum(ad.expand_dims(w, -1) * ens.states, axis=-2)


@dataclass
class StepInfo:
    ess: np.ndarray
    resampled: np.ndarray
    collapsed: int


def resample_step(ens: ParticleEnsemble, cfg: FilterConfig, rng: np.random.Generator):
    """ESS check and conditional resampling; returns the post-resampling ensemble."""
    w = normalize(ens.log_w).value
    e = ess(w)
    collapsed = int(np.sum(np.max(w, axis=-1) > COLLAPSE_LEVEL))
    if collapsed:
        log.debug("weight collapse in %d filter(s)", collapsed)
    mask = (e < cfg.ess_threshold) if cfg.resample else np.zeros(e.shape, dtype=bool)
    if np.any(mask):
        out = multinomial_resample(ens, rng, mask)
    else:
        out = ParticleEnsemble(ens.states, ens.log_w, ens.log_w_prev, mask, None)
    return out, StepInfo(e, mask, collapsed)


@dataclass
class FilterResult:
    estimates: np.ndarray            # (..., T, d)
    log_evidence: np.ndarray         # (...,) cumulative
    increments: np.ndarray           # (..., T)
    ess: np.ndarray                  # (..., T)
    resampled: np.ndarray            # (..., T)
    collapses: int = 0
    final: ParticleEnsemble | None = field(default=None, repr=False)


def run_filter(model, observations, cfg: FilterConfig, rng: np.random.Generator,
               init_states=None) -> FilterResult:
    """Plain filtering pass with no learning.

    ``observations`` is ``(..., T, d_y)``; leading axes run independent filters.
    Without ``init_states`` particles start uniform over the config box.
    """
    obs = np.asarray(observations, dtype=float)
    lead, T = obs.shape[:-2], obs.shape[-2]
    ens = init_particles(cfg, rng, lead) if init_states is None else from_states(init_states)
    est, inc, ess_t, res_t = [], [], [], []
    collapses = 0
    for t in range(T):
        ens = propose_and_weight(ens, obs[..., t, :], model, rng)
        inc.append(log_evidence_increment(ens).value)
        est.append(estimate_state(ens).value)
        ens, info = resample_step(ens, cfg, rng)
        ess_t.append(info.ess)
        res_t.append(info.resampled)
        collapses += info.collapsed
    inc = np.stack(inc, axis=-1)
    return FilterResult(
        np.stack(est, axis=-2), inc.sum(axis=-1), inc, np.stack(ess_t, axis=-1), np.stack(res_t, axis=-1),
        collapses, ens,
    )


def write_diagnostics(path, result: FilterResult) -> None:
    """Per-step CSV ``t, ess, resampled, log_evidence_increment`` for an unbatched run."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "ess", "resampled", "log_evidence_increment"])
        for t in range(result.increments.shape[-1]):
            w.writerow([t + 1, repr(float(result.ess[t])), int(result.resampled[t]),
                        repr(float(result.increments[t]))])
