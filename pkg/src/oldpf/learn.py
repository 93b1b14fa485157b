"""Supervised pretraining and online sliding-window learning.

The online loop processes each observation once. Every ``window`` steps it
turns the accumulated log-evidence increments into a loss, takes one Adam
step on all parameters and cuts the graph, so memory stays bounded on
unbounded streams.
"""

from __future__ import annotations

import logging
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParameterStore
from .pf import (FilterConfig, FilterDivergence, NonFiniteWeightError, ParticleEnsemble, estimate_state,
                 from_states, init_particles, propose_and_weight, resample_step)
from .ssm import Trajectory

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


def adam_step(store: ParameterStore, state: AdamState) -> bool:
    """One bias-corrected Adam update from ``store.grads``, then zero the grads.

    A non-finite gradient skips the whole update (moments untouched) and
    returns False.
    """
    if not all(np.isfinite(g).all() for g in store.grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient at optimiser step %d; update skipped", state.step + 1)
        store.zero_grad()
        return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in store.grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        store.values[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    store.zero_grad()
    return True


# ---------------------------------------------------------------------------
# window loss
# ---------------------------------------------------------------------------


class WindowAccumulator:
    """Per-step ``(logsumexp log w_t, logsumexp log w~_{t-1})`` pairs of one window."""

    def __init__(self, length: int):
        if length < 1:
            raise ValueError("window length must be >= 1")
        self.length = length
        self.index = 0
        self.terms: list[tuple[Node, Node]] = []

    def push(self, ens: ParticleEnsemble) -> None:
        self.terms.append((ad.logsumexp(ens.log_w, axis=-1), ad.logsumexp(ens.log_w_prev, axis=-1)))

    @property
    def full(self) -> bool:
        return len(self.terms) == self.length

    def flush(self) -> None:
        self.terms = []
        self.index += 1


def window_loss(acc: WindowAccumulator) -> Node:
    """Negative sum of per-step log evidence ratios over the window."""
    if len(acc.terms) < acc.length:
        raise ValueError(f"window holds {len(acc.terms)} of {acc.length} steps")
    total = None
    for lse_w, lse_prev in acc.terms:
        term = lse_w - lse_prev
        total = term if total is None else total + term
    return -ad.sum(total)


def standardized_mse(estimates, truths, scale) -> Node:
    """Mean squared error after dividing each coordinate by ``scale``."""
    diff = (ad.as_node(estimates) - truths) / scale
    return ad.mean(ad.square(diff))


# ---------------------------------------------------------------------------
# data helpers
# ---------------------------------------------------------------------------


def init_bounds(trajs: list[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension min and max of all ground-truth states."""
    states = np.concatenate([tr.states for tr in trajs])
    return states.min(axis=0), states.max(axis=0)


def standardization(trajs: list[Trajectory]) -> dict:
    states = np.concatenate([tr.states for tr in trajs])
    obs = np.concatenate([tr.observations for tr in trajs])
    return {
        "x_loc": states.mean(axis=0),
        "x_scale": np.maximum(states.std(axis=0), 1e-6),
        "y_loc": obs.mean(axis=0),
        "y_scale": np.maximum(obs.std(axis=0), 1e-6),
    }


def filtering_loss(model, observations, fcfg: FilterConfig, rng=None, init_states=None, noises=None,
                   kind: str = "elbo", truths=None):
    """Differentiable loss of one filtering pass (no parameter updates).

    ``kind="elbo"`` gives the negative summed log-evidence ratios,
    ``kind="mse"`` the standardised MSE of the state estimates against
    ``truths``. Fixed ``noises`` (one array per step) and ``fcfg.resample=False``
    make the loss a deterministic function of the parameters.
    Returns ``(loss, estimates)``.
    """
    obs = np.asarray(observations, dtype=float)
    lead, T = obs.shape[:-2], obs.shape[-2]
    ens = init_particles(fcfg, rng, lead) if init_states is None else from_states(init_states)
    acc = WindowAccumulator(T)
    estimates = []
    for t in range(T):
        noise = None if noises is None else noises[t]
        ens = propose_and_weight(ens, obs[..., t, :], model, rng, noise)
        acc.push(ens)
        estimates.append(estimate_state(ens))
        ens, _ = resample_step(ens, fcfg, rng)
    est = ad.stack(estimates, axis=-2)
    if kind == "elbo":
        loss = window_loss(acc) * (1.0 / max(1, int(np.prod(lead, dtype=int))))
    elif kind == "mse":
        loss = standardized_mse(est, np.asarray(truths, dtype=float), model.x_scale)
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return loss, est


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    epochs: int = 50
    batch_size: int = 16
    patience: int = 5
    lr: float = 0.005
    n_particles: int = 100
    ess_threshold: float | None = None


@dataclass
class PretrainResult:
    params: dict
    history: list
    best_epoch: int


def pretrain(dataset: list[Trajectory], model, cfg: PretrainConfig, rng: np.random.Generator,
             bounds=None) -> PretrainResult:
    """Fit all model parameters by minimising the state-estimate MSE.

    Each batch runs ``batch_size`` filters side by side over full
    trajectories; one Adam step per batch. Training stops after ``patience``
    epochs without improvement of the epoch-mean loss and the best
    parameters are restored into ``model.store``.
    """
    low, high = init_bounds(dataset) if bounds is None else bounds
    fcfg = FilterConfig(cfg.n_particles, low, high, cfg.ess_threshold)
    states = np.stack([tr.states[1:] for tr in dataset])
    obs = np.stack([tr.observations for tr in dataset])
    n = len(dataset)
    store = model.store
    adam = AdamState(lr=cfg.lr)
    best, best_epoch, best_params = np.inf, -1, store.snapshot()
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            try:
                loss, _ = filtering_loss(model, obs[idx], fcfg, rng, kind="mse", truths=states[idx])
            except FloatingPointError as err:
                raise FloatingPointError(f"pretraining failed at epoch {epoch}, batch {b}: {err}") from err
            value = float(loss.value)
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite pretraining loss at epoch {epoch}, batch {b}")
            store.zero_grad()
            ad.backward(loss, store)
            adam_step(store, adam)
            losses.append(value * len(idx))
        epoch_loss = float(np.sum(losses) / n)
        history.append(epoch_loss)
        log.info("pretrain epoch %d loss %.5f", epoch, epoch_loss)
        if epoch_loss < best:
            best, best_epoch, best_params = epoch_loss, epoch, store.snapshot()
        elif epoch - best_epoch >= cfg.patience:
            break
    store.load_snapshot(best_params)
    return PretrainResult(best_params, history, best_epoch)


# ---------------------------------------------------------------------------
# online learning
# ---------------------------------------------------------------------------


@dataclass
class OnlineConfig:
    filter: FilterConfig
    window: int = 10
    lr: float = 0.005
    snapshot_every: int = 0


@dataclass
class OnlineRunRecord:
    estimates: np.ndarray
    window_losses: list
    snapshots: list
    updates: int
    resets: int
    collapses: int
    skipped_updates: int = 0

    def squared_errors(self, truths, dims=None) -> np.ndarray:
        """Per-step squared Euclidean error against ``truths`` (T, d)."""
        diff = self.estimates - np.asarray(truths, dtype=float)
        if dims is not None:
            diff = diff[:, dims]
        return np.sum(diff * diff, axis=-1)


def _run(observations, model, cfg: OnlineConfig, rng: np.random.Generator, loss_kind, truths=None):
    obs = np.asarray(observations, dtype=float)
    T = obs.shape[0]
    if loss_kind == "mse" and truths is None:
        raise ValueError("supervised run needs ground-truth states")
    store = model.store
    trainable = loss_kind is not None
    adam = AdamState(lr=cfg.lr)
    fcfg = cfg.filter
    L = cfg.window
    acc = WindowAccumulator(L)
    sup_terms: list[Node] = []
    ens = init_particles(fcfg, rng)
    estimates = np.empty((T, len(fcfg.init_low)))
    losses, snapshots = [], []
    updates = resets = collapses = 0
    window_ok = True
    with (nullcontext() if trainable else ad.frozen(store)):
        for t in range(1, T + 1):
            y = obs[t - 1]
            try:
                ens = propose_and_weight(ens, y, model, rng)
                est = estimate_state(ens)
            except (NonFiniteWeightError, FilterDivergence, FloatingPointError) as err:
                log.warning("filter reset at t=%d: %s", t, err)
                resets += 1
                window_ok = False
                ens = init_particles(fcfg, rng)
                with ad.frozen(store):
                    ens = propose_and_weight(ens, y, model, rng)
                    est = estimate_state(ens)
            estimates[t - 1] = est.value
            if trainable and window_ok:
                if loss_kind == "elbo":
                    acc.push(ens)
                else:
                    sup_terms.append(ad.square((est - truths[t - 1]) / model.x_scale))
            if t % L == 0:
                if trainable and window_ok:
                    if loss_kind == "elbo":
                        loss = window_loss(acc)
                    else:
                        loss = ad.mean(ad.stack(sup_terms))
                    losses.append(float(loss.value))
                    store.zero_grad()
                    ad.backward(loss, store)
                    if adam_step(store, adam):
                        updates += 1
                    if cfg.snapshot_every and (acc.index + 1) % cfg.snapshot_every == 0:
                        snapshots.append((t, store.snapshot()))
                acc.flush()
                sup_terms = []
                window_ok = True
                ens = ens.detach()
            try:
                ens, info = resample_step(ens, fcfg, rng)
                collapses += info.collapsed
            except FilterDivergence as err:
                log.warning("filter reset at t=%d: %s", t, err)
                resets += 1
                window_ok = False
                ens = init_particles(fcfg, rng)
    return OnlineRunRecord(estimates, losses, snapshots, updates, resets, collapses, adam.skipped)


def online_run(observations, model, cfg: OnlineConfig, rng: np.random.Generator) -> OnlineRunRecord:
    """Unsupervised online learning: one Adam step per window on the negative log-evidence ratios."""
    return _run(observations, model, cfg, rng, "elbo")


def supervised_online_run(observations, truths, model, cfg: OnlineConfig, rng: np.random.Generator) -> OnlineRunRecord:
    """Same loop, but the window loss is the standardised MSE against ground truth."""
    return _run(observations, model, cfg, rng, "mse", np.asarray(truths, dtype=float))


def frozen_run(observations, model, cfg: OnlineConfig, rng: np.random.Generator) -> OnlineRunRecord:
    """Filter with fixed parameters (the pre-trained baseline)."""
    return _run(observations, model, cfg, rng, None)
