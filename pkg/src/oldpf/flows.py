"""Normalising-flow components of the particle filter.

Three model pieces are built from affine coupling stacks:

* :class:`DynamicModel`     -- Gaussian base ``g(. | x_prev)`` pushed through an
  unconditioned flow; gives ``p(x_t | x_prev)``.
* :class:`ProposalModel`    -- Gaussian base ``h(. | x_prev, y_t)`` pushed through
  a flow conditioned on ``y_t``; gives ``q(x_t | x_prev, y_t)``.
* :class:`MeasurementModel` -- standard normal base pushed through a flow over
  observation space conditioned on ``x_t``; gives ``p(y_t | x_t)``.

:class:`FlowModel` bundles the three with a fixed per-dimension
standardisation of states and observations, so the networks always see
inputs of order one.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Mlp, Node, ParameterStore


class NonFiniteError(FloatingPointError):
    """Raised when a flow receives a NaN or infinite entry."""


def _check_finite(x: Node, where: str) -> None:
    v = x.value
    if not np.isfinite(v).all():
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(v))[0])
        raise NonFiniteError(f"{where}: non-finite input at index {bad}")


def _with_cond(x: Node, cond) -> Node:
    """Broadcast ``cond`` to the leading shape of ``x`` and append it."""
    if cond is None:
        return x
    cond = ad.as_node(cond)
    lead = x.shape[:-1]
    if cond.shape[:-1] != lead:
        cond = ad.broadcast_to(cond, lead + cond.shape[-1:])
    return ad.concat([x, cond], axis=-1)


@dataclass
class FlowArch:
    depth: int = 2
    hidden: int = 32
    clamp: float = 5.0
    # additive (unit-Jacobian) couplings in the dynamic flow
    volume_preserving_dynamics: bool = False


class AffineCoupling:
    """One affine coupling layer.

    Coordinates where ``mask`` is True pass through unchanged and, together
    with the conditioner vector, feed one net whose outputs are split into
    scale ``s`` and shift ``t``; the other coordinates are mapped to
    ``x * exp(s) + t``. Scale outputs are clamped to ``[-clamp, clamp]``.
    The net starts with a zero output layer, so a fresh layer is the identity.
    With ``volume_preserving`` the scale is fixed at zero and the net emits
    only the shift.
    """

    def __init__(self, store: ParameterStore, prefix: str, mask, cond_dim: int, hidden: int,
                 clamp: float, rng: np.random.Generator, volume_preserving: bool = False):
        mask = np.asarray(mask, dtype=bool)
        self.dim = mask.size
        self.pass_idx = np.flatnonzero(mask)
        self.trans_idx = np.flatnonzero(~mask)
        if self.pass_idx.size + cond_dim == 0 or self.trans_idx.size == 0:
            raise ValueError("coupling layer needs a conditioning input and at least one transformed coordinate")
        self.mask = mask
        self.cond_dim = int(cond_dim)
        self.clamp = float(clamp)
        self.perm = np.argsort(np.concatenate([self.pass_idx, self.trans_idx]))
        n_in = self.pass_idx.size + self.cond_dim
        n_out = self.trans_idx.size
        self.volume_preserving = bool(volume_preserving)
        width = n_out if self.volume_preserving else 2 * n_out
        self.net = Mlp(store, f"{prefix}.net", [n_in, hidden, width], rng, zero_output=True)
        self._s_idx = np.arange(n_out)
        self._t_idx = np.arange(width - n_out, width)

    def _scale_shift(self, xa: Node, cond):
        out = self.net(_with_cond(xa, cond))
        if self.volume_preserving:
            return Node(np.zeros(out.shape)), out
        s = ad.clip(ad.take(out, self._s_idx), -self.clamp, self.clamp)
        return s, ad.take(out, self._t_idx)

    def forward(self, x, cond=None):
        x = ad.as_node(x)
        _check_finite(x, "coupling_forward")
        xa, xb = ad.take(x, self.pass_idx), ad.take(x, self.trans_idx)
        s, t = self._scale_shift(xa, cond)
        yb = xb * ad.exp(s) + t
        return ad.take(ad.concat([xa, yb]), self.perm), ad.sum(s, axis=-1)

    def inverse(self, y, cond=None):
        y = ad.as_node(y)
        _check_finite(y, "coupling_inverse")
        ya, yb = ad.take(y, self.pass_idx), ad.take(y, self.trans_idx)
        s, t = self._scale_shift(ya, cond)
        xb = (yb - t) * ad.exp(-s)
        return ad.take(ad.concat([ya, xb]), self.perm), -ad.sum(s, axis=-1)


class ElementwiseAffine:
    """``y = x * exp(s) + t`` per coordinate; used where coupling degenerates (d = 1).

    Without a conditioner ``s`` and ``t`` are free parameters; with one they are
    outputs of a zero-initialised Mlp of the conditioner.
    """

    def __init__(self, store: ParameterStore, prefix: str, dim: int, cond_dim: int, hidden: int,
                 clamp: float, rng: np.random.Generator):
        self.dim = int(dim)
        self.cond_dim = int(cond_dim)
        self.clamp = float(clamp)
        self.store = store
        self.prefix = prefix
        if self.cond_dim:
            self.net = Mlp(store, f"{prefix}.net", [self.cond_dim, hidden, 2 * self.dim], rng, zero_output=True)
        else:
            self.net = None
            store.add(f"{prefix}.log_scale", np.zeros(self.dim))
            store.add(f"{prefix}.shift", np.zeros(self.dim))

    def _scale_shift(self, cond):
        if self.net is None:
            return ad.clip(self.store.node(f"{self.prefix}.log_scale"), -self.clamp, self.clamp), \
                self.store.node(f"{self.prefix}.shift")
        out = self.net(cond)
        s = ad.clip(ad.take(out, np.arange(self.dim)), -self.clamp, self.clamp)
        return s, ad.take(out, np.arange(self.dim, 2 * self.dim))

    def _logdet(self, s: Node, x: Node) -> Node:
        ld = ad.sum(s, axis=-1)
        if ld.shape != x.shape[:-1]:
            ld = ad.broadcast_to(ld, x.shape[:-1])
        return ld

    def forward(self, x, cond=None):
        x = ad.as_node(x)
        _check_finite(x, "affine_forward")
        s, t = self._scale_shift(cond)
        return x * ad.exp(s) + t, self._logdet(s, x)

    def inverse(self, y, cond=None):
        y = ad.as_node(y)
        _check_finite(y, "affine_inverse")
        s, t = self._scale_shift(cond)
        return (y - t) * ad.exp(-s), -self._logdet(s, y)


class FlowStack:
    """Composition of layers; ``forward`` applies them in order."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, cond=None):
        x = ad.as_node(x)
        logdet = None
        for layer in self.layers:
            x, ld = layer.forward(x, cond)
            logdet = ld if logdet is None else logdet + ld
        if logdet is None:
            logdet = Node(np.zeros(x.shape[:-1]))
        return x, logdet

    def inverse(self, y, cond=None):
        y = ad.as_node(y)
        logdet = None
        for layer in reversed(self.layers):
            y, ld = layer.inverse(y, cond)
            logdet = ld if logdet is None else logdet + ld
        if logdet is None:
            logdet = Node(np.zeros(y.shape[:-1]))
        return y, logdet


def coupling_forward(layer, x, cond=None):
    return layer.forward(x, cond)


def coupling_inverse(layer, y, cond=None):
    return layer.inverse(y, cond)


def half_mask(dim: int, flip: bool = False) -> np.ndarray:
    """First ceil(d/2) coordinates pass through; ``flip`` swaps the halves."""
    mask = np.arange(dim) < (dim + 1) // 2
    return ~mask if flip else mask


def build_flow(store: ParameterStore, prefix: str, dim: int, cond_dim: int, arch: FlowArch,
               rng: np.random.Generator, volume_preserving: bool = False) -> FlowStack:
    if dim == 1:
        return FlowStack([ElementwiseAffine(store, f"{prefix}.0", 1, cond_dim, arch.hidden, arch.clamp, rng)])
    layers = [
        AffineCoupling(store, f"{prefix}.{k}", half_mask(dim, flip=bool(k % 2)), cond_dim, arch.hidden,
                       arch.clamp, rng, volume_preserving)
        for k in range(arch.depth)
    ]
    return FlowStack(layers)


class DynamicModel:
    """``x_t = T(x_dot)`` with ``x_dot ~ N(A x_prev + b, diag(exp(log_var)))``."""

    def __init__(self, store: ParameterStore, dim: int, arch: FlowArch, rng: np.random.Generator,
                 prefix: str = "dyn"):
        self.store = store
        self.dim = dim
        self.prefix = prefix
        store.add(f"{prefix}.A", np.eye(dim))
        store.add(f"{prefix}.b", np.zeros(dim))
        store.add(f"{prefix}.log_var", np.zeros(dim))
        self.flow = build_flow(store, f"{prefix}.flow", dim, 0, arch, rng, arch.volume_preserving_dynamics)

    def base(self, x_prev):
        s = self.store
        mean = ad.matvec(s.node(f"{self.prefix}.A"), x_prev) + s.node(f"{self.prefix}.b")
        log_std = 0.5 * s.node(f"{self.prefix}.log_var")
        return mean, log_std

    def sample(self, x_prev, noise):
        mean, log_std = self.base(x_prev)
        x_dot = mean + ad.exp(log_std) * noise
        x, logdet = self.flow.forward(x_dot)
        return x, ad.gaussian_logpdf(x_dot, mean, log_std) - logdet

    def logpdf(self, x, x_prev):
        x_dot, logdet_inv = self.flow.inverse(x)
        mean, log_std = self.base(x_prev)
        return ad.gaussian_logpdf(x_dot, mean, log_std) + logdet_inv


class ProposalModel:
    """``x_t = F(x_hat; y_t)`` with ``x_hat ~ N(mu, diag(sigma^2))``, ``(mu, log sigma) = net(x_prev, y_t)``."""

    def __init__(self, store: ParameterStore, dim: int, obs_dim: int, arch: FlowArch,
                 rng: np.random.Generator, prefix: str = "prop"):
        self.dim = dim
        self.clamp = arch.clamp
        self.net = Mlp(store, f"{prefix}.base", [dim + obs_dim, arch.hidden, 2 * dim], rng)
        self.flow = build_flow(store, f"{prefix}.flow", dim, obs_dim, arch, rng)
        self._mean_idx = np.arange(dim)
        self._std_idx = np.arange(dim, 2 * dim)

    def base(self, x_prev, y):
        out = self.net(_with_cond(ad.as_node(x_prev), y))
        mean = ad.take(out, self._mean_idx)
        log_std = ad.clip(ad.take(out, self._std_idx), -self.clamp, self.clamp)
        return mean, log_std

    def sample(self, x_prev, y, noise):
        mean, log_std = self.base(x_prev, y)
        x_hat = mean + ad.exp(log_std) * noise
        x, logdet = self.flow.forward(x_hat, y)
        return x, ad.gaussian_logpdf(x_hat, mean, log_std) - logdet

    def logpdf(self, x, x_prev, y):
        x_hat, logdet_inv = self.flow.inverse(x, y)
        mean, log_std = self.base(x_prev, y)
        return ad.gaussian_logpdf(x_hat, mean, log_std) + logdet_inv


class MeasurementModel:
    """``y = G(z; x)`` with ``z ~ N(0, I)``.

    For ``obs_dim > 1`` G is the coupling stack followed by an elementwise
    affine layer whose scale and shift are functions of ``x`` alone.
    """

    def __init__(self, store: ParameterStore, obs_dim: int, state_dim: int, arch: FlowArch,
                 rng: np.random.Generator, prefix: str = "meas"):
        self.obs_dim = obs_dim
        self.flow = build_flow(store, f"{prefix}.flow", obs_dim, state_dim, arch, rng)
        if obs_dim > 1:
            # outermost layer depends on x only, so the couplings see y after an
            # x-dependent location/scale has been removed
            self.flow.layers.append(ElementwiseAffine(store, f"{prefix}.flow.loc", obs_dim, state_dim,
                                                      arch.hidden, arch.clamp, rng))

    def loglik(self, y, x):
        x = ad.as_node(x)
        y = ad.as_node(y)
        if y.shape[:-1] != x.shape[:-1]:
            y = ad.broadcast_to(y, x.shape[:-1] + y.shape[-1:])
        z, logdet_inv = self.flow.inverse(y, x)
        return ad.gaussian_logpdf(z) + logdet_inv

    def sample(self, x, noise):
        y, _ = self.flow.forward(noise, x)
        return y


def dynamic_sample(model: DynamicModel, x_prev, noise):
    return model.sample(x_prev, noise)


def dynamic_logpdf(model: DynamicModel, x_t, x_prev):
    return model.logpdf(x_t, x_prev)


def proposal_sample(model: ProposalModel, x_prev, y_t, noise):
    return model.sample(x_prev, y_t, noise)


def measurement_loglik(model: MeasurementModel, y_t, x_t):
    return model.loglik(y_t, x_t)


class FlowModel:
    """Dynamic, proposal and measurement flows over shared parameters.

    States and observations are standardised with fixed ``loc``/``scale``
    vectors before reaching the flows. The standardisation is an affine
    bijection, so its log-Jacobian is added back and every density here is a
    density in raw coordinates.
    """

    def __init__(self, state_dim: int, obs_dim: int, arch: FlowArch | None = None, seed: int = 0,
                 x_loc=None, x_scale=None, y_loc=None, y_scale=None):
        self.arch = arch or FlowArch()
        self.state_dim = int(state_dim)
        self.obs_dim = int(obs_dim)
        self.seed = int(seed)
        self.x_loc = np.zeros(state_dim) if x_loc is None else np.asarray(x_loc, dtype=float)
        self.x_scale = np.ones(state_dim) if x_scale is None else np.asarray(x_scale, dtype=float)
        self.y_loc = np.zeros(obs_dim) if y_loc is None else np.asarray(y_loc, dtype=float)
        self.y_scale = np.ones(obs_dim) if y_scale is None else np.asarray(y_scale, dtype=float)
        rng = np.random.default_rng(seed)
        self.store = ParameterStore()
        self.dynamic = DynamicModel(self.store, state_dim, self.arch, rng)
        self.proposal = ProposalModel(self.store, state_dim, obs_dim, self.arch, rng)
        self.measurement = MeasurementModel(self.store, obs_dim, state_dim, self.arch, rng)
        self._x_logscale = float(np.log(self.x_scale).sum())
        self._y_logscale = float(np.log(self.y_scale).sum())

    def standardize_x(self, x):
        return (ad.as_node(x) - self.x_loc) / self.x_scale

    def standardize_y(self, y):
        return (np.asarray(ad.value_of(y)) - self.y_loc) / self.y_scale

    def propose(self, x_prev, y, noise):
        """Draw ``x_t ~ q(. | x_prev, y)`` by reparameterisation; returns ``(x_t, log q)``."""
        u, log_q = self.proposal.sample(self.standardize_x(x_prev), self.standardize_y(y), noise)
        return u * self.x_scale + self.x_loc, log_q - self._x_logscale

    def proposal_logpdf(self, x, x_prev, y):
        lp = self.proposal.logpdf(self.standardize_x(x), self.standardize_x(x_prev), self.standardize_y(y))
        return lp - self._x_logscale

    def transition_logpdf(self, x, x_prev):
        return self.dynamic.logpdf(self.standardize_x(x), self.standardize_x(x_prev)) - self._x_logscale

    def transition_sample(self, x_prev, noise):
        u, lp = self.dynamic.sample(self.standardize_x(x_prev), noise)
        return u * self.x_scale + self.x_loc, lp - self._x_logscale

    def measurement_loglik(self, y, x):
        return self.measurement.loglik(self.standardize_y(y), self.standardize_x(x)) - self._y_logscale

    # -- persistence -------------------------------------------------------

    def metadata(self) -> dict:
        return {
            "state_dim": self.state_dim,
            "obs_dim": self.obs_dim,
            "arch": asdict(self.arch),
            "seed": self.seed,
            "x_loc": self.x_loc.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_loc": self.y_loc.tolist(),
            "y_scale": self.y_scale.tolist(),
        }

    def save(self, path) -> None:
        """Write ``<path>.npz`` (parameters) and ``<path>.json`` (architecture)."""
        path = Path(path)
        self.store.save(path.with_suffix(".npz"))
        path.with_suffix(".json").write_text(json.dumps(self.metadata(), indent=2))

    @classmethod
    def from_metadata(cls, meta: dict) -> "FlowModel":
        return cls(meta["state_dim"], meta["obs_dim"], FlowArch(**meta["arch"]), meta["seed"],
                   meta["x_loc"], meta["x_scale"], meta["y_loc"], meta["y_scale"])

    @classmethod
    def load(cls, path) -> "FlowModel":
        path = Path(path)
        if not path.with_suffix(".npz").exists():
            raise FileNotFoundError(f"no checkpoint at {path.with_suffix('.npz')}")
        model = cls.from_metadata(json.loads(path.with_suffix(".json").read_text()))
        model.store.load_snapshot(ParameterStore.load(path.with_suffix(".npz")).values)
        return model

    def copy(self) -> "FlowModel":
        clone = FlowModel.from_metadata(self.metadata())
        clone.store.load_snapshot(self.store.values)
        return clone
