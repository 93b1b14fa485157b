"""Ground-truth simulators: linear Gaussian SSM and coordinated-turn tracking."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad

STUDIED_DIMS = (2, 5, 10)


@dataclass
class LgssmParams:
    theta1: np.ndarray
    theta2: np.ndarray
    obs_var: float = 0.1

    @property
    def dim(self) -> int:
        return self.theta1.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.theta2.shape[0]

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.theta1))))

    def as_filter_model(self) -> "LinearGaussianModel":
        return LinearGaussianModel(self)


def lgssm_params(phase: str, d: int) -> LgssmParams:
    """Transition ``c^(|i-j|+1)`` and diagonal emission for the given phase.

    ``pretrain``: c = 0.42, emission diag 0.5. ``online``: c = 0.2, emission diag 10.
    """
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    if d not in STUDIED_DIMS:
        warnings.warn(f"d={d} is outside the studied dimensions {STUDIED_DIMS}", stacklevel=2)
    if phase == "pretrain":
        base, gain = 0.42, 0.5
    elif phase == "online":
        base, gain = 0.2, 10.0
    else:
        raise ValueError(f"unknown phase {phase!r}")
    i, j = np.indices((d, d))
    return LgssmParams(base ** (np.abs(i - j) + 1.0), gain * np.eye(d))


@dataclass
class Trajectory:
    states: np.ndarray        # (T+1, d_x): x_0..x_T
    observations: np.ndarray  # (T, d_y):   y_1..y_T
    seed: int | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.observations = np.asarray(self.observations, dtype=float)
        if self.states.shape[0] != self.observations.shape[0] + 1:
            raise ValueError(
                f"expected T+1 states for T observations, got {self.states.shape[0]} and {self.observations.shape[0]}"
            )
        if not (np.isfinite(self.states).all() and np.isfinite(self.observations).all()):
            raise ValueError("trajectory contains non-finite entries")

    @property
    def T(self) -> int:
        return self.observations.shape[0]


def lgssm_simulate(params: LgssmParams, T: int, rng: np.random.Generator, x0=None) -> Trajectory:
    if T < 1:
        raise ValueError("T must be >= 1")
    d, dy = params.dim, params.obs_dim
    xs = np.empty((T + 1, d))
    ys = np.empty((T, dy))
    xs[0] = rng.standard_normal(d) if x0 is None else x0
    obs_std = math.sqrt(params.obs_var)
    for t in range(1, T + 1):
        xs[t] = params.theta1 @ xs[t - 1] + rng.standard_normal(d)
        ys[t - 1] = params.theta2 @ xs[t] + obs_std * rng.standard_normal(dy)
    return Trajectory(xs, ys)


class LinearGaussianModel:
    """Known-parameter linear Gaussian model in the filter-model interface.

    ``propose`` samples from the transition (bootstrap proposal), so the
    importance weight reduces to the measurement likelihood.
    """

    def __init__(self, params: LgssmParams):
        self.params = params
        self.state_dim = params.dim
        self.obs_dim = params.obs_dim
        self._obs_log_std = 0.5 * math.log(params.obs_var)

    def propose(self, x_prev, y, noise):
        mean = ad.matvec(self.params.theta1, x_prev)
        x = mean + noise
        return x, ad.gaussian_logpdf(x, mean, 0.0)

    def transition_logpdf(self, x, x_prev):
        return ad.gaussian_logpdf(x, ad.matvec(self.params.theta1, x_prev), 0.0)

    def measurement_loglik(self, y, x):
        return ad.gaussian_logpdf(y, ad.matvec(self.params.theta2, x), self._obs_log_std)


# ---------------------------------------------------------------------------
# coordinated-turn tracking
# ---------------------------------------------------------------------------


@dataclass
class TrackingParams:
    accel: float = 5.0
    sampling_period: float = 5.0
    process_var: float = 1e-2
    turn_var: float = 1e-4
    p0: float = 1.0
    beta: float = 2.0
    reference: tuple = (2.0, 2.0)
    mix_weights: tuple = (0.7, 0.3)
    mix_vars: tuple = (4.0, 25.0)

    def __post_init__(self):
        if not math.isclose(sum(self.mix_weights), 1.0):
            raise ValueError("mixture weights must sum to 1")


def tracking_params(phase: str) -> TrackingParams:
    if phase == "pretrain":
        return TrackingParams(accel=5.0)
    if phase == "online":
        return TrackingParams(accel=-5.0)
    raise ValueError(f"unknown phase {phase!r}")


def tracking_transition_matrix(omega: float, ts: float = 5.0) -> np.ndarray:
    """Coordinated-turn matrix for state (x1, x2, v1, v2)."""
    if not math.isfinite(omega):
        raise ValueError("turn rate must be finite")
    c, s = math.cos(omega * ts), math.sin(omega * ts)
    if abs(omega) < 1e-8:
        a, b = ts, 0.0
    else:
        a, b = s / omega, (1.0 - c) / omega
    return np.array([
        [1.0, 0.0, a, -b],
        [0.0, 1.0, -b, a],
        [0.0, 0.0, c, -s],
        [0.0, 0.0, s, c],
    ])


def tracking_input_matrix(ts: float = 5.0) -> np.ndarray:
    h = 0.5 * ts * ts
    return np.array([[h, 0.0], [0.0, h], [ts, 0.0], [0.0, ts]])


def turn_rate(accel: float, velocity) -> float:
    speed = math.hypot(velocity[0], velocity[1])
    if speed < 1e-6:
        raise ValueError(f"speed {speed:.3g} too small: turn rate undefined")
    return accel / speed


def tracking_measurement(position, params: TrackingParams) -> np.ndarray:
    """(received power in dB, bearing in (-pi, pi]) from reference to target."""
    position = np.asarray(position, dtype=float)
    diff = position - np.asarray(params.reference)
    dist = np.hypot(diff[..., 0], diff[..., 1])
    power = 10.0 * np.log10(params.p0 / dist ** params.beta)
    bearing = np.arctan2(diff[..., 1], diff[..., 0])
    bearing = np.where(bearing == -np.pi, np.pi, bearing)
    return np.stack([power, bearing], axis=-1)


def mixture_noise(rng: np.random.Generator, params: TrackingParams, size: int) -> np.ndarray:
    comp = rng.choice(len(params.mix_weights), size=size, p=params.mix_weights)
    std = np.sqrt(np.asarray(params.mix_vars))[comp]
    return std[:, None] * rng.standard_normal((size, 2))


def tracking_simulate(params: TrackingParams, T: int, rng: np.random.Generator, init_pos=(0.0, 0.0),
                      init_vel=(55.0 / math.sqrt(2.0), 55.0 / math.sqrt(2.0)), noise_free: bool = False) -> Trajectory:
    """Simulate states (x1, x2, v1, v2, omega) and (power, bearing) observations."""
    if T < 1:
        raise ValueError("T must be >= 1")
    ts = params.sampling_period
    bmat = tracking_input_matrix(ts)
    xs = np.empty((T + 1, 5))
    xs[0, :2] = init_pos
    xs[0, 2:4] = init_vel
    xs[0, 4] = turn_rate(params.accel, init_vel)
    proc_std, turn_std = math.sqrt(params.process_var), math.sqrt(params.turn_var)
    for t in range(1, T + 1):
        prev = xs[t - 1]
        u = np.zeros(2) if noise_free else proc_std * rng.standard_normal(2)
        u_w = 0.0 if noise_free else turn_std * rng.standard_normal()
        xs[t, :4] = tracking_transition_matrix(prev[4], ts) @ prev[:4] + bmat @ u
        xs[t, 4] = turn_rate(params.accel, prev[2:4]) + u_w
    ys = tracking_measurement(xs[1:, :2], params)
    if not noise_free:
        ys = ys + mixture_noise(rng, params, T)
    return Trajectory(xs, ys)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def simulation_params(kind: str, phase: str, dim: int = 2):
    if kind == "lgssm":
        return lgssm_params(phase, dim)
    if kind == "tracking":
        return tracking_params(phase)
    raise ValueError(f"unknown model kind {kind!r}")


def generate_dataset(kind: str, phase: str, n_traj: int, T: int, seed: int, dim: int = 2) -> list[Trajectory]:
    """Independent trajectories, each from its own child stream of ``seed``."""
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    params = simulation_params(kind, phase, dim)
    children = np.random.SeedSequence(seed).spawn(n_traj)
    out = []
    for k, child in enumerate(children):
        rng = np.random.default_rng(child)
        if kind == "lgssm":
            traj = lgssm_simulate(params, T, rng)
        else:
            traj = tracking_simulate(params, T, rng)
        traj.seed = seed * 1_000_003 + k
        out.append(traj)
    return out


def _params_dict(params) -> dict:
    d = asdict(params)
    return {k: (np.asarray(v).tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}


def save_dataset(trajs: list[Trajectory], path, kind: str, phase: str, seed: int, dim: int = 2) -> None:
    """CSV rows ``traj, t, x..., y...`` (y empty at t=0) plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dx, dy = trajs[0].states.shape[1], trajs[0].observations.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj", "t"] + [f"x{i}" for i in range(dx)] + [f"y{i}" for i in range(dy)])
        for k, tr in enumerate(trajs):
            for t in range(tr.T + 1):
                ys = [""] * dy if t == 0 else [repr(float(v)) for v in tr.observations[t - 1]]
                w.writerow([k, t] + [repr(float(v)) for v in tr.states[t]] + ys)
    meta = {
        "kind": kind, "phase": phase, "seed": seed, "dim": dim, "n_traj": len(trajs), "T": trajs[0].T,
        "state_dim": dx, "obs_dim": dy, "params": _params_dict(simulation_params(kind, phase, dim)),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_dataset(path) -> list[Trajectory]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    dx, dy = meta["state_dim"], meta["obs_dim"]
    rows = np.genfromtxt(path, delimiter=",", skip_header=1)
    rows = rows.reshape(-1, 2 + dx + dy)
    out = []
    for k in range(meta["n_traj"]):
        r = rows[rows[:, 0] == k]
        out.append(Trajectory(r[:, 2:2 + dx], r[1:, 2 + dx:], seed=meta["seed"]))
    return out
