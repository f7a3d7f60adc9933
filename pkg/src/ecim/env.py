"""Planar four-joint terrain walker, batched over independent instances.

The dynamics are a closed-form proxy for legged locomotion. Joint torques drive
damped, spring-loaded joints. The anti-phase ("trot") component of the joint
velocities pushes the body forward, scaled by the ground traction under it.
Body pitch relaxes toward the local terrain grade and is kicked by the trot
component of the joint accelerations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, NonFiniteError
from .terrain import Terrain, terrain_height, terrain_incline, terrain_traction

N_JOINTS = 4
OBS_DIM = 2 * N_JOINTS + 4 + 5
TROT = np.array([1.0, -1.0, 1.0, -1.0])
LOOKAHEAD = np.array([0.1, 0.2, 0.4, 0.8, 1.6])


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.02
    horizon: int = 400
    u_max: float = 10.0
    damping: float = 1.5
    stiffness: float = 2.0
    v_scale: float = 0.8
    q_max: float = 1.5
    v_cmd: float = 1.0
    w_v: float = 1.0
    w_omega: float = 0.5
    w_tau: float = 0.005
    w_acc: float = 0.01
    pitch_relax: float = 0.1
    pitch_kick: float = 0.02
    roll_gain: float = 0.05
    fall_pitch: float = 1.0
    body_acc_clip: float = 50.0

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"env.{f.name} must be finite and >= 0, got {value}")
        for name in ("dt", "u_max", "q_max", "fall_pitch", "horizon"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"env.{name} must be positive")
        if not 0.0 < self.pitch_relax <= 1.0:
            raise ConfigError("env.pitch_relax must lie in (0, 1]")


@dataclass
class WalkerState:
    """Per-instance simulator state; every array has leading dimension n."""

    x: np.ndarray
    v: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    qdd_prev: np.ndarray
    theta: np.ndarray
    omega: np.ndarray  # (n, 3): roll, pitch, yaw rates
    a_body: np.ndarray  # (n, 2): forward, vertical
    t: np.ndarray
    seed: np.ndarray

    def copy(self) -> "WalkerState":
        return WalkerState(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def take(self, idx) -> "WalkerState":
        return WalkerState(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def put(self, idx, other: "WalkerState") -> None:
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)


@dataclass
class StepInfo:
    torque: np.ndarray  # (n, J) applied torque u
    joint_acc: np.ndarray  # (n, J) commanded joint acceleration
    joint_vel: np.ndarray  # (n, J) joint velocity after the step
    omega: np.ndarray  # (n, 3)
    theta: np.ndarray  # (n,)
    a_body: np.ndarray  # (n, 2)
    reward_terms: dict = field(default_factory=dict)
    fell: np.ndarray | None = None
    next_obs: np.ndarray | None = None  # (n, obs_dim) successor before any auto-reset


def _as_seeds(seed, n=None) -> np.ndarray:
    seeds = np.atleast_1d(np.asarray(seed, dtype=np.int64))
    if n is not None and seeds.shape != (n,):
        seeds = np.broadcast_to(seeds, (n,)).copy()
    return seeds


def observe(cfg: EnvConfig, terrain: Terrain, state: WalkerState) -> np.ndarray:
    n = state.x.shape[0]
    base = terrain_height(terrain, state.x, state.seed)
    ahead = terrain_height(terrain, state.x[:, None] + LOOKAHEAD, state.seed[:, None])
    obs = np.empty((n, OBS_DIM))
    obs[:, 0:4] = state.q
    obs[:, 4:8] = state.qd
    obs[:, 8] = state.theta
    obs[:, 9] = state.omega[:, 1]
    obs[:, 10] = state.v
    obs[:, 11] = cfg.v_cmd
    obs[:, 12:17] = ahead - base[:, None]
    return obs


def reset_batch(cfg: EnvConfig, terrain: Terrain, seeds) -> tuple[WalkerState, np.ndarray]:
    seeds = _as_seeds(seeds)
    n = seeds.shape[0]
    x = np.zeros(n)
    state = WalkerState(
        x=x,
        v=np.zeros(n),
        q=np.zeros((n, N_JOINTS)),
        qd=np.zeros((n, N_JOINTS)),
        qdd_prev=np.zeros((n, N_JOINTS)),
        theta=np.arctan(terrain_incline(terrain, x, seeds)),
        omega=np.zeros((n, 3)),
        a_body=np.zeros((n, 2)),
        t=np.zeros(n, dtype=np.int64),
        seed=seeds,
    )
    return state, observe(cfg, terrain, state)


def step_batch(cfg: EnvConfig, terrain: Terrain, state: WalkerState, action: np.ndarray):
    """Advance every instance one control step.

    Returns ``(state', obs, reward, done, info)``; ``state`` is not modified.
    """
    action = np.asarray(action, dtype=np.float64)
    n = state.x.shape[0]
    if action.shape != (n, N_JOINTS):
        raise ConfigError(f"action shape {action.shape} != {(n, N_JOINTS)}")
    if not np.all(np.isfinite(action)):
        raise NonFiniteError("non-finite action")
    dt = cfg.dt
    u = cfg.u_max * np.clip(action, -1.0, 1.0)
    qdd = u - cfg.damping * state.qd - cfg.stiffness * state.q
    qd = state.qd + dt * qdd
    q = state.q + dt * qd
    hit = np.abs(q) > cfg.q_max
    q = np.where(hit, np.sign(q) * cfg.q_max, q)
    qd = np.where(hit, 0.0, qd)

    v_raw = cfg.v_scale * np.maximum(0.0, (qd @ TROT) / N_JOINTS)
    x_mid = state.x  # traction is read under the body before it moves
    v = v_raw * terrain_traction(terrain, x_mid, state.seed)
    x = state.x + dt * v

    target = np.arctan(terrain_incline(terrain, x, state.seed))
    theta = (1.0 - cfg.pitch_relax) * state.theta + cfg.pitch_relax * target \
        + cfg.pitch_kick * dt * (qdd @ TROT) / N_JOINTS
    omega = np.zeros((n, 3))
    omega[:, 0] = cfg.roll_gain * (qd[:, 0] + qd[:, 2] - qd[:, 1] - qd[:, 3])
    omega[:, 1] = (theta - state.theta) / dt
    a_body = np.empty((n, 2))
    a_body[:, 0] = (v - state.v) / dt
    dh = terrain_height(terrain, x, state.seed) - terrain_height(terrain, state.x, state.seed)
    a_body[:, 1] = np.clip(dh / (dt * dt), -cfg.body_acc_clip, cfg.body_acc_clip)

    progress = cfg.w_v * np.minimum(v, cfg.v_cmd)
    ang_pen = cfg.w_omega * (omega[:, 0] ** 2 + omega[:, 1] ** 2)
    tau_pen = cfg.w_tau * np.sum(u * u, axis=1)
    acc_pen = cfg.w_acc * np.sum(qdd * qdd, axis=1) * 1e-3
    reward = progress - ang_pen - tau_pen - acc_pen

    t = state.t + 1
    fell = np.abs(theta) > cfg.fall_pitch
    done = (t >= cfg.horizon) | fell

    new = WalkerState(x=x, v=v, q=q, qd=qd, qdd_prev=qdd, theta=theta, omega=omega,
                      a_body=a_body, t=t, seed=state.seed)
    info = StepInfo(
        torque=u, joint_acc=qdd, joint_vel=qd, omega=omega, theta=theta, a_body=a_body,
        reward_terms={"progress": progress, "ang_vel": -ang_pen, "torque": -tau_pen,
                      "joint_acc": -acc_pen},
        fell=fell,
    )
    return new, observe(cfg, terrain, new), reward, done, info


def env_reset(cfg: EnvConfig, terrain: Terrain, seed: int) -> tuple[WalkerState, np.ndarray]:
    """Single-instance reset; the observation is a flat vector."""
    cfg.validate()
    state, obs = reset_batch(cfg, terrain, [seed])
    return state, obs[0]


def env_step(cfg: EnvConfig, terrain: Terrain, state: WalkerState, action):
    """Single-instance step; returns ``(state', obs, reward, done, info)`` with scalars."""
    new, obs, reward, done, info = step_batch(cfg, terrain, state, np.asarray(action, float)[None, :])
    return new, obs[0], float(reward[0]), bool(done[0]), info


@dataclass
class EpisodeStats:
    instance: int
    ret: float
    length: int
    fell: bool


class VecEnv:
    """``n`` walkers on one terrain; instance ``i`` uses seed ``base_seed + i``.

    Finished instances are reset in place and their episode statistics are
    returned from :meth:`step`.
    """

    def __init__(self, cfg: EnvConfig, terrain: Terrain, n: int, base_seed: int = 0):
        if n < 1:
            raise ConfigError("n must be >= 1")
        cfg.validate()
        self.cfg = cfg
        self.terrain = terrain
        self.n = n
        self.seeds = base_seed + np.arange(n, dtype=np.int64)
        self._reset_state, self._reset_obs = reset_batch(cfg, terrain, self.seeds)
        self.state = self._reset_state.copy()
        self.obs = self._reset_obs.copy()
        self._ret = np.zeros(n)

    def reset(self) -> np.ndarray:
        self.state = self._reset_state.copy()
        self.obs = self._reset_obs.copy()
        self._ret[:] = 0.0
        return self.obs.copy()

    def step(self, actions: np.ndarray):
        """Returns ``(obs, reward, done, info, finished_episodes)``.

        ``obs`` already holds the reset observation for instances that finished.
        """
        state, obs, reward, done, info = step_batch(self.cfg, self.terrain, self.state, actions)
        self._ret += reward
        info.next_obs = obs.copy()
        finished = []
        if np.any(done):
            idx = np.flatnonzero(done)
            for i in idx:
                finished.append(EpisodeStats(int(i), float(self._ret[i]), int(state.t[i]),
                                             bool(info.fell[i])))
            self._ret[idx] = 0.0
            state.put(idx, self._reset_state.take(idx))
            obs[idx] = self._reset_obs[idx]
        self.state = state
        self.obs = obs
        return obs.copy(), reward, done, info, finished


def vec_env(cfg: EnvConfig, n: int, base_seed: int, terrain: Terrain) -> VecEnv:
    return VecEnv(cfg, terrain, n, base_seed)
