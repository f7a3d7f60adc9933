"""Trajectory collection and advantage estimation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import EpisodeStats, VecEnv
from .errors import ConfigError
from .numkit import Rng, gaussian_logprob


@dataclass
class RolloutBatch:
    """Time-major ``(T, N, ...)`` arrays from one collection phase."""

    obs: np.ndarray
    next_obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    mu: np.ndarray
    log_std: np.ndarray  # (A,), state independent
    values: np.ndarray
    bootstrap: np.ndarray  # (N,) value of the observation after the last step
    rewards: np.ndarray
    dones: np.ndarray
    torque: np.ndarray
    joint_acc: np.ndarray
    joint_vel: np.ndarray
    theta: np.ndarray
    omega: np.ndarray
    a_body: np.ndarray
    episodes: list[EpisodeStats] = field(default_factory=list)
    r_icm: np.ndarray | None = None
    r_rnd: np.ndarray | None = None
    r_cnt: np.ndarray | None = None
    combined: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.rewards.shape

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        t, n = self.shape
        return arr.reshape((t * n,) + arr.shape[2:])


@dataclass
class AdvantageSet:
    advantages: np.ndarray
    returns: np.ndarray


def collect(policy, value_fn, env: VecEnv, horizon: int, rng: Rng) -> RolloutBatch:
    """Run ``horizon`` steps on every instance with actions drawn from ``policy``.

    ``policy.distribution(obs)`` must return a :class:`GaussianPolicyOut`;
    ``value_fn(obs)`` maps ``(M, obs_dim)`` to ``(M,)`` values.
    """
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    n, obs_dim = env.obs.shape
    a_dim = policy.action_dim
    obs = np.empty((horizon, n, obs_dim))
    actions = np.empty((horizon, n, a_dim))
    mu = np.empty((horizon, n, a_dim))
    logp = np.empty((horizon, n))
    rewards = np.empty((horizon, n))
    dones = np.empty((horizon, n), dtype=bool)
    torque = np.empty((horizon, n, a_dim))
    joint_acc = np.empty((horizon, n, a_dim))
    joint_vel = np.empty((horizon, n, a_dim))
    theta = np.empty((horizon, n))
    omega = np.empty((horizon, n, 3))
    a_body = np.empty((horizon, n, 2))
    next_obs = np.empty_like(obs)
    episodes: list[EpisodeStats] = []

    cur = env.obs.copy()
    log_std = None
    for t in range(horizon):
        dist = policy.distribution(cur)
        log_std = dist.log_std
        a = dist.mean + np.exp(dist.log_std) * rng.normal((n, a_dim))
        obs[t] = cur
        actions[t] = a
        mu[t] = dist.mean
        logp[t] = gaussian_logprob(dist, a)
        cur, rewards[t], dones[t], info, finished = env.step(a)
        episodes.extend(finished)
        next_obs[t] = info.next_obs
        torque[t] = info.torque
        joint_acc[t] = info.joint_acc
        joint_vel[t] = info.joint_vel
        theta[t] = info.theta
        omega[t] = info.omega
        a_body[t] = info.a_body

    values = value_fn(obs.reshape(-1, obs_dim)).reshape(horizon, n)
    bootstrap = value_fn(cur)
    return RolloutBatch(
        obs=obs, next_obs=next_obs, actions=actions, logp=logp, mu=mu,
        log_std=np.array(log_std, dtype=np.float64), values=values, bootstrap=bootstrap,
        rewards=rewards, dones=dones, torque=torque, joint_acc=joint_acc,
        joint_vel=joint_vel, theta=theta, omega=omega, a_body=a_body, episodes=episodes,
    )


def gae(rewards, values, dones, bootstrap, gamma: float, lam: float) -> AdvantageSet:
    """Generalized advantage estimation over time-major ``(T, ...)`` arrays.

    A done flag at step t stops both the bootstrap from V(s_{t+1}) and the
    recursion from step t+1.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    bootstrap = np.asarray(bootstrap, dtype=np.float64)
    if rewards.shape != values.shape or rewards.shape != dones.shape:
        raise ConfigError("rewards, values and dones must share a shape")
    if bootstrap.shape != rewards.shape[1:]:
        raise ConfigError("bootstrap must match one time slice")
    if not (0.0 < gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ConfigError("need 0 < gamma <= 1 and 0 <= lam <= 1")
    adv = np.zeros_like(rewards)
    running = np.zeros_like(bootstrap)
    next_value = bootstrap
    for t in range(rewards.shape[0] - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return AdvantageSet(adv, adv + values)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """Zero mean, unit population std; only centered when the std is below 1e-8."""
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size < 2:
        raise ConfigError("need at least two advantages to normalize")
    centered = adv - adv.mean()
    std = adv.std()
    if std < 1e-8:
        return centered
    return centered / std


BATCH_CSV_COLUMNS = ["step", "env", "reward", "combined", "r_icm", "r_rnd", "r_cnt", "done",
                     "logp", "value"]


def dump_batch_csv(batch: RolloutBatch, path: str | Path) -> None:
    """One row per transition, plus the action and observation vectors."""
    t_len, n = batch.shape
    a_dim = batch.actions.shape[-1]
    o_dim = batch.obs.shape[-1]
    zeros = np.zeros((t_len, n))

    def col(arr):
        return zeros if arr is None else arr

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BATCH_CSV_COLUMNS + [f"a{j}" for j in range(a_dim)] + [f"o{j}" for j in range(o_dim)])
        for t in range(t_len):
            for i in range(n):
                row = [t, i, batch.rewards[t, i], col(batch.combined)[t, i], col(batch.r_icm)[t, i],
                       col(batch.r_rnd)[t, i], col(batch.r_cnt)[t, i], int(batch.dones[t, i]),
                       batch.logp[t, i], batch.values[t, i]]
                row += list(batch.actions[t, i]) + list(batch.obs[t, i])
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
