"""PPO with a return-driven entropy coefficient and action-smoothness penalties.

The minimized objective per minibatch is::

    loss = -mean(clipped surrogate) + c1 * value_mse
           + lambda_t * L_T + lambda_s * L_S - beta_t * mean(entropy)

where L_T and L_S are squared differences between policy mean actions at
consecutive states and at Gaussian-perturbed states respectively. Gradients
are assembled by hand and pushed through the networks with one batched
backward pass per network.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .errors import ConfigError, NonFiniteError
from .numkit import (
    LOG_2PI,
    LOG_STD_MAX,
    LOG_STD_MIN,
    Adam,
    GaussianPolicyOut,
    Mlp,
    Rng,
    clip_by_global_norm,
    gaussian_kl,
)

RATIO_MIN = 1e-8
RATIO_MAX = 1e8
ENTROPY_PER_DIM = 0.5 * (LOG_2PI + 1.0)


@dataclass(frozen=True)
class PpoCoeffs:
    clip: float = 0.2
    value_coef: float = 0.5
    epochs: int = 5
    minibatches: int = 4
    learning_rate: float = 1e-3
    desired_kl: float = 0.01
    adaptive_lr: bool = True
    lr_min: float = 1e-6
    lr_max: float = 1e-2
    max_grad_norm: float = 1.0
    gamma: float = 0.99
    gae_lambda: float = 0.95

    def validate(self) -> None:
        if not 0.0 < self.clip < 1.0:
            raise ConfigError("ppo.clip must lie in (0, 1)")
        if self.value_coef <= 0:
            raise ConfigError("ppo.value_coef must be positive")
        if self.epochs < 1 or self.minibatches < 1:
            raise ConfigError("ppo.epochs and ppo.minibatches must be >= 1")
        if not 0.0 < self.lr_min <= self.learning_rate <= self.lr_max:
            raise ConfigError("need lr_min <= learning_rate <= lr_max, all positive")
        if not (0.0 < self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ConfigError("need 0 < gamma <= 1 and 0 <= gae_lambda <= 1")
        if self.desired_kl <= 0:
            raise ConfigError("ppo.desired_kl must be positive")


@dataclass(frozen=True)
class SmoothCoeffs:
    lambda_t: float = 0.05
    lambda_s: float = 0.05
    sigma: float = 0.05

    def validate(self) -> None:
        if self.lambda_t < 0 or self.lambda_s < 0:
            raise ConfigError("smoothness weights must be >= 0")
        if self.sigma <= 0:
            raise ConfigError("smooth.sigma must be positive")


# ---------------------------------------------------------------------------
# Actor-critic
# ---------------------------------------------------------------------------


class ActorCritic:
    """Gaussian policy with a state-independent log-std, plus a value network."""

    def __init__(self, policy: Mlp, value: Mlp, log_std: np.ndarray | None = None):
        if value.out_dim != 1:
            raise ConfigError("value network must have a single output")
        if policy.in_dim != value.in_dim:
            raise ConfigError("policy and value networks must read the same observation")
        self.policy = policy
        self.value = value
        self.log_std = np.zeros(policy.out_dim) if log_std is None else np.array(log_std, float)

    @classmethod
    def build(cls, obs_dim: int, action_dim: int, hidden: Sequence[int], rng: Rng,
              init_log_std: float = 0.0) -> "ActorCritic":
        policy = Mlp.build([obs_dim, *hidden, action_dim], rng)
        value = Mlp.build([obs_dim, *hidden, 1], rng)
        return cls(policy, value, np.full(action_dim, init_log_std))

    @property
    def action_dim(self) -> int:
        return self.policy.out_dim

    def distribution(self, obs: np.ndarray) -> GaussianPolicyOut:
        return GaussianPolicyOut(self.policy(obs), np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX))

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        return self.policy(obs)

    def value_fn(self, obs: np.ndarray) -> np.ndarray:
        return self.value(obs)[..., 0]

    def params(self) -> list[np.ndarray]:
        return self.policy.params() + [self.log_std] + self.value.params()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"policy.{i}": p for i, p in enumerate(self.policy.params())}
        out["log_std"] = self.log_std
        out.update({f"value.{i}": p for i, p in enumerate(self.value.params())})
        return {k: v.copy() for k, v in out.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        n_pol = len(self.policy.params())
        self.policy.load_params([state[f"policy.{i}"] for i in range(n_pol)])
        self.log_std[...] = state["log_std"]
        n_val = len(self.value.params())
        self.value.load_params([state[f"value.{i}"] for i in range(n_val)])


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def importance_ratio(logp_new, logp_old):
    return np.clip(np.exp(np.asarray(logp_new) - np.asarray(logp_old)), RATIO_MIN, RATIO_MAX)


def clipped_surrogate(ratio, adv, eps: float):
    """Per-sample objective to maximize: min(r*A, clip(r, 1-eps, 1+eps)*A)."""
    if not 0.0 < eps < 1.0:
        raise ConfigError("clip range must lie in (0, 1)")
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def value_loss(v, v_target) -> float:
    v = np.asarray(v, dtype=np.float64)
    v_target = np.asarray(v_target, dtype=np.float64)
    if v.shape != v_target.shape:
        raise ConfigError("value and target shapes differ")
    return float(np.mean((v - v_target) ** 2))


def temporal_smoothness(mean_fn, states, next_states) -> float:
    """Mean squared distance between mean actions of consecutive states."""
    d = mean_fn(np.asarray(next_states)) - mean_fn(np.asarray(states))
    return float(np.mean(np.sum(d * d, axis=-1)))


def spatial_smoothness(mean_fn, states, sigma: float, rng: Rng) -> float:
    """Single-sample estimate of E||pi(s + sigma*xi) - pi(s)||^2, xi ~ N(0, I)."""
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    states = np.asarray(states, dtype=np.float64)
    perturbed = states + sigma * rng.normal(states.shape)
    d = mean_fn(perturbed) - mean_fn(states)
    return float(np.mean(np.sum(d * d, axis=-1)))


# ---------------------------------------------------------------------------
# Entropy coefficient schedule
# ---------------------------------------------------------------------------

SCHEDULES = ("return_proportional", "return_complement", "fixed")


class EntropyScheduler:
    """Entropy weight driven by a moving window of recent episode returns.

    ``return_proportional``: beta = beta_max * clamp(R, 0, R_max) / R_max.
    ``return_complement``: beta = beta_max * (1 - clamp(R, 0, R_max) / R_max).
    ``fixed``: beta = fixed_beta; the window is still maintained for logging.

    With ``r_max=None`` the ceiling tracks 1.1 x the largest return seen so far.
    Until a positive return has been seen the ratio is taken as 0.
    """

    def __init__(self, beta_max: float = 0.02, tau: int = 128, r_max: float | None = None,
                 mode: str = "return_proportional", fixed_beta: float = 0.01):
        if tau < 1:
            raise ConfigError("tau must be >= 1")
        if r_max is not None and r_max <= 0:
            raise ConfigError("r_max must be positive")
        if mode not in SCHEDULES:
            raise ConfigError(f"unknown entropy schedule {mode!r}")
        if beta_max < 0 or fixed_beta < 0:
            raise ConfigError("entropy coefficients must be >= 0")
        self.beta_max = beta_max
        self.tau = tau
        self.fixed_r_max = r_max
        self.mode = mode
        self.fixed_beta = fixed_beta
        self.window: deque[float] = deque(maxlen=tau)
        self.best_return = -math.inf
        self.r_mean = 0.0
        self.beta = fixed_beta if mode == "fixed" else self._beta_from(0.0)

    @property
    def r_max(self) -> float:
        if self.fixed_r_max is not None:
            return self.fixed_r_max
        return 1.1 * self.best_return if self.best_return > 0 else 0.0

    def _beta_from(self, r_mean: float) -> float:
        r_max = self.r_max
        ratio = min(max(r_mean, 0.0), r_max) / r_max if r_max > 0 else 0.0
        if self.mode == "return_complement":
            return self.beta_max * (1.0 - ratio)
        return self.beta_max * ratio

    def update(self, new_returns: Sequence[float]) -> float:
        for g in new_returns:
            g = float(g)
            self.window.append(g)
            self.best_return = max(self.best_return, g)
        if self.window:
            self.r_mean = float(np.mean(self.window))
        self.beta = self.fixed_beta if self.mode == "fixed" else self._beta_from(self.r_mean)
        return self.beta


def update_entropy_coefficient(state: EntropyScheduler, new_episode_returns) -> float:
    return state.update(new_episode_returns)


# ---------------------------------------------------------------------------
# Total loss and update
# ---------------------------------------------------------------------------


@dataclass
class Minibatch:
    obs: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    mu_old: np.ndarray
    log_std_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    next_obs: np.ndarray
    has_next: np.ndarray  # bool: next_obs is the true successor (no episode end)


@dataclass
class UpdateStats:
    surrogate: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    beta: float = 0.0
    l_t: float = 0.0
    l_s: float = 0.0
    l_t_term: float = 0.0
    l_s_term: float = 0.0
    kl: float = 0.0
    clip_frac: float = 0.0
    grad_norm: float = 0.0
    lr: float = 0.0
    skipped: int = 0

    def as_row(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def total_loss(mb: Minibatch, ac: ActorCritic, beta: float, ppo: PpoCoeffs,
               smooth: SmoothCoeffs, noise: np.ndarray | None = None):
    """Loss value, gradients in ``ac.params()`` order, and per-term stats.

    ``noise`` holds standard-normal perturbations for L_S (same shape as
    ``mb.obs``); it is required when ``smooth.lambda_s > 0``.
    """
    n = mb.obs.shape[0]
    use_t = smooth.lambda_t > 0 and bool(np.any(mb.has_next))
    use_s = smooth.lambda_s > 0
    if use_s and noise is None:
        raise ConfigError("spatial smoothness needs a noise array")

    # One batched policy pass over clean, successor and perturbed states.
    parts = [mb.obs]
    if use_t:
        nxt = mb.next_obs[mb.has_next]
        parts.append(nxt)
    if use_s:
        parts.append(mb.obs + smooth.sigma * noise)
    stacked = np.concatenate(parts) if len(parts) > 1 else mb.obs
    means, cache_p = ac.policy.forward(stacked)
    mean = means[:n]
    off = n

    raw_ls = ac.log_std
    ls = np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX)
    inv_std = np.exp(-ls)
    z = (mb.actions - mean) * inv_std
    logp = np.sum(-0.5 * z * z - ls - 0.5 * LOG_2PI, axis=-1)
    ratio_raw = np.exp(logp - mb.logp_old)
    ratio = np.clip(ratio_raw, RATIO_MIN, RATIO_MAX)
    adv = mb.advantages
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - ppo.clip, 1.0 + ppo.clip) * adv
    surr = np.minimum(unclipped, clipped)
    surrogate = float(np.mean(surr))

    # d(-mean surr)/d logp: only the unclipped branch carries gradient.
    active = (unclipped <= clipped) & (ratio_raw >= RATIO_MIN) & (ratio_raw <= RATIO_MAX)
    g_logp = -np.where(active, unclipped, 0.0) / n
    g_means = np.zeros_like(means)
    g_means[:n] = g_logp[:, None] * z * inv_std
    g_ls = np.sum(g_logp[:, None] * (z * z - 1.0), axis=0)

    entropy = float(np.sum(ENTROPY_PER_DIM + ls))
    g_ls = g_ls - beta

    values, cache_v = ac.value.forward(mb.obs)
    v = values[:, 0]
    v_loss = float(np.mean((v - mb.returns) ** 2))
    g_v = (2.0 * ppo.value_coef / n) * (v - mb.returns)

    l_t = 0.0
    if use_t:
        idx = np.flatnonzero(mb.has_next)
        m_next = means[off: off + idx.size]
        d = m_next - mean[idx]
        l_t = float(np.mean(np.sum(d * d, axis=-1)))
        g = (2.0 * smooth.lambda_t / idx.size) * d
        g_means[off: off + idx.size] += g
        g_means[idx] -= g
        off += idx.size
    l_s = 0.0
    if use_s:
        d = means[off: off + n] - mean
        l_s = float(np.mean(np.sum(d * d, axis=-1)))
        g = (2.0 * smooth.lambda_s / n) * d
        g_means[off: off + n] += g
        g_means[:n] -= g

    loss = (-surrogate + ppo.value_coef * v_loss + smooth.lambda_t * l_t
            + smooth.lambda_s * l_s - beta * entropy)
    if not math.isfinite(loss):
        raise NonFiniteError(
            f"non-finite loss: surrogate={surrogate} value={v_loss} l_t={l_t} l_s={l_s} "
            f"entropy={entropy}"
        )

    g_pol, _ = ac.policy.backward(cache_p, g_means)
    g_ls = np.where((raw_ls >= LOG_STD_MIN) & (raw_ls <= LOG_STD_MAX), g_ls, 0.0)
    g_val, _ = ac.value.backward(cache_v, g_v[:, None])
    grads = g_pol + [g_ls] + g_val

    kl = float(np.mean(gaussian_kl(mb.mu_old, mb.log_std_old, mean, ls)))
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > ppo.clip))
    stats = UpdateStats(surrogate=surrogate, value_loss=v_loss, entropy=entropy, beta=beta,
                        l_t=l_t, l_s=l_s, l_t_term=smooth.lambda_t * l_t,
                        l_s_term=smooth.lambda_s * l_s, kl=kl, clip_frac=clip_frac)
    return loss, grads, stats


@dataclass
class FlatBatch:
    """Flattened update data; every array has leading dimension M."""

    obs: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    mu_old: np.ndarray
    log_std_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    next_obs: np.ndarray
    has_next: np.ndarray

    def take(self, idx) -> Minibatch:
        return Minibatch(self.obs[idx], self.actions[idx], self.logp_old[idx], self.mu_old[idx],
                         self.log_std_old, self.advantages[idx], self.returns[idx],
                         self.next_obs[idx], self.has_next[idx])


def ppo_update(data: FlatBatch, ac: ActorCritic, opt: Adam, ppo: PpoCoeffs,
               smooth: SmoothCoeffs, beta: float, shuffle_rng: Rng, noise_rng: Rng) -> UpdateStats:
    """``epochs`` passes over shuffled minibatches; returns averaged stats.

    With ``ppo.adaptive_lr`` the step size is halved when the minibatch KL
    exceeds twice the target and grown by 1.5x when it falls below half of it.
    Minibatches whose loss or gradient is non-finite are skipped and counted.
    """
    m = data.obs.shape[0]
    mb_size = m // ppo.minibatches
    if mb_size < 1:
        raise ConfigError("more minibatches than samples")
    totals = UpdateStats(beta=beta)
    used = 0
    skipped = 0
    for _ in range(ppo.epochs):
        order = shuffle_rng.permutation(m)
        for k in range(ppo.minibatches):
            idx = order[k * mb_size:(k + 1) * mb_size]
            mb = data.take(idx)
            noise = noise_rng.normal(mb.obs.shape) if smooth.lambda_s > 0 else None
            try:
                _, grads, stats = total_loss(mb, ac, beta, ppo, smooth, noise)
                if not all(np.all(np.isfinite(g)) for g in grads):
                    raise NonFiniteError("non-finite gradient")
            except NonFiniteError:
                skipped += 1
                continue
            if ppo.adaptive_lr:
                if stats.kl > 2.0 * ppo.desired_kl:
                    opt.lr = max(ppo.lr_min, opt.lr / 2.0)
                elif stats.kl < ppo.desired_kl / 2.0:
                    opt.lr = min(ppo.lr_max, opt.lr * 1.5)
            stats.grad_norm = clip_by_global_norm(grads, ppo.max_grad_norm)
            opt.step(grads)
            used += 1
            for f in ("surrogate", "value_loss", "entropy", "l_t", "l_s", "l_t_term",
                      "l_s_term", "kl", "clip_frac", "grad_norm"):
                setattr(totals, f, getattr(totals, f) + getattr(stats, f))
    if used:
        for f in ("surrogate", "value_loss", "entropy", "l_t", "l_s", "l_t_term",
                  "l_s_term", "kl", "clip_frac", "grad_norm"):
            setattr(totals, f, getattr(totals, f) / used)
    totals.lr = opt.lr
    totals.skipped = skipped
    return totals
