"""Exploration bonuses: curiosity (ICM), random network distillation, pseudo-counts."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DensityInconsistencyError
from .numkit import Adam, Mlp, Rng

SOURCES = ("icm", "rnd", "cnt")


@dataclass(frozen=True)
class IntrinsicConfig:
    eta_icm: float = 0.1
    eta_rnd: float = 0.1
    eta_cnt: float = 0.05
    feature_dim: int = 16
    hidden: tuple = (32, 32)
    learning_rate: float = 1e-3
    train_steps: int = 4
    train_batch: int = 1024
    forward_weight: float = 0.2
    inverse_weight: float = 0.8
    density_bins: int = 16
    density_range: float = 5.0
    density_alpha: float = 1.0
    reward_clip: float = 5.0
    std_floor: float = 1e-4

    def validate(self) -> None:
        for name in ("eta_icm", "eta_rnd", "eta_cnt", "forward_weight", "inverse_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"intrinsic.{name} must be >= 0")
        if self.feature_dim < 1 or self.train_steps < 0 or self.train_batch < 1:
            raise ConfigError("intrinsic sizes must be positive")
        if self.density_bins < 2 or self.density_range <= 0 or self.density_alpha <= 0:
            raise ConfigError("density model needs >= 2 bins, positive range and alpha")
        if self.learning_rate < 0 or self.reward_clip <= 0 or self.std_floor <= 0:
            raise ConfigError("intrinsic learning_rate/reward_clip/std_floor out of range")


# ---------------------------------------------------------------------------
# ICM
# ---------------------------------------------------------------------------


class IcmNets:
    """Encoder, forward model and inverse model trained with one shared Adam.

    The forward loss treats encoder features as constants, so the encoder is
    shaped only by the inverse (action-recovery) loss.
    """

    def __init__(self, encoder: Mlp, forward_model: Mlp, inverse_model: Mlp, eta: float,
                 lr: float = 1e-3, forward_weight: float = 0.2, inverse_weight: float = 0.8):
        feat = encoder.out_dim
        a_dim = inverse_model.out_dim
        if forward_model.in_dim != feat + a_dim or forward_model.out_dim != feat:
            raise ConfigError("forward model must map feature+action to feature")
        if inverse_model.in_dim != 2 * feat:
            raise ConfigError("inverse model must read two feature vectors")
        if eta < 0:
            raise ConfigError("eta_icm must be >= 0")
        self.encoder = encoder
        self.forward_model = forward_model
        self.inverse_model = inverse_model
        self.eta = eta
        self.forward_weight = forward_weight
        self.inverse_weight = inverse_weight
        self.opt = Adam(self.params(), lr=lr)

    @classmethod
    def build(cls, obs_dim: int, action_dim: int, cfg: IntrinsicConfig, rng: Rng) -> "IcmNets":
        h = list(cfg.hidden)
        f = cfg.feature_dim
        return cls(
            Mlp.build([obs_dim, *h, f], rng),
            Mlp.build([f + action_dim, *h, f], rng),
            Mlp.build([2 * f, *h, action_dim], rng),
            cfg.eta_icm, cfg.learning_rate, cfg.forward_weight, cfg.inverse_weight,
        )

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.forward_model.params() + self.inverse_model.params()

    def prediction_error(self, s, a, s_next) -> np.ndarray:
        phi = self.encoder(s)
        phi_next = self.encoder(s_next)
        pred = self.forward_model(np.concatenate([phi, a], axis=-1))
        return np.sum((phi_next - pred) ** 2, axis=-1)

    def reward(self, s, a, s_next) -> np.ndarray:
        return self.eta * self.prediction_error(s, a, s_next)

    def losses_and_grads(self, s, a, s_next):
        """Returns ``(forward_loss, inverse_loss, grads in params() order)``."""
        n = s.shape[0]
        phi_all, cache_e = self.encoder.forward(np.concatenate([s, s_next]))
        phi, phi_next = phi_all[:n], phi_all[n:]

        pred, cache_f = self.forward_model.forward(np.concatenate([phi, a], axis=-1))
        diff_f = pred - phi_next
        l_fwd = float(np.mean(np.sum(diff_f * diff_f, axis=-1)))
        g_f, _ = self.forward_model.backward(cache_f, (2.0 * self.forward_weight / n) * diff_f)

        a_hat, cache_i = self.inverse_model.forward(np.concatenate([phi, phi_next], axis=-1))
        diff_i = a_hat - a
        l_inv = float(np.mean(np.sum(diff_i * diff_i, axis=-1)))
        g_i, g_in = self.inverse_model.backward(
            cache_i, (2.0 * self.inverse_weight / n) * diff_i, need_input_grad=True)
        feat = phi.shape[1]
        g_phi = np.concatenate([g_in[:, :feat], g_in[:, feat:]])
        g_e, _ = self.encoder.backward(cache_e, g_phi)
        return l_fwd, l_inv, g_e + g_f + g_i

    def train(self, s, a, s_next) -> tuple[float, float]:
        l_fwd, l_inv, grads = self.losses_and_grads(s, a, s_next)
        if not (math.isfinite(l_fwd) and math.isfinite(l_inv)):
            return l_fwd, l_inv
        self.opt.step(grads)
        return l_fwd, l_inv


def icm_reward(nets: IcmNets, s, a, s_next):
    return nets.reward(s, a, s_next)


def icm_train(nets: IcmNets, s, a, s_next) -> tuple[float, float]:
    return nets.train(s, a, s_next)


# ---------------------------------------------------------------------------
# RND
# ---------------------------------------------------------------------------


def params_checksum(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
    return h.hexdigest()


class RndNets:
    """Frozen random target embedding and a predictor trained to match it."""

    def __init__(self, target: Mlp, predictor: Mlp, eta: float, lr: float = 1e-3):
        if target.in_dim != predictor.in_dim or target.out_dim != predictor.out_dim:
            raise ConfigError("target and predictor shapes differ")
        if eta < 0:
            raise ConfigError("eta_rnd must be >= 0")
        self.target = target
        self.predictor = predictor
        self.eta = eta
        self.opt = Adam(predictor.params(), lr=lr)
        self.target_checksum = params_checksum(target.params())

    @classmethod
    def build(cls, obs_dim: int, cfg: IntrinsicConfig, target_rng: Rng, predictor_rng: Rng) -> "RndNets":
        sizes = [obs_dim, *cfg.hidden, cfg.feature_dim]
        return cls(Mlp.build(sizes, target_rng), Mlp.build(sizes, predictor_rng), cfg.eta_rnd,
                   cfg.learning_rate)

    def prediction_error(self, s) -> np.ndarray:
        return np.sum((self.target(s) - self.predictor(s)) ** 2, axis=-1)

    def reward(self, s) -> np.ndarray:
        return self.eta * self.prediction_error(s)

    def loss_and_grads(self, s):
        s = np.atleast_2d(s)
        tgt = self.target(s)
        pred, cache = self.predictor.forward(s)
        diff = pred - tgt
        loss = float(np.mean(np.sum(diff * diff, axis=-1)))
        grads, _ = self.predictor.backward(cache, (2.0 / s.shape[0]) * diff)
        return loss, grads

    def train(self, s) -> float:
        loss, grads = self.loss_and_grads(s)
        if math.isfinite(loss):
            self.opt.step(grads)
        return loss

    def target_unchanged(self) -> bool:
        return params_checksum(self.target.params()) == self.target_checksum


def rnd_reward(nets: RndNets, s):
    return nets.reward(s)


# ---------------------------------------------------------------------------
# Pseudo-counts
# ---------------------------------------------------------------------------


def pseudo_count(rho: float, rho_prime: float) -> float:
    """Pseudo-count from the density of a state before and after observing it."""
    if not (0.0 < rho < 1.0 and 0.0 < rho_prime < 1.0):
        raise ConfigError("densities must lie strictly inside (0, 1)")
    if rho_prime < rho:
        raise DensityInconsistencyError(f"density fell after update: {rho} -> {rho_prime}")
    return rho * (1.0 - rho_prime) / (rho_prime * (1.0 - rho))


def pseudo_count_from_logs(log_rho: np.ndarray, log_rho_prime: np.ndarray) -> np.ndarray:
    """Vectorized pseudo-count; entries where the density fell map to 1."""
    log_rho = np.asarray(log_rho, dtype=np.float64)
    log_rho_prime = np.asarray(log_rho_prime, dtype=np.float64)
    log_n = (log_rho - log_rho_prime
             + np.log1p(-np.exp(log_rho_prime)) - np.log1p(-np.exp(log_rho)))
    return np.where(log_rho_prime < log_rho, 1.0, np.exp(log_n))


def count_bonus(n_hat, eta: float):
    return eta / np.sqrt(np.maximum(n_hat, 1e-8))


class DensityModel:
    """Product of per-dimension histograms with additive (Laplace) smoothing.

    Each dimension has ``bins`` equal bins over ``[-value_range, value_range]``;
    values outside are clamped into the edge bins.
    """

    def __init__(self, dim: int, bins: int = 16, value_range: float = 5.0, alpha: float = 1.0):
        if dim < 1 or bins < 2 or value_range <= 0 or alpha <= 0:
            raise ConfigError("invalid density model settings")
        self.dim = dim
        self.bins = bins
        self.value_range = value_range
        self.alpha = alpha
        self.counts = np.zeros((dim, bins))
        self.total = 0

    def bin_index(self, obs: np.ndarray) -> np.ndarray:
        obs = np.clip(np.asarray(obs, dtype=np.float64), -self.value_range, self.value_range)
        idx = np.floor((obs + self.value_range) / (2.0 * self.value_range) * self.bins)
        return np.clip(idx, 0, self.bins - 1).astype(np.int64)

    def observe_batch(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Sequentially observe rows of ``obs``; returns ``(log rho, log rho')`` per row.

        Equivalent to calling :meth:`observe` row by row, in order.
        """
        obs = np.atleast_2d(obs)
        if obs.shape[1] != self.dim:
            raise ConfigError("observation dim does not match density model")
        if not np.all(np.isfinite(obs)):
            raise ConfigError("density model needs finite observations")
        m = obs.shape[0]
        b = self.bin_index(obs)
        prior = np.empty((m, self.dim))
        pos = np.arange(m)
        for d in range(self.dim):
            col = b[:, d]
            order = np.argsort(col, kind="stable")
            sorted_col = col[order]
            starts = np.r_[0, np.flatnonzero(np.diff(sorted_col)) + 1]
            group_start = np.repeat(starts, np.diff(np.r_[starts, m]))
            earlier = np.empty(m)
            earlier[order] = pos - group_start
            prior[:, d] = self.counts[d, col] + earlier
        n_before = self.total + pos
        a, nb = self.alpha, self.alpha * self.bins
        log_rho = np.sum(np.log(prior + a), axis=1) - self.dim * np.log(n_before + nb)
        log_rho_p = np.sum(np.log(prior + 1.0 + a), axis=1) - self.dim * np.log(n_before + 1.0 + nb)
        for d in range(self.dim):
            self.counts[d] += np.bincount(b[:, d], minlength=self.bins)
        self.total += m
        return log_rho, log_rho_p

    def observe(self, obs) -> tuple[float, float]:
        lr, lrp = self.observe_batch(np.asarray(obs, dtype=np.float64)[None, :])
        return float(np.exp(lr[0])), float(np.exp(lrp[0]))

    def bonus_batch(self, obs: np.ndarray, eta: float) -> np.ndarray:
        lr, lrp = self.observe_batch(obs)
        return count_bonus(pseudo_count_from_logs(lr, lrp), eta)


def density_observe(model: DensityModel, obs):
    rho, rho_p = model.observe(obs)
    return rho, rho_p, model


# ---------------------------------------------------------------------------
# Normalization and combination
# ---------------------------------------------------------------------------


class RunningMeanStd:
    """Streaming mean and population variance (batched parallel update)."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.var = 0.0

    def update(self, x) -> None:
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size == 0:
            return
        b_mean, b_var, b_n = float(x.mean()), float(x.var()), x.size
        n = self.count + b_n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * b_n + delta * delta * self.count * b_n / n
        self.mean += delta * b_n / n
        self.var = m2 / n
        self.count = n

    @property
    def std(self) -> float:
        return math.sqrt(max(self.var, 0.0))


class IntrinsicNormalizer:
    """Rescales each bonus source by its running std, clips, then reweights by eta.

    The raw bonuses already carry their eta factor, so dividing by the running
    std cancels it; multiplying the clipped value by eta afterwards restores
    eta as the relative weight of each source. A source with eta = 0 always
    contributes exactly 0.
    """

    def __init__(self, etas: dict[str, float], clip: float = 5.0, std_floor: float = 1e-4):
        self.etas = dict(etas)
        self.clip = clip
        self.std_floor = std_floor
        self.stats = {k: RunningMeanStd() for k in self.etas}

    def update(self, name: str, raw) -> None:
        self.stats[name].update(raw)

    def normalize(self, name: str, raw) -> np.ndarray:
        std = max(self.stats[name].std, self.std_floor)
        return self.etas[name] * np.clip(np.asarray(raw) / std, 0.0, self.clip)


def combine_rewards(r, r_icm, r_rnd, r_cnt, normalizer: IntrinsicNormalizer | None = None):
    """Extrinsic reward plus the three (optionally normalized) bonuses.

    With a normalizer, its running statistics are updated with this batch
    before normalizing. The extrinsic reward is never rescaled.
    """
    r = np.asarray(r, dtype=np.float64)
    terms = {"icm": r_icm, "rnd": r_rnd, "cnt": r_cnt}
    out = r.copy()
    for name, raw in terms.items():
        raw = np.asarray(raw, dtype=np.float64)
        if normalizer is not None:
            normalizer.update(name, raw)
            raw = normalizer.normalize(name, raw)
        out = out + raw
    return out
