"""Single training run: collect, add bonuses, estimate advantages, update, evaluate."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig, save_config
from .env import N_JOINTS, OBS_DIM, VecEnv
from .errors import DivergenceError
from .intrinsic import DensityModel, IcmNets, IntrinsicNormalizer, RndNets, combine_rewards
from .metrics import EpisodeTrace, trace_metrics
from .numkit import Adam, Rng, derive_seed, load_checkpoint, save_checkpoint
from .policy_opt import ActorCritic, EntropyScheduler, FlatBatch, ppo_update
from .rollout import collect, gae, normalize_advantages

log = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = [
    "iteration", "env_steps", "mean_reward", "mean_combined_reward", "icm_mean", "rnd_mean",
    "cnt_mean", "beta_t", "window_return", "r_max", "episodes", "mean_episode_return",
    "surrogate", "value_loss", "entropy", "l_t", "l_s", "l_t_term", "l_s_term", "kl",
    "clip_frac", "grad_norm", "lr", "skipped", "icm_forward_loss", "icm_inverse_loss",
    "rnd_loss",
]
EVAL_LOG_COLUMNS = [
    "iteration", "env_steps", "reward", "pitch_rms", "acc_rms", "torque_rms", "joint_acc_rms",
    "action_diff_rms", "ang_vel_energy", "fall_rate", "episode_length",
]
EPISODE_COLUMNS = ["episode", "iteration", "instance", "return", "length", "fell"]

# Independent PRNG streams per consumer; adding draws to one never shifts another.
STREAM_INIT, STREAM_ACT, STREAM_SHUFFLE, STREAM_SMOOTH = 1, 2, 3, 4
STREAM_ICM, STREAM_RND_TARGET, STREAM_RND_PRED, STREAM_INTRINSIC_BATCH = 5, 6, 7, 8


@dataclass
class RunArtifacts:
    run_dir: Path | None
    config: TrainConfig
    seed: int
    train_log: list[dict] = field(default_factory=list)
    eval_log: list[dict] = field(default_factory=list)
    episode_returns: list[float] = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    combined_rewards: list[np.ndarray] = field(default_factory=list)
    return_windows: list[list[float]] = field(default_factory=list)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def evaluate(ac: ActorCritic, cfg: TrainConfig, base_seed: int) -> tuple[dict, list[EpisodeTrace]]:
    """Roll out the mean action on ``eval_episodes`` instances for one episode each."""
    env = VecEnv(cfg.env, cfg.terrain_spec(), cfg.eval_episodes, base_seed)
    n = env.n
    obs = env.obs.copy()
    live = np.ones(n, dtype=bool)
    rec = {k: [] for k in ("theta", "omega", "qd", "torque", "a_body", "reward", "action")}
    lengths = np.zeros(n, dtype=np.int64)
    fell = np.zeros(n, dtype=bool)
    for _ in range(cfg.env.horizon):
        action = np.clip(ac.mean_action(obs), -1.0, 1.0)
        obs, reward, done, info, _ = env.step(action)
        rec["theta"].append(info.theta)
        rec["omega"].append(info.omega)
        rec["qd"].append(info.joint_vel)
        rec["torque"].append(info.torque)
        rec["a_body"].append(info.a_body)
        rec["reward"].append(reward)
        rec["action"].append(action)
        lengths += live
        newly = live & done
        fell |= newly & info.fell
        live &= ~done
        if not live.any():
            break
    arr = {k: np.stack(v) for k, v in rec.items()}
    traces = []
    for i in range(n):
        T = int(lengths[i])
        traces.append(EpisodeTrace(
            theta=arr["theta"][:T, i], omega=arr["omega"][:T, i], joint_vel=arr["qd"][:T, i],
            torque=arr["torque"][:T, i], a_body=arr["a_body"][:T, i],
            rewards=arr["reward"][:T, i], dt=cfg.env.dt, actions=arr["action"][:T, i]))
    per = [trace_metrics(t) for t in traces]
    summary = {k: float(np.mean([p[k] for p in per])) for k in per[0]}
    summary["fall_rate"] = float(np.mean(fell))
    summary["episode_length"] = float(np.mean(lengths))
    return summary, traces


class Trainer:
    """Owns every piece of state for one (config, seed) run."""

    def __init__(self, cfg: TrainConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.seed = int(seed)
        s = self.seed

        def stream(k, lanes=64):
            return Rng(derive_seed(s, k), lanes=lanes)

        self.rng_act = stream(STREAM_ACT, lanes=2 * N_JOINTS * cfg.n_envs)
        self.rng_shuffle = stream(STREAM_SHUFFLE, lanes=1024)
        self.rng_smooth = stream(STREAM_SMOOTH, lanes=4096)
        self.rng_batch = stream(STREAM_INTRINSIC_BATCH, lanes=1024)

        self.env = VecEnv(cfg.env, cfg.terrain_spec(), cfg.n_envs, base_seed=s * 1000)
        self.eval_seed = s * 1000 + 500
        self.ac = ActorCritic.build(OBS_DIM, N_JOINTS, cfg.net.hidden, stream(STREAM_INIT),
                                    cfg.net.init_log_std)
        self.opt = Adam(self.ac.params(), lr=cfg.ppo.learning_rate)
        ic = cfg.intrinsic
        self.icm = IcmNets.build(OBS_DIM, N_JOINTS, ic, stream(STREAM_ICM))
        self.rnd = RndNets.build(OBS_DIM, ic, stream(STREAM_RND_TARGET), stream(STREAM_RND_PRED))
        self.density = DensityModel(OBS_DIM, ic.density_bins, ic.density_range, ic.density_alpha)
        self.normalizer = IntrinsicNormalizer(
            {"icm": ic.eta_icm, "rnd": ic.eta_rnd, "cnt": ic.eta_cnt}, ic.reward_clip, ic.std_floor)
        e = cfg.entropy
        self.scheduler = EntropyScheduler(e.beta_max, e.tau, e.r_max, e.schedule, e.fixed_beta)
        self.iteration = 0
        self.env_steps = 0
        self.episode_counter = 0

    # -- one iteration -----------------------------------------------------

    def intrinsic_rewards(self, batch):
        cfg = self.cfg.intrinsic
        t, n = batch.shape
        s = batch.flat("obs")
        s_next = batch.flat("next_obs")
        a = np.clip(batch.flat("actions"), -1.0, 1.0)
        zeros = np.zeros((t, n))
        r_icm, r_rnd, r_cnt = zeros, zeros.copy(), zeros.copy()
        losses = {"icm_forward_loss": 0.0, "icm_inverse_loss": 0.0, "rnd_loss": 0.0}
        if cfg.eta_icm > 0:
            r_icm = self.icm.reward(s, a, s_next).reshape(t, n)
        if cfg.eta_rnd > 0:
            r_rnd = self.rnd.reward(s).reshape(t, n)
        if cfg.eta_cnt > 0:
            r_cnt = self.density.bonus_batch(s, cfg.eta_cnt).reshape(t, n)
        if (cfg.eta_icm > 0 or cfg.eta_rnd > 0) and cfg.train_steps > 0:
            m = s.shape[0]
            size = min(cfg.train_batch, m)
            fw = inv = rl = 0.0
            for _ in range(cfg.train_steps):
                idx = self.rng_batch.permutation(m)[:size]
                if cfg.eta_icm > 0:
                    f_, i_ = self.icm.train(s[idx], a[idx], s_next[idx])
                    fw += f_
                    inv += i_
                if cfg.eta_rnd > 0:
                    rl += self.rnd.train(s[idx])
            k = cfg.train_steps
            losses = {"icm_forward_loss": fw / k, "icm_inverse_loss": inv / k, "rnd_loss": rl / k}
        return r_icm, r_rnd, r_cnt, losses

    def step(self) -> dict:
        cfg = self.cfg
        self.iteration += 1
        batch = collect(self.ac, self.ac.value_fn, self.env, cfg.rollout_steps, self.rng_act)
        r_icm, r_rnd, r_cnt, ilosses = self.intrinsic_rewards(batch)
        combined = combine_rewards(batch.rewards, r_icm, r_rnd, r_cnt, self.normalizer)
        batch.combined = combined
        batch.r_icm = self.normalizer.normalize("icm", r_icm)
        batch.r_rnd = self.normalizer.normalize("rnd", r_rnd)
        batch.r_cnt = self.normalizer.normalize("cnt", r_cnt)

        advset = gae(combined, batch.values, batch.dones, batch.bootstrap,
                     cfg.ppo.gamma, cfg.ppo.gae_lambda)
        adv = normalize_advantages(advset.advantages.ravel())
        m = adv.size
        data = FlatBatch(
            obs=batch.flat("obs"), actions=batch.flat("actions"), logp_old=batch.flat("logp"),
            mu_old=batch.flat("mu"), log_std_old=batch.log_std, advantages=adv,
            returns=advset.returns.ravel(), next_obs=batch.flat("next_obs"),
            has_next=np.ones(m, dtype=bool))
        beta = self.scheduler.beta
        stats = ppo_update(data, self.ac, self.opt, cfg.ppo, cfg.smooth, beta,
                           self.rng_shuffle, self.rng_smooth)
        if not all(np.all(np.isfinite(p)) for p in self.ac.params()):
            raise DivergenceError(f"non-finite parameters after iteration {self.iteration}")

        returns = [e.ret for e in batch.episodes]
        self.scheduler.update(returns)
        self.env_steps += m
        self.last_batch = batch
        self.last_window = list(self.scheduler.window)
        self.last_episodes = batch.episodes

        row = {
            "iteration": self.iteration, "env_steps": self.env_steps,
            "mean_reward": float(np.mean(batch.rewards)),
            "mean_combined_reward": float(np.mean(combined)),
            "icm_mean": float(np.mean(batch.r_icm)), "rnd_mean": float(np.mean(batch.r_rnd)),
            "cnt_mean": float(np.mean(batch.r_cnt)),
            "beta_t": self.scheduler.beta, "window_return": self.scheduler.r_mean,
            "r_max": self.scheduler.r_max, "episodes": len(returns),
            "mean_episode_return": float(np.mean(returns)) if returns else float("nan"),
        }
        su = stats.as_row()
        for k in ("surrogate", "value_loss", "entropy", "l_t", "l_s", "l_t_term", "l_s_term",
                  "kl", "clip_frac", "grad_norm", "lr", "skipped"):
            row[k] = su[k]
        row.update(ilosses)
        row["beta_used"] = beta
        return row


def run_experiment(cfg: TrainConfig, seed: int | None = None, out_dir: str | Path | None = None,
                   keep_rewards: bool = False) -> RunArtifacts:
    """Train one (config, seed) pair; writes artifacts when ``out_dir`` is given.

    Artifacts: ``config.json``, ``train_log.csv``, ``eval_log.csv``,
    ``episodes.csv``, ``checkpoint.npz`` and ``metrics.json``. On divergence
    the last good parameters are checkpointed before re-raising.
    """
    cfg.validate()
    seed = cfg.seeds[0] if seed is None else seed
    trainer = Trainer(cfg, seed)
    run_dir = Path(out_dir) if out_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, run_dir / "config.json")
    art = RunArtifacts(run_dir, cfg, seed)
    episodes_rows = []
    last_good = trainer.ac.state_dict()
    try:
        for it in range(1, cfg.iterations + 1):
            row = trainer.step()
            row.pop("beta_used")
            art.train_log.append(row)
            for e in trainer.last_episodes:
                trainer.episode_counter += 1
                art.episode_returns.append(e.ret)
                episodes_rows.append({"episode": trainer.episode_counter, "iteration": it,
                                      "instance": e.instance, "return": e.ret,
                                      "length": e.length, "fell": e.fell})
            art.return_windows.append(trainer.last_window)
            if keep_rewards:
                art.combined_rewards.append(trainer.last_batch.combined.copy())
            if not all(math.isfinite(row[k]) for k in ("surrogate", "value_loss", "mean_combined_reward")):
                raise DivergenceError(f"non-finite training statistics at iteration {it}")
            last_good = trainer.ac.state_dict()
            if it == 1 or it % cfg.eval_interval == 0 or it == cfg.iterations:
                summary, _ = evaluate(trainer.ac, cfg, trainer.eval_seed)
                art.eval_log.append({"iteration": it, "env_steps": trainer.env_steps, **summary})
                log.info("it %d eval reward %.3f", it, summary["reward"])
    except DivergenceError:
        if run_dir is not None:
            save_checkpoint(run_dir / "checkpoint_last_good.npz", last_good)
        raise
    finally:
        if run_dir is not None:
            _write_csv(run_dir / "train_log.csv", TRAIN_LOG_COLUMNS, art.train_log)
            _write_csv(run_dir / "eval_log.csv", EVAL_LOG_COLUMNS, art.eval_log)
            _write_csv(run_dir / "episodes.csv", EPISODE_COLUMNS, episodes_rows)

    final = dict(art.eval_log[-1])
    best = max(art.eval_log, key=lambda r: r["reward"])
    final["best_reward"] = best["reward"]
    final["best_iteration"] = best["iteration"]
    final["first_reward"] = art.eval_log[0]["reward"]
    art.final_metrics = final
    if run_dir is not None:
        save_checkpoint(run_dir / "checkpoint.npz", trainer.ac.state_dict())
        (run_dir / "metrics.json").write_text(
            json.dumps({"variant": cfg.variant, "terrain": cfg.terrain, "seed": seed,
                        "final": final}, indent=2, sort_keys=True) + "\n")
    art.trainer = trainer  # type: ignore[attr-defined]
    return art


def load_policy(run_dir: str | Path, cfg: TrainConfig) -> ActorCritic:
    ac = ActorCritic.build(OBS_DIM, N_JOINTS, cfg.net.hidden, Rng(0), cfg.net.init_log_std)
    ac.load_state_dict(load_checkpoint(Path(run_dir) / "checkpoint.npz"))
    return ac
