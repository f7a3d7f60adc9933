import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ecim.env import N_JOINTS, OBS_DIM, EnvConfig, VecEnv
from ecim.errors import ConfigError
from ecim.numkit import GaussianPolicyOut, Rng
from ecim.policy_opt import ActorCritic
from ecim.rollout import collect, dump_batch_csv, gae, normalize_advantages
from ecim.terrain import Terrain, TerrainKind

from oracles import ref_gae


def make(n=3, log_std=0.0, horizon=400, kind="flat"):
    ac = ActorCritic.build(OBS_DIM, N_JOINTS, (16, 16), Rng(0), log_std)
    env = VecEnv(EnvConfig(horizon=horizon), Terrain(TerrainKind(kind)), n, base_seed=0)
    return ac, env


def test_collect_shapes_and_finiteness():
    ac, env = make(n=3)
    b = collect(ac, ac.value_fn, env, 7, Rng(1))
    assert b.shape == (7, 3)
    assert b.obs.shape == (7, 3, OBS_DIM) and b.actions.shape == (7, 3, N_JOINTS)
    assert b.dones.dtype == bool
    assert np.all(np.isfinite(b.logp)) and b.bootstrap.shape == (3,)


def test_collect_minimal_shape():
    ac, env = make(n=1)
    b = collect(ac, ac.value_fn, env, 1, Rng(1))
    assert b.shape == (1, 1) and b.bootstrap.shape == (1,)
    assert b.bootstrap[0] == ac.value_fn(b.next_obs[0])[0]


class FixedSigmaPolicy:
    """Policy stub whose std bypasses the actor-critic log-std clamp."""

    def __init__(self, ac, sigma):
        self.ac = ac
        self.sigma = sigma
        self.action_dim = ac.action_dim

    def distribution(self, obs):
        mean = self.ac.mean_action(obs)
        return GaussianPolicyOut(mean, np.full(self.action_dim, np.log(self.sigma)))


def test_tiny_sigma_actions_equal_means():
    ac, env = make(n=2)
    b = collect(FixedSigmaPolicy(ac, 1e-6), ac.value_fn, env, 5, Rng(1))
    assert np.allclose(b.actions, b.mu, rtol=0, atol=1e-5)


def test_collect_is_deterministic():
    ac, env = make(n=2, kind="rough")
    b1 = collect(ac, ac.value_fn, env, 9, Rng(4))
    ac2, env2 = make(n=2, kind="rough")
    b2 = collect(ac2, ac2.value_fn, env2, 9, Rng(4))
    for name in ("obs", "actions", "rewards", "logp", "values"):
        assert getattr(b1, name).tobytes() == getattr(b2, name).tobytes()


def test_next_obs_is_true_successor_across_resets():
    ac, env = make(n=2, horizon=4)
    b = collect(ac, ac.value_fn, env, 10, Rng(1))
    assert b.dones[3].all() and len(b.episodes) == 4
    # Inside an episode next_obs is the following observation.
    assert np.array_equal(b.next_obs[:3], b.obs[1:4])
    # At the boundary it is the terminal observation, not the reset one.
    assert not np.array_equal(b.next_obs[3], b.obs[4])


def test_logp_matches_stored_distribution():
    ac, env = make(n=2)
    b = collect(ac, ac.value_fn, env, 4, Rng(2))
    sd = np.exp(b.log_std)
    z = (b.actions - b.mu) / sd
    want = np.sum(-0.5 * z * z - np.log(sd) - 0.5 * np.log(2 * np.pi), axis=-1)
    assert np.allclose(b.logp, want, rtol=1e-13)


# -- GAE --------------------------------------------------------------------


def test_gae_single_terminal_step():
    res = gae(np.array([[1.0]]), np.array([[0.0]]), np.array([[True]]), np.array([0.0]), 0.99, 0.95)
    assert res.advantages[0, 0] == 1.0 and res.returns[0, 0] == 1.0


def test_gae_all_zero():
    z = np.zeros((5, 2))
    res = gae(z, z, np.zeros((5, 2), bool), np.zeros(2), 0.99, 0.95)
    assert np.all(res.advantages == 0.0)


def test_gae_three_step_hand_recursion():
    r, v, gamma, lam = [1.0, 0.0, 1.0], [0.5, 0.5, 0.5], 0.99, 0.95
    d2 = 1.0 + gamma * 0.5 - 0.5
    d1 = 0.0 + gamma * 0.5 - 0.5
    d0 = 1.0 + gamma * 0.5 - 0.5
    a2 = d2
    a1 = d1 + gamma * lam * a2
    a0 = d0 + gamma * lam * a1
    res = gae(np.array(r)[:, None], np.array(v)[:, None], np.zeros((3, 1), bool),
              np.array([0.5]), gamma, lam)
    assert res.advantages[:, 0] == pytest.approx([a0, a1, a2], abs=1e-15)
    assert res.returns[:, 0] == pytest.approx([a0 + 0.5, a1 + 0.5, a2 + 0.5], abs=1e-15)


@given(
    hnp.arrays(np.float64, 12, elements=st.floats(-5, 5)),
    hnp.arrays(np.float64, 12, elements=st.floats(-5, 5)),
    hnp.arrays(np.bool_, 12),
    st.floats(-5, 5),
    st.floats(0.5, 1.0),
    st.floats(0.0, 1.0),
)
def test_gae_matches_forward_sum_oracle(r, v, d, boot, gamma, lam):
    res = gae(r[:, None], v[:, None], d[:, None], np.array([boot]), gamma, lam)
    want = ref_gae(r.tolist(), v.tolist(), d.tolist(), boot, gamma, lam)
    assert np.allclose(res.advantages[:, 0], want, rtol=1e-10, atol=1e-10)


def test_gae_lambda_one_is_discounted_return_minus_value():
    r = np.array([1.0, 2.0, 3.0])[:, None]
    v = np.array([0.1, 0.2, 0.3])[:, None]
    res = gae(r, v, np.zeros((3, 1), bool), np.array([4.0]), 0.9, 1.0)
    g0 = 1 + 0.9 * 2 + 0.81 * 3 + 0.729 * 4
    assert res.returns[0, 0] == pytest.approx(g0)


def test_gae_validation():
    with pytest.raises(ConfigError):
        gae(np.zeros((2, 1)), np.zeros((3, 1)), np.zeros((2, 1), bool), np.zeros(1), 0.99, 0.95)
    with pytest.raises(ConfigError):
        gae(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros((2, 1), bool), np.zeros(1), 1.5, 0.95)


# -- normalization ----------------------------------------------------------


def test_normalize_examples():
    assert np.allclose(normalize_advantages(np.array([1.0, -1.0])), [1.0, -1.0])
    assert np.all(normalize_advantages(np.full(4, 3.0)) == 0.0)
    assert normalize_advantages(np.array([0.0, 1.0, 2.0])) == pytest.approx(
        [-1.2247, 0.0, 1.2247], abs=1e-4)


@given(hnp.arrays(np.float64, st.integers(2, 50), elements=st.floats(-1e3, 1e3)))
def test_normalize_properties(a):
    out = normalize_advantages(a)
    assert abs(out.mean()) < 1e-9
    if a.std() >= 1e-8:
        assert out.std() == pytest.approx(1.0, abs=1e-9)


def test_dump_batch_csv(tmp_path):
    ac, env = make(n=2)
    b = collect(ac, ac.value_fn, env, 3, Rng(1))
    dump_batch_csv(b, tmp_path / "b.csv")
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert len(rows) == 6
    assert float(rows[1]["reward"]) == b.rewards[0, 1]
