import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmsb import auction
from dmsb.config import ScenarioConfig, TrainerConfig
from dmsb.diffusion import DiffusionActor, NoiseSchedule, entropy, softmax
from dmsb.env import AuctionEnv, rho_grid
from dmsb.errors import DomainError
from dmsb.nn import Adam, Mlp
from dmsb.rl import (LOG_FIELDS, Batch, DmsbAgent, GreedyAgent, PpoAgent, RandomAgent,
                     ReplayBuffer, TwinCritics, actor_objective_grad, actor_update,
                     bellman_target, critic_update, train, train_ppo, write_step_log)

SMALL = ScenarioConfig(episode_length=20)
FAST = TrainerConfig(episodes=4, batch_size=16, warmup=32, hidden=(16, 16), log_every=10)


def constant_critics(obs_size, values):
    """Critics whose Q(s, a) is ``values[a]`` for every state."""
    a = len(values)
    w = np.zeros((obs_size + a, 1))
    w[obs_size:, 0] = values
    nets = [Mlp([obs_size + a, 1], params=[w.copy(), np.zeros(1)]) for _ in range(2)]
    return TwinCritics(obs_size, a, nets=nets)


def small_actor(obs_size=3, a=2, seed=0):
    return DiffusionActor(obs_size, a, NoiseSchedule.linear(3), hidden=(8,),
                          rng=np.random.default_rng(seed))


class TestReplayBuffer:
    def test_fifo_overwrite(self):
        buf = ReplayBuffer(5, 1)
        for i in range(8):
            buf.add([i], i % 3, [i + 1], float(i))
        assert len(buf) == 5 and buf.inserted == 8
        assert sorted(buf.rewards.tolist()) == [3.0, 4.0, 5.0, 6.0, 7.0]

    def test_sampling_gated_on_size(self):
        buf = ReplayBuffer(10, 2)
        for i in range(3):
            buf.add([i, i], 0, [i, i], 1.0)
        with pytest.raises(DomainError):
            buf.sample(4, np.random.default_rng(0))
        assert len(buf.sample(3, np.random.default_rng(0))) == 3

    @settings(max_examples=50)
    @given(st.integers(1, 20), st.integers(0, 60))
    def test_only_live_entries_sampled(self, cap, extra):
        buf = ReplayBuffer(cap, 1)
        n = cap + extra
        for i in range(n):
            buf.add([i], 0, [i], float(i))
        b = buf.sample(min(cap, 8), np.random.default_rng(extra))
        assert np.all(b.rewards >= n - cap) and np.all(b.obs[:, 0] == b.rewards)

    def test_capacity_validation(self):
        with pytest.raises(DomainError):
            ReplayBuffer(0, 3)


class TestBellman:
    def batch(self, rewards):
        n = len(rewards)
        return Batch(np.zeros((n, 3)), np.zeros(n, dtype=int), np.ones((n, 3)),
                     np.array(rewards, float))

    def test_hand_batch(self):
        y = bellman_target(self.batch([1.0, 2.0]), constant_critics(3, [3.0, 3.0]),
                           small_actor(), 0.5, np.random.default_rng(0))
        np.testing.assert_allclose(y, [2.5, 3.5], rtol=1e-12)

    def test_gamma_zero_returns_reward(self):
        y = bellman_target(self.batch([1.5, -2.0]), constant_critics(3, [9.0, -9.0]),
                           small_actor(), 0.0, np.random.default_rng(0))
        assert y.tolist() == [1.5, -2.0]

    def test_expectation_over_target_policy(self):
        actor = small_actor()
        rng = np.random.default_rng(3)
        y = bellman_target(self.batch([0.0]), constant_critics(3, [2.0, -1.0]), actor, 1 - 1e-9,
                           np.random.default_rng(3))
        p = softmax(actor.denoise(np.ones((1, 3)), rng))[0]
        assert y[0] == pytest.approx(p @ [2.0, -1.0], rel=1e-6)

    def test_min_of_identical_critics(self):
        critics = constant_critics(3, [1.0, 4.0])
        critics.target[1] = critics.target[0].copy()
        q = critics.q_all(np.zeros((2, 3)), target=True)
        np.testing.assert_array_equal(q, [[1.0, 4.0], [1.0, 4.0]])

    def test_min_of_two_critics(self):
        critics = constant_critics(3, [1.0, 4.0])
        critics.online[1].params[0][3:, 0] = [2.0, 0.5]
        np.testing.assert_array_equal(critics.q_all(np.zeros((1, 3))), [[1.0, 0.5]])


class TestCriticUpdate:
    def test_zero_error_leaves_params(self):
        critics = constant_critics(3, [3.0, 3.0])
        before = [n.flat() for n in critics.online]
        batch = Batch(np.ones((4, 3)), np.array([0, 1, 0, 1]), np.ones((4, 3)), np.zeros(4))
        losses = critic_update(critics, batch, np.full(4, 3.0))
        assert losses == [0.0, 0.0]
        for b, n in zip(before, critics.online):
            np.testing.assert_array_equal(b, n.flat())

    def test_single_transition_linear_descent(self):
        critics = TwinCritics(3, 2, hidden=(), rng=np.random.default_rng(0), lr=1e-3)
        batch = Batch(np.array([[1.0, -0.5, 2.0]]), np.array([1]), np.zeros((1, 3)),
                      np.zeros(1))
        y = np.array([4.0])
        first = critic_update(critics, batch, y)
        second = critic_update(critics, batch, y)
        assert all(b < a for a, b in zip(first, second))

    def test_loss_non_increasing_on_fixed_batch(self):
        rng = np.random.default_rng(1)
        critics = TwinCritics(6, 4, hidden=(16, 16), rng=rng, lr=1e-4)
        batch = Batch(rng.normal(size=(32, 6)), rng.integers(0, 4, 32), rng.normal(size=(32, 6)),
                      rng.normal(size=32))
        y = rng.normal(size=32)
        history = np.array([critic_update(critics, batch, y) for _ in range(100)])
        assert np.all(np.diff(history, axis=0) <= 1e-12)


class TestActorUpdate:
    def test_objective_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 5))
        q = rng.normal(size=(3, 5))
        _, g, _ = actor_objective_grad(softmax(x), q, 0.3)
        h = 1e-6
        for i in range(3):
            for j in range(5):
                up, down = x.copy(), x.copy()
                up[i, j] += h
                down[i, j] -= h
                num = (actor_objective_grad(softmax(up), q, 0.3)[0][i]
                       - actor_objective_grad(softmax(down), q, 0.3)[0][i]) / (2 * h)
                assert g[i, j] == pytest.approx(num, rel=1e-6, abs=1e-9)

    def test_two_action_sign(self):
        # with Q = [1, 0] and no entropy term, descending the objective favours action 0
        x = np.array([[0.3, -0.2]])
        _, g, _ = actor_objective_grad(softmax(x), np.array([[1.0, 0.0]]), 0.0)
        assert g[0, 0] < 0 < g[0, 1]

    def mean_prob(self, actor, obs, a):
        return softmax(actor.denoise(obs, np.random.default_rng(42)))[:, a].mean()

    def test_update_moves_towards_better_action(self):
        actor = small_actor(seed=1)
        opt = Adam(actor.params, 1e-2)
        critics = constant_critics(3, [1.0, 0.0])
        obs = np.random.default_rng(2).normal(size=(16, 3))
        before = self.mean_prob(actor, obs, 0)
        for i in range(5):
            actor_update(actor, opt, critics, obs, 0.0, np.random.default_rng(i))
        assert self.mean_prob(actor, obs, 0) > before

    def test_constant_critic_raises_entropy(self):
        actor = small_actor(a=4, seed=3)
        actor.params[-1][:] = [2.0, -1.0, 0.5, -2.0]  # start far from uniform
        opt = Adam(actor.params, 1e-2)
        critics = constant_critics(3, [1.0] * 4)
        obs = np.random.default_rng(4).normal(size=(16, 3))

        def h():
            return entropy(softmax(actor.denoise(obs, np.random.default_rng(9)))).mean()

        before = h()
        for i in range(5):
            actor_update(actor, opt, critics, obs, 0.5, np.random.default_rng(i))
        assert h() > before


class TestTrain:
    def test_single_step_below_batch_makes_no_update(self):
        env = AuctionEnv(ScenarioConfig(episode_length=1), seed=0)
        cfg = TrainerConfig(episodes=1, hidden=(8,))
        agent = DmsbAgent(env.observation_size, env.action_space, cfg)
        before = agent.actor.denoiser.flat()
        calls = []
        step = env.step
        env.step = lambda a: calls.append(a) or step(a)
        res = train(env, cfg, agent)
        assert len(res.records) == 1 and len(calls) == 1
        assert math.isnan(res.records[0].actor_loss)
        np.testing.assert_array_equal(agent.actor.denoiser.flat(), before)

    def test_updates_start_after_warmup(self):
        res = train(AuctionEnv(SMALL, seed=1), FAST)
        losses = np.array([r.critic1_loss for r in res.records])
        assert np.all(np.isnan(losses[:FAST.warmup - 1]))
        assert np.all(np.isfinite(losses[FAST.warmup - 1:]))
        assert len(res.records) == FAST.episodes * SMALL.episode_length

    def test_same_seed_same_curve(self, tmp_path):
        a = train(AuctionEnv(SMALL, seed=2), FAST.replace(seed=2))
        b = train(AuctionEnv(SMALL, seed=2), FAST.replace(seed=2))
        write_step_log(tmp_path / "a.csv", a.records)
        write_step_log(tmp_path / "b.csv", b.records)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_step_log_layout(self, tmp_path):
        res = train(AuctionEnv(SMALL, seed=3), FAST.replace(episodes=2))
        path = tmp_path / "log.csv"
        write_step_log(path, res.records)
        lines = path.read_text().splitlines()
        assert lines[0] == "# dmsb-trainlog v1"
        assert lines[1].split(",") == LOG_FIELDS
        assert len(lines) == 2 + 40
        rhos = {float(line.split(",")[-1]) for line in lines[2:]}
        assert rhos <= set(rho_grid(20).tolist())

    def test_checkpoint_round_trip(self, tmp_path):
        env = AuctionEnv(SMALL, seed=4)
        res = train(env, FAST, checkpoint_dir=tmp_path)
        loaded = DmsbAgent.load(tmp_path / "dmsb_final.ckpt", FAST)
        state = env.reset()
        for i in range(10):
            p1 = res.agent.policy(state, np.random.default_rng(i))
            p2 = loaded.policy(state, np.random.default_rng(i))
            np.testing.assert_array_equal(p1, p2)
            state = env.step(i % 20)[0]

    def test_periodic_checkpoints(self, tmp_path):
        train(AuctionEnv(SMALL, seed=5), FAST.replace(checkpoint_every=40), checkpoint_dir=tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["dmsb_final.ckpt", "dmsb_step40.ckpt", "dmsb_step80.ckpt"]


def market_state(bids):
    env = AuctionEnv(ScenarioConfig(num_bs=len(bids) - 1), seed=0)
    s = env.reset()
    padded = np.zeros_like(s.bids)
    padded[:len(bids)] = bids
    return dataclasses.replace(s, bids=padded)


def greedy_oracle(bids, rhos):
    values = [bids[auction.msb_allocate(bids, r).winner] for r in rhos]
    return int(np.argmax(values))


class TestBaselines:
    def test_random_histogram(self):
        agent = RandomAgent(20)
        rng = np.random.default_rng(0)
        n = 100_000
        counts = np.bincount([agent.act(None, rng) for _ in range(n)], minlength=20)
        sigma = math.sqrt(n * 0.05 * 0.95)
        assert np.all(np.abs(counts - n / 20) < 3 * sigma)

    def test_greedy_when_uav_dominates(self):
        bids = np.array([9.0, 5.0, 3.0, 1.0])
        a = GreedyAgent(20).act(market_state(bids))
        assert auction.msb_allocate(bids, rho_grid(20)[a]).winner == 0

    def test_greedy_prefers_top_station_when_it_clears(self):
        bids = np.array([2.0, 5.0, 3.0, 1.0])
        a = GreedyAgent(20).act(market_state(bids))
        assert a == 0 and auction.msb_allocate(bids, 1.0).winner == 1

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.0, 100.0), min_size=4, max_size=4))
    def test_greedy_matches_enumeration(self, b):
        bids = np.array(b)
        assert GreedyAgent(20).act(market_state(bids)) == greedy_oracle(bids, rho_grid(20))

    def test_ppo_zero_advantage_keeps_policy(self):
        rng = np.random.default_rng(0)
        agent = PpoAgent(5, 3, hidden=(8,), rng=rng, minibatch=4, epochs=2)
        before = agent.policy_net.flat()
        obs = rng.normal(size=(8, 5))
        p = agent.probs(obs)
        acts = rng.integers(0, 3, 8)
        logp = np.log(p[np.arange(8), acts])
        agent.update(obs, acts, logp, np.zeros(8), rng.normal(size=8), rng)
        np.testing.assert_array_equal(agent.policy_net.flat(), before)

    def test_ppo_positive_advantage_raises_probability(self):
        rng = np.random.default_rng(1)
        agent = PpoAgent(4, 3, hidden=(8,), rng=rng, minibatch=16, epochs=3, lr=1e-2)
        obs = rng.normal(size=(16, 4))
        acts = np.zeros(16, dtype=int)
        before = agent.probs(obs)[:, 0]
        # a constant advantage is left unnormalised, so every sample pushes towards action 0
        agent.update(obs, acts, np.log(before), np.ones(16), np.zeros(16), rng)
        assert agent.probs(obs)[:, 0].mean() > before.mean() + 0.01

    def test_ppo_training_and_checkpoint(self, tmp_path):
        env = AuctionEnv(SMALL, seed=6)
        res = train_ppo(env, 300, seed=6, agent=PpoAgent(env.observation_size, 20, rollout=100,
                                                         rng=np.random.default_rng(0)))
        assert len(res.records) == 300
        res.agent.save(tmp_path / "ppo.ckpt")
        loaded = PpoAgent.load(tmp_path / "ppo.ckpt")
        s = env.reset()
        for i in range(5):
            assert loaded.act(s, np.random.default_rng(i)) == res.agent.act(s, np.random.default_rng(i))
            s = env.step(i)[0]
