"""Diffusion actor-critic training loop and baseline agents."""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import auction
from .config import TrainerConfig
from .diffusion import (DenoiseTrace, DiffusionActor, NoiseSchedule, entropy, sample_action,
                        softmax)
from .env import AuctionEnv, MarketState, RunningNormalizer, action_to_rho, rho_grid
from .errors import DivergenceError, DomainError
from .nn import Adam, Mlp, load_checkpoint, save_checkpoint, soft_update

log = logging.getLogger(__name__)

MAX_GRAD_NORM = 10.0


class ReplayBuffer:
    """Fixed-capacity ring of transitions; oldest entries are overwritten first."""

    def __init__(self, capacity, obs_size):
        if capacity < 1:
            raise DomainError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_size))
        self.next_obs = np.zeros((capacity, obs_size))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.cursor = 0
        self.size = 0
        self.inserted = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, next_obs, reward):
        i = self.cursor
        self.obs[i] = obs
        self.actions[i] = action
        self.next_obs[i] = next_obs
        self.rewards[i] = reward
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.inserted += 1

    def sample(self, batch_size, rng):
        if self.size < batch_size:
            raise DomainError(f"buffer holds {self.size} transitions, need {batch_size}")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.obs[idx], self.actions[idx], self.next_obs[idx], self.rewards[idx])


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    rewards: np.ndarray

    def __len__(self):
        return self.rewards.size


class TwinCritics:
    """Two Q-networks over ``concat(state, onehot(action))`` plus target copies."""

    def __init__(self, obs_size, action_space, hidden=(64, 64), rng=None, lr=1e-4,
                 activation="relu", nets=None):
        self.obs_size = obs_size
        self.action_space = action_space
        sizes = [obs_size + action_space, *hidden, 1]
        if nets is None:
            nets = [Mlp(sizes, activation, rng) for _ in range(2)]
        self.online = list(nets)
        self.target = [n.copy() for n in self.online]
        self.optims = [Adam(n.params, lr, max_grad_norm=MAX_GRAD_NORM) for n in self.online]

    def inputs(self, obs, actions):
        return np.concatenate([obs, np.eye(self.action_space)[actions]], axis=1)

    def q_all(self, obs, target=False):
        """``min_i Q_i(s, a)`` for every action, shape ``(B, |A|)``."""
        nets = self.target if target else self.online
        qs = [n.forward_onehot_all(obs, self.action_space, np.float32)[..., 0] for n in nets]
        return np.minimum(qs[0], qs[1]).astype(np.float64)

    def soft_update(self, rate):
        for t, o in zip(self.target, self.online):
            soft_update(t, o, rate)


def bellman_target(batch: Batch, critics: TwinCritics, target_actor: DiffusionActor, gamma,
                   rng, reward_scale=1.0):
    """``r + gamma * sum_a pi'(a|s') * min_i Q'_i(s', a)`` per transition."""
    r = batch.rewards / reward_scale
    if gamma == 0:
        return r.copy()
    p_next = softmax(target_actor.denoise(batch.next_obs, rng))
    q_next = critics.q_all(batch.next_obs, target=True)
    return r + gamma * np.sum(p_next * q_next, axis=1)


def critic_update(critics: TwinCritics, batch: Batch, y):
    """One Adam step on the mean squared Bellman error of each critic; returns pre-step losses."""
    x = critics.inputs(batch.obs, batch.actions)
    losses = []
    for net, opt in zip(critics.online, critics.optims):
        q, tape = net.record(x)
        err = q[:, 0] - y
        losses.append(float(np.mean(err * err)))
        grads, _ = net.backward(tape, (2.0 / err.size) * err[:, None])
        opt.step(grads)
    return losses


def actor_objective_grad(p, q, temperature):
    """Objective ``sum_a p_a (-q_a) - temperature * H(p)`` per row and its gradient in logits."""
    logp = np.log(np.maximum(p, 1e-300))
    h = -np.sum(p * logp, axis=1)
    obj = np.sum(p * -q, axis=1) - temperature * h
    g_p = -q + temperature * (logp + 1.0)
    g_x = p * (g_p - np.sum(p * g_p, axis=1, keepdims=True))
    return obj, g_x, h


def actor_update(actor: DiffusionActor, optimizer: Adam, critics: TwinCritics, obs,
                 temperature, rng):
    """One gradient step on the entropy-regularised expected negative Q."""
    trace = DenoiseTrace()
    x0 = actor.denoise(obs, rng, trace)
    p = softmax(x0)
    q = critics.q_all(obs)
    obj, g_x, h = actor_objective_grad(p, q, temperature)
    grads = actor.backward(trace, g_x / obs.shape[0])
    optimizer.step(grads)
    return float(np.mean(obj)), float(np.mean(h))


# ---------------------------------------------------------------------------
# agents


class DmsbAgent:
    """Diffusion actor with twin critics, trained as in the DMSB loop."""

    name = "diffusion"

    def __init__(self, obs_size, action_space, config: TrainerConfig, rng=None):
        rng = np.random.default_rng(config.seed) if rng is None else rng
        self.config = config
        self.action_space = action_space
        schedule = NoiseSchedule.linear(config.diffusion_steps, config.eta_min, config.eta_max)
        self.actor = DiffusionActor(obs_size, action_space, schedule, config.hidden, rng,
                                    config.activation)
        self.target_actor = self.actor.copy()
        self.actor_opt = Adam(self.actor.params, config.learning_rate, max_grad_norm=MAX_GRAD_NORM)
        self.critics = TwinCritics(obs_size, action_space, config.hidden, rng,
                                   config.critic_learning_rate, config.activation)
        self.normalizer = RunningNormalizer(obs_size)
        self.reward_scale = config.reward_scale if config.reward_scale > 0 else 0.0

    def policy(self, state: MarketState, rng):
        obs = self.normalizer(state.observation())
        return self.actor.distribution(obs, rng)[0]

    def act(self, state: MarketState, rng, explore=False):
        p = self.policy(state, rng)
        return sample_action(p, rng, "stochastic" if explore else "greedy")

    def update(self, batch: Batch, rng):
        cfg = self.config
        obs = self.normalizer(batch.obs)
        nxt = self.normalizer(batch.next_obs)
        norm_batch = Batch(obs, batch.actions, nxt, batch.rewards)
        actor_obj, h = actor_update(self.actor, self.actor_opt, self.critics, obs,
                                    cfg.temperature, rng)
        y = bellman_target(norm_batch, self.critics, self.target_actor, cfg.gamma, rng,
                           self.reward_scale)
        losses = critic_update(self.critics, norm_batch, y)
        soft_update(self.target_actor.denoiser, self.actor.denoiser, cfg.soft_update)
        self.critics.soft_update(cfg.soft_update)
        if not (np.isfinite(actor_obj) and all(np.isfinite(losses))):
            raise DivergenceError(f"non-finite loss: actor={actor_obj}, critics={losses}")
        return actor_obj, losses, h

    def save(self, path):
        nets = {"actor": self.actor.denoiser, "target_actor": self.target_actor.denoiser,
                "critic1": self.critics.online[0], "critic2": self.critics.online[1],
                "target_critic1": self.critics.target[0], "target_critic2": self.critics.target[1]}
        arrays = {"norm_mean": self.normalizer.mean, "norm_m2": self.normalizer.m2,
                  "norm_count": np.array([self.normalizer.count], float),
                  "reward_scale": np.array([self.reward_scale]),
                  "eta": self.actor.schedule.eta}
        return save_checkpoint(path, nets, arrays)

    @classmethod
    def load(cls, path, config: TrainerConfig):
        nets, arrays = load_checkpoint(path)
        actor_net = nets["actor"]
        a = actor_net.sizes[-1]
        obs_size = actor_net.sizes[0] - a - 8
        agent = cls(obs_size, a, config)
        schedule = NoiseSchedule(arrays["eta"])
        agent.actor = DiffusionActor(obs_size, a, schedule, denoiser=actor_net)
        agent.target_actor = DiffusionActor(obs_size, a, schedule, denoiser=nets["target_actor"])
        agent.critics = TwinCritics(obs_size, a, nets=[nets["critic1"], nets["critic2"]])
        agent.critics.target = [nets["target_critic1"], nets["target_critic2"]]
        agent.normalizer.load_state_dict({"count": arrays["norm_count"][0],
                                          "mean": arrays["norm_mean"], "m2": arrays["norm_m2"]})
        agent.normalizer.frozen = True
        agent.reward_scale = float(arrays["reward_scale"][0])
        return agent


class RandomAgent:
    name = "random"

    def __init__(self, action_space):
        self.action_space = action_space

    def act(self, state, rng, explore=False):
        return int(rng.integers(self.action_space))


class GreedyAgent:
    """One-step lookahead that treats observed bids as the providers' values."""

    name = "greedy"

    def __init__(self, action_space):
        self.action_space = action_space
        self.rhos = rho_grid(action_space)

    def act(self, state: MarketState, rng=None, explore=False):
        bids = state.live_bids()
        best, best_value = 0, -np.inf
        for a, rho in enumerate(self.rhos):
            winner = auction.msb_allocate(bids, rho).winner
            if bids[winner] > best_value:
                best, best_value = a, bids[winner]
        return best


class PpoAgent:
    """Clipped-surrogate PPO with GAE over the same discrete action set."""

    name = "ppo"

    def __init__(self, obs_size, action_space, hidden=(64, 64), rng=None, lr=3e-4, clip=0.2,
                 gae_lambda=0.95, gamma=0.95, epochs=10, minibatch=64, rollout=2048,
                 entropy_coef=0.0):
        rng = np.random.default_rng(0) if rng is None else rng
        self.action_space = action_space
        self.policy_net = Mlp([obs_size, *hidden, action_space], "tanh", rng)
        self.policy_net.params[-2] *= 0.01  # near-uniform initial policy
        self.value_net = Mlp([obs_size, *hidden, 1], "tanh", rng)
        self.policy_opt = Adam(self.policy_net.params, lr, max_grad_norm=0.5)
        self.value_opt = Adam(self.value_net.params, lr, max_grad_norm=0.5)
        self.clip = clip
        self.gae_lambda = gae_lambda
        self.gamma = gamma
        self.epochs = epochs
        self.minibatch = minibatch
        self.rollout = rollout
        self.entropy_coef = entropy_coef
        self.normalizer = RunningNormalizer(obs_size)
        self.reward_scale = 0.0

    def save(self, path):
        nets = {"policy": self.policy_net, "value": self.value_net}
        arrays = {"norm_mean": self.normalizer.mean, "norm_m2": self.normalizer.m2,
                  "norm_count": np.array([self.normalizer.count], float),
                  "reward_scale": np.array([self.reward_scale])}
        return save_checkpoint(path, nets, arrays)

    @classmethod
    def load(cls, path):
        nets, arrays = load_checkpoint(path)
        policy, value = nets["policy"], nets["value"]
        agent = cls(policy.sizes[0], policy.sizes[-1], hidden=tuple(policy.sizes[1:-1]))
        agent.policy_net, agent.value_net = policy, value
        agent.policy_opt = Adam(policy.params, agent.policy_opt.lr, max_grad_norm=0.5)
        agent.value_opt = Adam(value.params, agent.value_opt.lr, max_grad_norm=0.5)
        agent.normalizer.load_state_dict({"count": arrays["norm_count"][0],
                                          "mean": arrays["norm_mean"], "m2": arrays["norm_m2"]})
        agent.normalizer.frozen = True
        agent.reward_scale = float(arrays["reward_scale"][0])
        return agent

    def probs(self, obs):
        return softmax(self.policy_net.forward(obs))

    def act(self, state: MarketState, rng, explore=False):
        p = self.probs(self.normalizer(state.observation()))
        return sample_action(p, rng, "stochastic" if explore else "greedy")

    def update(self, obs, actions, old_logp, advantages, returns, rng):
        """PPO epochs over one rollout; returns the mean clipped surrogate loss."""
        n = obs.shape[0]
        adv = advantages
        if n > 1 and adv.std() > 0:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        losses = []
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.minibatch):
                idx = order[start:start + self.minibatch]
                m = idx.size
                logits, tape = self.policy_net.record(obs[idx])
                p = softmax(logits)
                a = actions[idx]
                logp = np.log(p[np.arange(m), a])
                ratio = np.exp(logp - old_logp[idx])
                A = adv[idx]
                unclipped = ratio * A
                clipped = np.clip(ratio, 1 - self.clip, 1 + self.clip) * A
                surrogate = np.minimum(unclipped, clipped)
                h = entropy(p)
                losses.append(float(-np.mean(surrogate) - self.entropy_coef * np.mean(h)))
                # d(-surrogate)/dlogp is -ratio*A where the unclipped branch is active
                active = unclipped <= clipped
                g_logp = np.where(active, -ratio * A, 0.0) / m
                onehot = np.eye(self.action_space)[a]
                g_logits = g_logp[:, None] * (onehot - p)
                if self.entropy_coef:
                    logp_all = np.log(np.maximum(p, 1e-300))
                    g_h = -p * (logp_all - np.sum(p * logp_all, axis=1, keepdims=True))
                    g_logits -= self.entropy_coef * g_h / m
                grads, _ = self.policy_net.backward(tape, g_logits)
                self.policy_opt.step(grads)
                v, vtape = self.value_net.record(obs[idx])
                err = v[:, 0] - returns[idx]
                vgrads, _ = self.value_net.backward(vtape, (2.0 / m) * err[:, None])
                self.value_opt.step(vgrads)
        return float(np.mean(losses)) if losses else 0.0


# ---------------------------------------------------------------------------
# training loops


@dataclass
class StepRecord:
    step: int
    reward: float
    actor_loss: float
    critic1_loss: float
    critic2_loss: float
    entropy: float
    rho: float


@dataclass
class TrainResult:
    agent: object
    records: List[StepRecord] = field(default_factory=list)

    @property
    def rewards(self):
        return np.array([r.reward for r in self.records])


LOG_FIELDS = ["step", "reward", "actor_loss", "critic1_loss", "critic2_loss", "entropy", "rho"]


LOG_SCHEMA = "dmsb-trainlog v1"


def write_step_log(path, records):
    with Path(path).open("w", newline="") as fh:
        fh.write(f"# {LOG_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in records:
            w.writerow([r.step, repr(float(r.reward)), repr(r.actor_loss), repr(r.critic1_loss),
                        repr(r.critic2_loss), repr(r.entropy), repr(r.rho)])


def train(env: AuctionEnv, config: TrainerConfig, agent: Optional[DmsbAgent] = None,
          checkpoint_dir=None, progress=None) -> TrainResult:
    """Episodes of interaction with one update per step once the buffer is warm."""
    rng = np.random.default_rng(config.seed)
    obs_size = env.observation_size
    a_size = env.action_space
    if agent is None:
        agent = DmsbAgent(obs_size, a_size, config, np.random.default_rng([config.seed, 1]))
    buffer = ReplayBuffer(config.buffer_capacity, obs_size)
    start = max(config.batch_size, config.warmup)
    result = TrainResult(agent)
    step = 0
    nan = float("nan")
    for _ in range(config.episodes):
        state = env.reset()
        obs = state.observation()
        for _ in range(env.config.episode_length):
            agent.normalizer.update(obs)
            p = agent.actor.distribution(agent.normalizer(obs), rng)[0]
            action = sample_action(p, rng, "stochastic")
            rho = action_to_rho(action, a_size)
            next_state, reward, _, _ = env.step(action)
            next_obs = next_state.observation()
            buffer.add(obs, action, next_obs, reward)
            step += 1
            actor_loss, losses, h = nan, (nan, nan), float(entropy(p))
            if len(buffer) >= start:
                if agent.reward_scale <= 0:
                    agent.reward_scale = float(np.std(buffer.rewards[:len(buffer)])) or 1.0
                actor_loss, losses, _ = agent.update(buffer.sample(config.batch_size, rng), rng)
            result.records.append(StepRecord(step, float(reward), actor_loss, losses[0],
                                             losses[1], h, rho))
            if checkpoint_dir and config.checkpoint_every and step % config.checkpoint_every == 0:
                agent.save(Path(checkpoint_dir) / f"dmsb_step{step}.ckpt")
            if progress is not None and step % config.log_every == 0:
                progress(step, result)
            obs = next_obs
    if checkpoint_dir:
        agent.save(Path(checkpoint_dir) / "dmsb_final.ckpt")
    agent.normalizer.frozen = True
    return result


def train_ppo(env: AuctionEnv, total_steps, seed=0, agent: Optional[PpoAgent] = None,
              progress=None, log_every=500) -> TrainResult:
    rng = np.random.default_rng([seed, 2])
    if agent is None:
        agent = PpoAgent(env.observation_size, env.action_space,
                         rng=np.random.default_rng([seed, 3]))
    result = TrainResult(agent)
    step = 0
    state = env.reset()
    t_in_episode = 0
    nan = float("nan")
    while step < total_steps:
        n = min(agent.rollout, total_steps - step)
        raw_obs, acts, logps, rews, values, ends = [], [], [], [], [], []
        for _ in range(n):
            obs_raw = state.observation()
            agent.normalizer.update(obs_raw)
            obs = agent.normalizer(obs_raw)
            p = agent.probs(obs)
            a = sample_action(p, rng, "stochastic")
            state, r, _, _ = env.step(a)
            t_in_episode += 1
            end = t_in_episode >= env.config.episode_length
            raw_obs.append(obs)
            acts.append(a)
            logps.append(np.log(p[a]))
            rews.append(r)
            values.append(agent.value_net.forward(obs)[0])
            ends.append(end)
            step += 1
            result.records.append(StepRecord(step, float(r), nan, nan, nan,
                                             float(entropy(p)), action_to_rho(a, env.action_space)))
            if progress is not None and step % log_every == 0:
                progress(step, result)
            if end:
                state = env.reset()
                t_in_episode = 0
        if agent.reward_scale <= 0:
            agent.reward_scale = float(np.std(rews)) or 1.0
        r = np.array(rews) / agent.reward_scale
        v = np.array(values)
        last_v = agent.value_net.forward(agent.normalizer(state.observation()))[0]
        adv = np.zeros(n)
        gae = 0.0
        for t in range(n - 1, -1, -1):
            # episode ends are treated as terminal
            if ends[t]:
                nv, gae = 0.0, 0.0
            else:
                nv = last_v if t == n - 1 else v[t + 1]
            delta = r[t] + agent.gamma * nv - v[t]
            gae = delta + agent.gamma * agent.gae_lambda * gae
            adv[t] = gae
        agent.update(np.array(raw_obs), np.array(acts), np.array(logps), adv, adv + v, rng)
    agent.normalizer.frozen = True
    return result
