"""Auction environment: one VT task per round, priced by an MSB auction.

Each round the simulator redraws provider resources and the task, computes
every provider's latency and sampled accuracy for that task, appends them
to rolling windows, and derives valuations from the windows. Ground
stations bid their valuations; the UAV bids a contracted payment fitted to
its past (v_max, v_0) pairs.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import auction
from .auction import SurplusWeights
from .config import MB_BITS, MHZ, ScenarioConfig
from .errors import DomainError
from .market import (ResourceProvider, ValuationParams, VtTask, latency_array,
                     sample_accuracy, valuation_array)

N_SLOT_FEATURES = 6  # up bw, down bw, gpu, cpu, mean latency, mean accuracy


def action_to_rho(action, action_space):
    """``10 ** (a / |A|)``; maps action indices onto [1, 10)."""
    if action_space < 1:
        raise DomainError("action space must be non-empty")
    if isinstance(action, (bool, np.bool_)) or int(action) != action:
        raise DomainError(f"action must be an integer, got {action!r}")
    if not 0 <= action < action_space:
        raise DomainError(f"action {action} outside [0, {action_space})")
    return 10.0 ** (int(action) / action_space)


def rho_grid(action_space):
    # scalar pow keeps the grid bit-identical to action_to_rho
    return np.array([10.0 ** (a / action_space) for a in range(action_space)])


# ---------------------------------------------------------------------------
# state encoding


@dataclass(frozen=True)
class MarketFeatures:
    """Raw market conditions, one slot per provider (UAV first), zero padded."""

    up_bandwidth_mhz: np.ndarray
    down_bandwidth_mhz: np.ndarray
    gpu_units: np.ndarray
    cpu_units: np.ndarray
    mean_latency: np.ndarray
    mean_accuracy: np.ndarray
    task_size_mb: float

    _FIELDS = ("up_bandwidth_mhz", "down_bandwidth_mhz", "gpu_units", "cpu_units",
               "mean_latency", "mean_accuracy")

    def encode(self):
        parts = [getattr(self, name) for name in self._FIELDS]
        return np.concatenate(parts + [np.array([self.task_size_mb])]).astype(np.float64)

    @classmethod
    def decode(cls, vector, max_providers):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != N_SLOT_FEATURES * max_providers + 1:
            raise DomainError("feature vector has the wrong length")
        blocks = vector[:-1].reshape(N_SLOT_FEATURES, max_providers)
        return cls(*[blocks[i].copy() for i in range(N_SLOT_FEATURES)],
                   task_size_mb=float(vector[-1]))

    def __eq__(self, other):
        return isinstance(other, MarketFeatures) and np.array_equal(self.encode(), other.encode())


@dataclass(frozen=True, eq=False)
class MarketState:
    features: MarketFeatures
    bids: np.ndarray
    mask: np.ndarray

    @property
    def market_features(self):
        return self.features.encode()

    @property
    def count(self):
        return int(self.mask.sum())

    def live_bids(self):
        return self.bids[:self.count]

    def observation(self):
        """Network input: log-scaled features with BS slots sorted by bid.

        Sorting makes slot 1 the strongest ground station, so the threshold
        structure of the auction lines up with fixed input positions.
        """
        f = self.features
        n = self.count
        p = self.bids.size
        bs_order = 1 + np.argsort(-self.bids[1:n], kind="stable")
        order = np.concatenate(([0], bs_order))
        slots = np.zeros((p, N_SLOT_FEATURES + 2))
        cols = np.stack([
            np.log(f.up_bandwidth_mhz[order]),
            np.log(f.down_bandwidth_mhz[order]),
            np.log(f.gpu_units[order]),
            np.log(f.cpu_units[order]),
            np.log(f.mean_latency[order]),
            -np.log1p(-f.mean_accuracy[order]),
            np.log(np.maximum(self.bids[order], 1e-12)),
            np.ones(n),
        ], axis=1)
        slots[:n] = cols
        bids = self.bids[:n]
        top = bids[1:].max()
        rest = np.sort(bids[1:])
        runner = max(rest[-2] if rest.size > 1 else 0.0, bids[0])
        # log10 of the rho that makes the strongest station's bid exactly critical
        crossing = np.log10(max(top, 1e-12) / max(runner, 1e-12))
        extra = np.array([np.log(f.task_size_mb), crossing,
                          np.log10(max(bids[0], 1e-12) / max(top, 1e-12))])
        return np.concatenate([slots.ravel(), extra])


def observation_size(config: ScenarioConfig):
    return config.max_providers * (N_SLOT_FEATURES + 2) + 3


@dataclass(frozen=True, eq=False)
class Transition:
    state: np.ndarray
    action: int
    next_state: np.ndarray
    reward: float


class RunningNormalizer:
    """Welford running mean / variance; ``frozen`` stops updates."""

    def __init__(self, size, clip=10.0):
        self.count = 0
        self.mean = np.zeros(size)
        self.m2 = np.zeros(size)
        self.clip = clip
        self.frozen = False

    def update(self, x):
        if self.frozen:
            return
        x = np.atleast_2d(x)
        for row in x:
            self.count += 1
            delta = row - self.mean
            self.mean = self.mean + delta / self.count
            self.m2 = self.m2 + delta * (row - self.mean)

    @property
    def std(self):
        if self.count < 2:
            return np.ones_like(self.mean)
        return np.sqrt(np.maximum(self.m2 / (self.count - 1), 1e-8))

    def __call__(self, x):
        return np.clip((x - self.mean) / self.std, -self.clip, self.clip)

    def state_dict(self):
        return {"count": self.count, "mean": self.mean.copy(), "m2": self.m2.copy()}

    def load_state_dict(self, d):
        self.count = int(d["count"])
        self.mean = np.array(d["mean"], dtype=np.float64)
        self.m2 = np.array(d["m2"], dtype=np.float64)


# ---------------------------------------------------------------------------
# round generation


@dataclass(frozen=True, eq=False)
class Round:
    up_bw: np.ndarray  # Hz
    down_bw: np.ndarray
    gpu: np.ndarray  # bit-ops / s
    cpu: np.ndarray
    provider_power: np.ndarray
    user_power: float
    task_bits: float
    gains: np.ndarray
    accuracy_mean: np.ndarray
    latency: np.ndarray  # this round's latency per provider, s
    accuracy: np.ndarray  # this round's sampled accuracy per provider
    valuations: np.ndarray
    bids: np.ndarray
    features: MarketFeatures
    noise_power: float

    @property
    def num_providers(self):
        return self.bids.size

    def providers(self):
        return [ResourceProvider(i, self.up_bw[i], self.down_bw[i], self.gpu[i], self.cpu[i],
                                 self.provider_power[i], self.noise_power, self.accuracy_mean[i])
                for i in range(self.num_providers)]

    def task(self, pixel_count=1024):
        gains = {i: float(g) for i, g in enumerate(self.gains)}
        return VtTask(self.task_bits, pixel_count, self.user_power, self.noise_power, gains)


class MarketSimulator:
    """Stateful round generator holding the rolling histories of one market."""

    STREAMS = ("profile", "resources", "task", "accuracy")

    def __init__(self, config: ScenarioConfig, rng: np.random.Generator):
        self.config = config
        self.params = ValuationParams(config.omega1, config.omega2, config.beta,
                                      config.history_window)
        self.rng = dict(zip(self.STREAMS, rng.spawn(len(self.STREAMS))))
        p = config.num_providers
        c = config
        prof = self.rng["profile"]
        self.accuracy_mean = prof.uniform(*c.accuracy_mean_range, size=p)
        self.gains = prof.uniform(*c.channel_gain_range, size=p)
        self.latency_hist = []
        self.accuracy_hist = []
        self.vmax_hist = []
        self.v0_hist = []
        self._sample_and_record()  # bootstrap round
        v = self._current_valuations()
        self._record_bid_history(v)

    def _sample_and_record(self):
        c = self.config
        p = c.num_providers
        res = self.rng["resources"]
        up = res.uniform(*c.bandwidth_mhz, size=p) * MHZ
        down = res.uniform(*c.bandwidth_mhz, size=p) * MHZ
        gpu = res.uniform(*c.compute_units, size=p) * c.compute_unit_hz
        cpu = res.uniform(*c.compute_units, size=p) * c.compute_unit_hz
        task = self.rng["task"]
        bits = task.uniform(*c.task_size_mb) * MB_BITS
        user_power = task.uniform(*c.power_range)
        provider_power = task.uniform(*c.power_range, size=p)
        acc = sample_accuracy(self.rng["accuracy"], self.accuracy_mean,
                              c.accuracy_concentration, *c.accuracy_clip)
        lat = latency_array(bits, up, down, gpu, cpu, user_power, provider_power, self.gains,
                            c.noise_power, c.noise_power, c.gpu_per_bit)
        self.latency_hist = (self.latency_hist + [lat])[-c.history_window:]
        self.accuracy_hist = (self.accuracy_hist + [acc])[-c.history_window:]
        return up, down, gpu, cpu, provider_power, user_power, bits, lat, acc

    def _current_valuations(self):
        return valuation_array(np.array(self.latency_hist), np.array(self.accuracy_hist),
                               self.params)

    def _record_bid_history(self, v):
        w = self.config.history_window
        self.vmax_hist = (self.vmax_hist + [float(v[1:].max())])[-w:]
        self.v0_hist = (self.v0_hist + [float(v[0])])[-w:]

    def next_round(self) -> Round:
        c = self.config
        up, down, gpu, cpu, ppow, upow, bits, lat, acc = self._sample_and_record()
        v = self._current_valuations()
        grid = auction.default_bid_grid(self.vmax_hist, c.bid_grid_points)
        b0 = auction.uav_contracted_bid(self.vmax_hist, self.v0_hist, grid)
        bids = v.copy()
        bids[0] = b0
        self._record_bid_history(v)
        pad = c.max_providers - c.num_providers

        def padded(x):
            return np.concatenate([x, np.zeros(pad)])

        feats = MarketFeatures(
            padded(up / MHZ), padded(down / MHZ), padded(gpu / c.compute_unit_hz),
            padded(cpu / c.compute_unit_hz),
            padded(np.mean(self.latency_hist, axis=0)),
            padded(np.mean(self.accuracy_hist, axis=0)),
            bits / MB_BITS)
        return Round(up, down, gpu, cpu, ppow, upow, bits, self.gains.copy(),
                     self.accuracy_mean.copy(), lat, acc, v, bids, feats, c.noise_power)


def generate_round(config: ScenarioConfig, rng: np.random.Generator):
    """A standalone round from a freshly bootstrapped market.

    Returns ``(providers, task, valuations, bids)``.
    """
    rnd = MarketSimulator(config, rng).next_round()
    return rnd.providers(), rnd.task(config.pixel_count), rnd.valuations, rnd.bids


def make_state(rnd: Round, config: ScenarioConfig) -> MarketState:
    pad = config.max_providers - rnd.num_providers
    bids = np.concatenate([rnd.bids, np.zeros(pad)])
    mask = np.concatenate([np.ones(rnd.num_providers, bool), np.zeros(pad, bool)])
    return MarketState(rnd.features, bids, mask)


# ---------------------------------------------------------------------------
# environment


@dataclass(frozen=True)
class StepInfo:
    winner: int
    rho: float
    payment: float
    uav_surplus: float
    bs_surplus: float
    latency: float
    max_valuation: float

    @property
    def total_surplus(self):
        return self.uav_surplus + self.bs_surplus


class AuctionEnv:
    """Episodic MDP over auction rounds.

    ``reset`` seeds a fresh market; ``step(action)`` runs the MSB auction with
    ``rho = 10 ** (action / |A|)`` and returns ``(state, reward, done, info)``.
    """

    def __init__(self, config: ScenarioConfig, seed: Optional[int] = None):
        self.config = config
        self.weights = SurplusWeights(config.zeta)
        self._seed_seq = np.random.SeedSequence(config.seed if seed is None else seed)
        self._round = None
        self._t = 0
        self.sim = None

    @property
    def action_space(self):
        return self.config.action_space

    @property
    def observation_size(self):
        return observation_size(self.config)

    @property
    def current_round(self) -> Round:
        return self._round

    @property
    def state(self) -> MarketState:
        return make_state(self._round, self.config)

    def reset(self) -> MarketState:
        # every reset consumes a fresh child seed, so episodes differ but replay exactly
        child = self._seed_seq.spawn(1)[0]
        self.sim = MarketSimulator(self.config, np.random.default_rng(child))
        self._round = self.sim.next_round()
        self._t = 0
        return self.state

    def step(self, action):
        return self.step_rho(action_to_rho(action, self.config.action_space))

    def step_rho(self, rho, mechanism="msb"):
        if self._round is None:
            raise DomainError("call reset() before step()")
        rnd = self._round
        if mechanism == "msb":
            outcome = auction.msb_auction(rnd.bids, rho, rnd.valuations, self.weights)
        elif mechanism == "spa":
            outcome = auction.spa(rnd.bids, rnd.valuations, self.weights)
        else:
            raise DomainError(f"unknown mechanism {mechanism!r}")
        reward = outcome.total_surplus
        if not np.isfinite(reward):
            raise DomainError(f"non-finite reward in round {self._t}: {reward}")
        info = StepInfo(outcome.winner, float(rho), float(outcome.payments[outcome.winner]),
                        outcome.uav_surplus, outcome.bs_surplus,
                        float(rnd.latency[outcome.winner]), float(rnd.valuations.max()))
        self._t += 1
        self._round = self.sim.next_round()
        done = self._t >= self.config.episode_length
        return self.state, reward, done, info
