"""Physical system model: link rates, three-stage latency, pixel accuracy, valuation.

Scalar functions operate on :class:`ResourceProvider` / :class:`VtTask`
records; the ``*_array`` variants evaluate the same formulas over numpy
arrays and are what the environment uses every round.
"""

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError


class _InfiniteLatency:
    """Marker for a task that can never complete (a zero-rate link)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "INFINITE_LATENCY"

    def __reduce__(self):
        return (_InfiniteLatency, ())


INFINITE_LATENCY = _InfiniteLatency()


def _positive(name, value):
    if not (value > 0 and math.isfinite(value)):
        raise DomainError(f"{name} must be positive and finite, got {value!r}")


@dataclass(frozen=True)
class ResourceProvider:
    """A bidder: id 0 is the UAV, ids 1..N are ground base stations."""

    id: int
    uplink_bandwidth: float  # Hz
    downlink_bandwidth: float  # Hz
    gpu_efficiency: float
    cpu_efficiency: float
    tx_power: float
    noise_power: float
    accuracy_mean: float

    def __post_init__(self):
        if self.id < 0:
            raise DomainError(f"provider id must be >= 0, got {self.id}")
        for name in ("uplink_bandwidth", "downlink_bandwidth", "gpu_efficiency",
                     "cpu_efficiency", "tx_power", "noise_power"):
            _positive(name, getattr(self, name))
        if not 0.0 < self.accuracy_mean < 1.0:
            raise DomainError(f"accuracy_mean must lie in (0, 1), got {self.accuracy_mean}")

    @property
    def is_uav(self):
        return self.id == 0


@dataclass(frozen=True)
class VtTask:
    """One offloading request. ``output_size`` defaults to ``input_size``."""

    input_size: float  # bits
    pixel_count: int
    user_tx_power: float
    user_noise: float
    channel_gain: Mapping[int, float] = field(default_factory=dict)
    output_size: float = None  # bits

    def __post_init__(self):
        _positive("input_size", self.input_size)
        if self.output_size is None:
            object.__setattr__(self, "output_size", self.input_size)
        if self.output_size != self.input_size:
            raise DomainError("output_size must equal input_size")
        if self.pixel_count < 1:
            raise DomainError(f"pixel_count must be >= 1, got {self.pixel_count}")
        _positive("user_tx_power", self.user_tx_power)
        _positive("user_noise", self.user_noise)
        for pid, g in self.channel_gain.items():
            # zero gain is allowed so the degenerate zero-rate path is reachable
            if not (g >= 0 and math.isfinite(g)):
                raise DomainError(f"channel gain for provider {pid} must be >= 0, got {g}")

    def gain(self, provider_id):
        try:
            return self.channel_gain[provider_id]
        except KeyError:
            raise DomainError(f"task has no channel gain for provider {provider_id}") from None


@dataclass(frozen=True)
class PixelSets:
    ground_truth: Sequence
    processed: Sequence

    def __post_init__(self):
        if len(self.ground_truth) != len(self.processed):
            raise DomainError(
                f"pixel sets differ in length: {len(self.ground_truth)} vs {len(self.processed)}")


@dataclass(frozen=True)
class ValuationParams:
    omega1: float = 1.0
    omega2: float = 1.0
    beta: float = 2.0
    history_window: int = 10

    def __post_init__(self):
        _positive("omega1", self.omega1)
        _positive("omega2", self.omega2)
        _positive("beta", self.beta)
        if self.history_window < 1:
            raise DomainError("history_window must be >= 1")


# ---------------------------------------------------------------------------
# network model


def shannon_rate(bandwidth, gain, power, noise):
    """``bandwidth * log2(1 + gain * power / noise)`` with domain checks."""
    _positive("bandwidth", bandwidth)
    _positive("noise power", noise)
    if gain < 0 or power < 0:
        raise DomainError("gain and power must be non-negative")
    return bandwidth * math.log2(1.0 + gain * power / noise)


def uplink_rate(task: VtTask, provider: ResourceProvider) -> float:
    return shannon_rate(provider.uplink_bandwidth, task.gain(provider.id),
                        task.user_tx_power, provider.noise_power)


def downlink_rate(task: VtTask, provider: ResourceProvider) -> float:
    return shannon_rate(provider.downlink_bandwidth, task.gain(provider.id),
                        provider.tx_power, task.user_noise)


# ---------------------------------------------------------------------------
# latency model


def processing_latency(size, gpu_per_bit, gpu_efficiency, cpu_efficiency):
    return size * gpu_per_bit / gpu_efficiency + size / cpu_efficiency


def total_latency(task: VtTask, provider: ResourceProvider, gpu_per_bit: float):
    """Uplink + processing + downlink time in seconds.

    Returns :data:`INFINITE_LATENCY` when either link has zero rate.
    """
    if gpu_per_bit < 0:
        raise DomainError("gpu_per_bit must be non-negative")
    r_up = uplink_rate(task, provider)
    r_down = downlink_rate(task, provider)
    if r_up <= 0 or r_down <= 0:
        return INFINITE_LATENCY
    t_up = task.input_size / r_up
    t_proc = processing_latency(task.input_size, gpu_per_bit,
                                provider.gpu_efficiency, provider.cpu_efficiency)
    t_down = task.output_size / r_down
    return t_up + t_proc + t_down


def latency_array(size, up_bw, down_bw, gpu, cpu, user_power, bs_power, gain,
                  bs_noise, user_noise, gpu_per_bit):
    """Vectorised total latency; zero-rate entries come back as ``np.inf``.

    Callers must not feed the inf entries to valuations; the environment
    generator only draws strictly positive gains so they never appear there.
    """
    snr_up = gain * user_power / bs_noise
    snr_down = gain * bs_power / user_noise
    r_up = up_bw * np.log2(1.0 + snr_up)
    r_down = down_bw * np.log2(1.0 + snr_down)
    with np.errstate(divide="ignore"):
        t_up = np.where(r_up > 0, size / np.where(r_up > 0, r_up, 1.0), np.inf)
        t_down = np.where(r_down > 0, size / np.where(r_down > 0, r_down, 1.0), np.inf)
    return t_up + processing_latency(size, gpu_per_bit, gpu, cpu) + t_down


# ---------------------------------------------------------------------------
# accuracy model


def pixel_match_count(p: PixelSets) -> int:
    return sum(1 for w, c in zip(p.ground_truth, p.processed) if w == c)


def task_accuracy(p: PixelSets) -> float:
    k = len(p.ground_truth)
    if k == 0:
        raise DomainError("accuracy undefined for an empty pixel set")
    return pixel_match_count(p) / k


def sample_accuracy(rng, mean, concentration=20.0, low=0.05, high=0.99, size=None):
    """Draw per-task accuracies from a Beta law centred on ``mean``, clamped.

    The upper clamp keeps the matching value finite.
    """
    mean = np.asarray(mean, dtype=np.float64)
    a = mean * concentration
    b = (1.0 - mean) * concentration
    return np.clip(rng.beta(a, b, size=size), low, high)


# ---------------------------------------------------------------------------
# valuation


def _window(history, params):
    if len(history) == 0:
        raise DomainError("history must not be empty")
    return list(history)[-params.history_window:]


def common_value(latency_history, params: ValuationParams) -> float:
    """Windowed mean of ``omega1 / latency``; infinite latencies contribute zero."""
    terms = []
    for t in _window(latency_history, params):
        if t is INFINITE_LATENCY:
            terms.append(0.0)
            continue
        if not (t > 0 and math.isfinite(t)):
            raise DomainError(f"latency must be positive and finite, got {t!r}")
        terms.append(params.omega1 / t)
    return sum(terms) / len(terms)


def matching_value(accuracy_history, params: ValuationParams) -> float:
    terms = []
    for r in _window(accuracy_history, params):
        if not 0.0 <= r < 1.0:
            raise DomainError(f"accuracy must lie in [0, 1), got {r!r}")
        terms.append(params.omega2 / (1.0 - r) ** params.beta)
    return sum(terms) / len(terms)


def valuation(c_n: float, m_n: float) -> float:
    if not (c_n > 0 and m_n > 0):
        raise DomainError(f"valuation factors must be positive, got c={c_n!r}, m={m_n!r}")
    return c_n * m_n


def valuation_array(latency_window, accuracy_window, params: ValuationParams):
    """Valuations for every provider from ``(T, P)`` history windows."""
    c = np.mean(params.omega1 / latency_window, axis=0)
    m = np.mean(params.omega2 / (1.0 - accuracy_window) ** params.beta, axis=0)
    return c * m
