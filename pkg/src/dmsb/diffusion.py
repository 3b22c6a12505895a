"""Diffusion actor over discrete price-scaling actions.

Action logits are generated by running a learned reverse chain from
Gaussian noise, conditioned on the observed market state, then projected
onto the action simplex with a softmax.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, DomainError
from .nn import Mlp

EMBED_DIM = 8


@dataclass(frozen=True)
class NoiseSchedule:
    eta: np.ndarray

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=np.float64)
        object.__setattr__(self, "eta", eta)
        if eta.ndim != 1 or eta.size < 1:
            raise DomainError("schedule needs at least one step")
        if np.any(eta <= 0) or np.any(eta >= 1):
            raise DomainError("every eta_k must lie in (0, 1)")

    @classmethod
    def linear(cls, steps, eta_min=1e-4, eta_max=2e-2):
        if steps == 1:
            return cls(np.array([eta_min]))
        return cls(np.linspace(eta_min, eta_max, steps))

    @property
    def steps(self):
        return self.eta.size

    @property
    def alpha_bar(self):
        """Cumulative products of ``1 - eta``; entry ``k - 1`` belongs to step ``k``."""
        return np.cumprod(1.0 - self.eta)

    def closed_form(self, k):
        """Mean scale and variance of ``x_k`` given ``x_0``."""
        ab = self.alpha_bar[k - 1]
        return np.sqrt(ab), 1.0 - ab

    @property
    def posterior_variance(self):
        """Reverse-step variances ``sigma_k^2``; ``sigma_1^2`` is zero."""
        # 1 - alpha_bar via expm1 so tiny schedules do not cancel to 0/0
        one_minus = -np.expm1(np.cumsum(np.log1p(-self.eta)))
        prev = np.concatenate(([0.0], one_minus[:-1]))
        return self.eta * prev / one_minus


def forward_noise(x0, k, schedule: NoiseSchedule, rng, closed_form=False):
    """Sample ``x_k`` by ``k`` Gaussian noising steps (or the equivalent one-shot draw)."""
    if not 1 <= k <= schedule.steps:
        raise DomainError(f"step {k} outside [1, {schedule.steps}]")
    x = np.asarray(x0, dtype=np.float64)
    if closed_form:
        scale, var = schedule.closed_form(k)
        return scale * x + np.sqrt(var) * rng.standard_normal(x.shape)
    for eta in schedule.eta[:k]:
        x = np.sqrt(1.0 - eta) * x + np.sqrt(eta) * rng.standard_normal(x.shape)
    return x


def timestep_embedding(k, dim=EMBED_DIM):
    half = dim // 2
    freqs = np.exp(-np.log(100.0) * np.arange(half) / max(half - 1, 1))
    angles = float(k) * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def action_distribution(x0):
    return softmax(x0)


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -np.sum(p * logp, axis=-1)


def sample_action(p, rng, mode="stochastic"):
    p = np.asarray(p, dtype=np.float64)
    if mode == "greedy":
        return int(np.argmax(p))
    if mode != "stochastic":
        raise DomainError(f"unknown sampling mode {mode!r}")
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), p.size - 1))


class DenoiseTrace:
    """Record of one reverse chain, enough to backpropagate into the denoiser."""

    def __init__(self):
        self.tapes = []


class DiffusionActor:
    """Denoiser ``Lambda(x_k, k, s)`` that predicts the reverse-step mean directly."""

    def __init__(self, obs_size, action_space, schedule: NoiseSchedule, hidden=(64, 64),
                 rng=None, activation="relu", denoiser=None):
        self.obs_size = obs_size
        self.action_space = action_space
        self.schedule = schedule
        sizes = [action_space + EMBED_DIM + obs_size, *hidden, action_space]
        self.denoiser = denoiser if denoiser is not None else Mlp(sizes, activation, rng)
        if self.denoiser.sizes[0] != sizes[0] or self.denoiser.sizes[-1] != action_space:
            raise DomainError("denoiser shape does not fit this actor")
        self._embeds = np.stack([timestep_embedding(k) for k in range(1, schedule.steps + 1)])
        self._sigma = np.sqrt(schedule.posterior_variance)

    def copy(self):
        return DiffusionActor(self.obs_size, self.action_space, self.schedule,
                              denoiser=self.denoiser.copy())

    @property
    def params(self):
        return self.denoiser.params

    def denoise(self, states, rng, trace: DenoiseTrace = None, x_k=None):
        """Run ``x_K -> x_0`` for a batch of observations; returns ``x_0``."""
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        b = s.shape[0]
        x = rng.standard_normal((b, self.action_space)) if x_k is None else np.array(x_k, float)
        for k in range(self.schedule.steps, 0, -1):
            emb = np.broadcast_to(self._embeds[k - 1], (b, EMBED_DIM))
            inp = np.concatenate([x, emb, s], axis=1)
            if trace is not None:
                mean, tape = self.denoiser.record(inp)
                trace.tapes.append(tape)
            else:
                mean = self.denoiser.forward(inp)
            sigma = self._sigma[k - 1]
            x = mean + sigma * rng.standard_normal(mean.shape) if sigma > 0 else mean
        if not np.all(np.isfinite(x)):
            raise DivergenceError("reverse diffusion produced non-finite logits")
        return x

    def backward(self, trace: DenoiseTrace, grad_x0):
        """Parameter gradients of a loss given ``dL/dx_0`` for the traced chain."""
        grads = [np.zeros_like(p) for p in self.params]
        g = np.asarray(grad_x0, dtype=np.float64)
        a = self.action_space
        for tape in reversed(trace.tapes):
            step_grads, g_in = self.denoiser.backward(tape, g)
            for acc, sg in zip(grads, step_grads):
                acc += sg
            g = g_in[:, :a]  # noise added after the mean does not depend on x_k
        trace.tapes.clear()
        return grads

    def distribution(self, states, rng):
        return action_distribution(self.denoise(states, rng))

    def act(self, state_obs, rng, mode="stochastic"):
        p = self.distribution(state_obs, rng)[0]
        return sample_action(p, rng, mode), p
