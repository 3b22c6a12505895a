"""Allocation and pricing rules plus the strategy-proofness checker.

Provider index 0 is always the UAV (the brand bidder, bidding a contracted
payment); indices 1..N are ground base stations (performance bidders).
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import kernels
from .errors import DomainError

DEFAULT_BID_GRID_POINTS = 1000
DEFAULT_DEVIATION_FACTORS = np.linspace(0.0, 3.0, 100)


@dataclass(frozen=True)
class BidVector:
    uav_bid: float
    bs_bids: tuple

    def __post_init__(self):
        object.__setattr__(self, "bs_bids", tuple(float(b) for b in self.bs_bids))
        if not self.bs_bids:
            raise DomainError("at least one ground BS bid is required")
        if self.uav_bid < 0 or min(self.bs_bids) < 0:
            raise DomainError("bids must be non-negative")

    @classmethod
    def from_array(cls, bids):
        bids = np.asarray(bids, dtype=np.float64)
        return cls(float(bids[0]), tuple(bids[1:]))

    def as_array(self):
        return np.array((self.uav_bid,) + self.bs_bids, dtype=np.float64)

    def __len__(self):
        return 1 + len(self.bs_bids)


@dataclass(frozen=True)
class SurplusWeights:
    zeta: float = 1.0

    def __post_init__(self):
        if not self.zeta > 0:
            raise DomainError("zeta must be positive")


@dataclass(frozen=True)
class AuctionOutcome:
    winner: int
    allocation: np.ndarray = field(repr=False)
    payments: np.ndarray = field(repr=False)
    uav_surplus: float = 0.0
    bs_surplus: float = 0.0

    @property
    def total_surplus(self):
        return self.uav_surplus + self.bs_surplus

    def check_feasible(self):
        if int(self.allocation.sum()) != 1 or self.allocation[self.winner] != 1:
            raise DomainError("outcome must allocate the task to exactly one provider")
        losers = np.ones(len(self.allocation), dtype=bool)
        losers[self.winner] = False
        if np.any(self.payments[losers] != 0) or self.payments[self.winner] < 0:
            raise DomainError("losers must pay zero and the winner a non-negative amount")


def _as_bids(bids):
    if isinstance(bids, BidVector):
        return bids.as_array()
    arr = np.asarray(bids, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise DomainError("bid vector needs a UAV bid and at least one BS bid")
    if np.any(arr < 0):
        raise DomainError("bids must be non-negative")
    return arr


def _one_hot(n, winner):
    x = np.zeros(n, dtype=np.int64)
    x[winner] = 1
    return x


def _check_rho(rho):
    if not rho >= 1.0:
        raise DomainError(f"price scaling factor must be >= 1, got {rho!r}")


# ---------------------------------------------------------------------------
# modified second-bid auction


def msb_allocate(bids, rho: float) -> AuctionOutcome:
    """Allocation only: payments are left at zero."""
    _check_rho(rho)
    b = _as_bids(bids)
    winners, _ = kernels.msb_batch(b[None, :], np.array([b.size]), np.array([float(rho)]))
    w = int(winners[0])
    return AuctionOutcome(w, _one_hot(b.size, w), np.zeros(b.size))


def msb_price(bids, rho: float, outcome: AuctionOutcome) -> np.ndarray:
    _check_rho(rho)
    b = _as_bids(bids)
    expected = msb_allocate(b, rho)
    if outcome.winner != expected.winner or len(outcome.allocation) != b.size:
        raise DomainError("outcome does not match these bids and rho")
    payments = np.zeros(b.size)
    if outcome.winner == 0:
        payments[0] = b[0]
    else:
        payments[outcome.winner] = critical_payment(np.delete(b, outcome.winner), rho)
    return payments


def critical_payment(other_bids: Sequence[float], rho: float) -> float:
    """Smallest bid that still loses: rho times the best competing bid."""
    _check_rho(rho)
    other = np.asarray(other_bids, dtype=np.float64)
    if other.size == 0:
        raise DomainError("critical payment needs at least one competing bid")
    return float(rho * other.max())


def surplus(outcome: AuctionOutcome, valuations, weights: SurplusWeights = SurplusWeights()):
    """Weighted realised surplus; returns ``(uav_part, bs_part)``."""
    v = np.asarray(valuations, dtype=np.float64)
    x = outcome.allocation
    uav = weights.zeta * v[0] * x[0]
    bs = float(np.dot(v[1:], x[1:]))
    return float(uav), bs


def settle(outcome: AuctionOutcome, payments, valuations, weights=SurplusWeights()):
    uav, bs = surplus(outcome, valuations, weights)
    return AuctionOutcome(outcome.winner, outcome.allocation, np.asarray(payments, float), uav, bs)


def msb_auction(bids, rho, valuations=None, weights=SurplusWeights()) -> AuctionOutcome:
    """Allocation, pricing and (if valuations are given) surplus in one call."""
    outcome = msb_allocate(bids, rho)
    payments = msb_price(bids, rho, outcome)
    if valuations is None:
        return AuctionOutcome(outcome.winner, outcome.allocation, payments)
    return settle(outcome, payments, valuations, weights)


# ---------------------------------------------------------------------------
# UAV contracted payment


def default_bid_grid(vmax_samples, points=DEFAULT_BID_GRID_POINTS):
    return np.linspace(0.0, float(np.max(vmax_samples)), points)


def uav_contracted_bid(vmax_samples, v0_samples, grid=None) -> float:
    """Grid maximiser of the empirical mean of ``(v0 - vmax) * 1(vmax <= b)``.

    Ties resolve to the smallest grid point.
    """
    vmax = np.asarray(vmax_samples, dtype=np.float64)
    v0 = np.asarray(v0_samples, dtype=np.float64)
    if vmax.size == 0 or vmax.shape != v0.shape:
        raise DomainError("need equally long, non-empty v_max and v_0 histories")
    grid = default_bid_grid(vmax) if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise DomainError("bid grid is empty")
    return float(grid[kernels.contracted_bid_index(vmax, v0, grid)])


# ---------------------------------------------------------------------------
# baselines


def spa(bids, valuations=None, weights=SurplusWeights()) -> AuctionOutcome:
    """Second-price auction over all providers; ties go to the lowest id."""
    b = _as_bids(bids)
    w = int(np.argmax(b))
    payments = np.zeros(b.size)
    payments[w] = np.delete(b, w).max()
    outcome = AuctionOutcome(w, _one_hot(b.size, w), payments)
    if valuations is None:
        return outcome
    return settle(outcome, payments, valuations, weights)


def _top_two(b):
    s = np.sort(np.asarray(b, dtype=np.float64))
    return s[-1], s[-2]


def myopic_rho(bids) -> float:
    top, second = _top_two(_as_bids(bids))
    # ratio is undefined with a zero runner-up; fall back to the plain second-price threshold
    if second <= 0:
        return 1.0
    return max(1.0, top / second)


def optimal_rho(bid_history) -> float:
    """``max(1, mean(highest) / mean(second highest))`` over all past rounds."""
    if len(bid_history) == 0:
        return 1.0
    pairs = np.array([_top_two(b) for b in bid_history])
    top, second = pairs.mean(axis=0)
    if second <= 0:
        return 1.0
    return max(1.0, top / second)


# ---------------------------------------------------------------------------
# strategy-proofness


class Counterexample(NamedTuple):
    market: int
    bidder: int
    bid: float
    truthful_utility: float
    deviated_utility: float


def check_truthfulness(values, rho, factors=DEFAULT_DEVIATION_FACTORS, rel_tol=1e-12):
    """Probe one market for a profitable unilateral misreport by a ground BS.

    ``values[0]`` is the UAV's contracted bid (not strategic here);
    ``values[1:]`` are the BS valuations, bid truthfully by default. Each BS
    tries every bid ``factor * max(v_n, critical payment)``. Returns the first
    violation found or ``None``.
    """
    v = _as_bids(values)
    return check_truthfulness_batch(v[None, :], [v.size], [rho], factors, rel_tol)


def check_truthfulness_batch(values, counts, rho, factors=DEFAULT_DEVIATION_FACTORS,
                             rel_tol=1e-12) -> Optional[Counterexample]:
    values = np.ascontiguousarray(values, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.int64)
    rho = np.asarray(rho, dtype=np.float64)
    if np.any(rho < 1.0):
        raise DomainError("price scaling factor must be >= 1")
    factors = np.ascontiguousarray(factors, dtype=np.float64)
    i, n, bid, u_true, u_dev = kernels.truthfulness_scan(values, counts, rho, factors, rel_tol)
    if i < 0:
        return None
    return Counterexample(int(i), int(n), float(bid), float(u_true), float(u_dev))
