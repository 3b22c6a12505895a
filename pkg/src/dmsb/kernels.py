"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Every kernel exists twice: a scalar-loop version that numba compiles and a
vectorised numpy version. ``DMSB_NUMBA=0`` in the environment (or a missing
numba install) routes the public names to the numpy versions. Both paths
return identical results; ``tests/test_kernels.py`` holds them to that.

Bid arrays are laid out with the UAV in column 0 and ground base stations in
columns 1..N. Unused trailing columns are zero-padded, which is harmless for
the modified second-bid rule because a zero bid can never clear a
non-negative threshold.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

__all__ = [
    "NUMBA_AVAILABLE",
    "NUMBA_ENABLED",
    "msb_batch",
    "msb_batch_numpy",
    "msb_batch_loop",
    "truthfulness_scan",
    "truthfulness_scan_numpy",
    "truthfulness_scan_loop",
    "contracted_bid_index",
    "contracted_bid_index_numpy",
    "contracted_bid_index_loop",
]


def _flag(name, default="1"):
    return os.environ.get(name, default).strip().lower() not in {"0", "false", "off", "no"}


NUMBA_AVAILABLE = numba is not None
NUMBA_ENABLED = NUMBA_AVAILABLE and _flag("DMSB_NUMBA")


def _jit(fn):
    if not NUMBA_AVAILABLE:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# modified second-bid allocation + pricing


def _msb_row_py(bids, count, rho):
    # Direct transcription of the rule: BS n wins iff b_n > rho * max(b_{-n}).
    for n in range(1, count):
        others = 0.0
        for j in range(count):
            if j != n and bids[j] > others:
                others = bids[j]
        threshold = rho * others
        if bids[n] > threshold:
            return n, threshold
    return 0, bids[0]


_msb_row = _jit(_msb_row_py)


def _msb_batch_loop_py(bids, counts, rho):
    m = bids.shape[0]
    winners = np.zeros(m, dtype=np.int64)
    payments = np.zeros(m, dtype=np.float64)
    for i in range(m):
        w, p = _msb_row(bids[i], counts[i], rho[i])
        winners[i] = w
        payments[i] = p
    return winners, payments


msb_batch_loop = _jit(_msb_batch_loop_py)


def msb_batch_numpy(bids, counts, rho):
    bids = np.asarray(bids, dtype=np.float64)
    m, p = bids.shape
    cols = np.arange(p)
    valid = cols[None, :] < np.asarray(counts)[:, None]
    masked = np.where(valid, bids, 0.0)
    bs = masked[:, 1:]
    top_idx = np.argmax(bs, axis=1)
    top = bs[np.arange(m), top_idx]
    if bs.shape[1] > 1:
        runner_up = np.sort(bs, axis=1)[:, -2]
    else:
        runner_up = np.zeros(m)
    # only the top BS can clear rho * max(others) when rho >= 1
    others = np.maximum(runner_up, masked[:, 0])
    threshold = np.asarray(rho, dtype=np.float64) * others
    bs_wins = top > threshold
    winners = np.where(bs_wins, top_idx + 1, 0).astype(np.int64)
    payments = np.where(bs_wins, threshold, masked[:, 0])
    return winners, payments


# ---------------------------------------------------------------------------
# exhaustive unilateral-deviation scan


def _truthfulness_scan_loop_py(values, counts, rho, factors, rel_tol):
    m, p = values.shape
    g = factors.shape[0]
    bids = np.zeros(p, dtype=np.float64)
    for i in range(m):
        c = counts[i]
        for j in range(p):
            bids[j] = values[i, j] if j < c else 0.0
        for n in range(1, c):
            v = values[i, n]
            w, pay = _msb_row(bids, c, rho[i])
            truthful = v - pay if w == n else 0.0
            others = 0.0
            for j in range(c):
                if j != n and bids[j] > others:
                    others = bids[j]
            scale = max(v, rho[i] * others)
            slack = rel_tol * max(scale, 1.0)
            for k in range(g):
                bids[n] = factors[k] * scale
                w, pay = _msb_row(bids, c, rho[i])
                deviated = v - pay if w == n else 0.0
                if deviated > truthful + slack:
                    return i, n, bids[n], truthful, deviated
            bids[n] = v
    return -1, -1, 0.0, 0.0, 0.0


truthfulness_scan_loop = _jit(_truthfulness_scan_loop_py)


def truthfulness_scan_numpy(values, counts, rho, factors, rel_tol, chunk=512):
    values = np.asarray(values, dtype=np.float64)
    counts = np.asarray(counts)
    rho = np.asarray(rho, dtype=np.float64)
    factors = np.asarray(factors, dtype=np.float64)
    m, p = values.shape
    g = factors.shape[0]
    valid = np.arange(p)[None, :] < counts[:, None]
    values = np.where(valid, values, 0.0)
    for start in range(0, m, chunk):
        v = values[start:start + chunk]
        c = counts[start:start + chunk]
        r = rho[start:start + chunk]
        k = v.shape[0]
        nb = p - 1
        # truthful outcome per market
        w0, pay0 = msb_batch_numpy(v, c, r)
        bidder = np.arange(1, p)
        own = v[:, 1:]
        wins_true = w0[:, None] == bidder[None, :]
        truthful = np.where(wins_true, own - pay0[:, None], 0.0)
        # max over others for each (market, bidder)
        other = np.empty((k, nb))
        for n in range(1, p):
            other[:, n - 1] = np.delete(v, n, axis=1).max(axis=1)
        scale = np.maximum(own, r[:, None] * other)
        dev = factors[None, None, :] * scale[:, :, None]  # (k, nb, g)
        tensor = np.broadcast_to(v[:, None, None, :], (k, nb, g, p)).copy()
        idx = np.arange(nb)
        tensor[:, idx, :, idx + 1] = np.moveaxis(dev, 1, 0)
        flat = tensor.reshape(-1, p)
        cc = np.repeat(c, nb * g)
        rr = np.repeat(r, nb * g)
        w, pay = msb_batch_numpy(flat, cc, rr)
        w = w.reshape(k, nb, g)
        pay = pay.reshape(k, nb, g)
        deviated = np.where(w == bidder[None, :, None], own[:, :, None] - pay, 0.0)
        slack = rel_tol * np.maximum(scale, 1.0)
        bad = deviated > truthful[:, :, None] + slack[:, :, None]
        bad &= (bidder[None, :] < c[:, None])[:, :, None]
        if bad.any():
            i, n, kk = np.argwhere(bad)[0]
            return (start + int(i), int(n) + 1, float(dev[i, n, kk]),
                    float(truthful[i, n]), float(deviated[i, n, kk]))
    return -1, -1, 0.0, 0.0, 0.0


# ---------------------------------------------------------------------------
# contracted UAV payment: grid argmax of empirical expected profit


def _contracted_bid_index_loop_py(vmax, v0, grid):
    s = vmax.shape[0]
    best = 0
    best_profit = -np.inf
    for k in range(grid.shape[0]):
        total = 0.0
        for t in range(s):
            if vmax[t] <= grid[k]:
                total += v0[t] - vmax[t]
        profit = total / s
        if profit > best_profit:
            best_profit = profit
            best = k
    return best


contracted_bid_index_loop = _jit(_contracted_bid_index_loop_py)


def contracted_bid_index_numpy(vmax, v0, grid):
    vmax = np.asarray(vmax, dtype=np.float64)
    gain = np.asarray(v0, dtype=np.float64) - vmax
    grid = np.asarray(grid, dtype=np.float64)
    # sort once so every grid point sums a prefix in the same order as the loop
    order = np.argsort(vmax, kind="stable")
    sorted_vmax = vmax[order]
    # loop version adds in original sample order; reproduce that order exactly
    included = sorted_vmax[None, :] <= grid[:, None]
    mask = np.zeros((grid.shape[0], vmax.shape[0]), dtype=bool)
    mask[:, order] = included
    totals = np.zeros(grid.shape[0])
    for t in range(vmax.shape[0]):
        totals = totals + np.where(mask[:, t], gain[t], 0.0)
    profit = totals / vmax.shape[0]
    return int(np.argmax(profit))


# ---------------------------------------------------------------------------
# dispatch

if NUMBA_ENABLED:
    msb_batch = msb_batch_loop
    truthfulness_scan = truthfulness_scan_loop
    contracted_bid_index = contracted_bid_index_loop
else:
    msb_batch = msb_batch_numpy
    truthfulness_scan = truthfulness_scan_numpy
    contracted_bid_index = contracted_bid_index_numpy
