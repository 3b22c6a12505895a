import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmsb import kernels


def random_markets(rng, m, width=9):
    counts = rng.integers(2, width + 1, size=m)
    bids = np.zeros((m, width))
    for i, c in enumerate(counts):
        bids[i, :c] = rng.lognormal(2.0, 1.0, size=c)
    # sprinkle exact ties and zero bids, the edge cases of the threshold rule
    bids[::7, 1] = bids[::7, 2]
    bids[::11, 0] = 0.0
    rho = rng.uniform(1.0, 10.0, size=m)
    rho[::5] = 1.0
    return bids, counts, rho


@pytest.mark.skipif(not kernels.NUMBA_AVAILABLE, reason="numba not installed")
def test_numba_is_the_default_path():
    assert kernels.NUMBA_ENABLED
    assert kernels.msb_batch is kernels.msb_batch_loop


def test_env_flag_selects_numpy_fallback():
    code = "from dmsb import kernels; print(kernels.NUMBA_ENABLED, kernels.msb_batch.__name__)"
    env = dict(os.environ, DMSB_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True).stdout.split()
    assert out == ["False", "msb_batch_numpy"]


def test_msb_batch_paths_agree():
    bids, counts, rho = random_markets(np.random.default_rng(0), 5000)
    w1, p1 = kernels.msb_batch_loop(bids, counts, rho)
    w2, p2 = kernels.msb_batch_numpy(bids, counts, rho)
    np.testing.assert_array_equal(w1, w2)
    np.testing.assert_array_equal(p1, p2)


def test_msb_batch_values():
    bids = np.array([[1.0, 5.0, 2.0], [1.0, 5.0, 3.0], [0.0, 7.0, 0.0]])
    counts = np.array([3, 3, 2])
    rho = np.array([2.0, 2.0, 1.0])
    for fn in (kernels.msb_batch_loop, kernels.msb_batch_numpy):
        w, p = fn(bids, counts, rho)
        np.testing.assert_array_equal(w, [1, 0, 1])
        np.testing.assert_array_equal(p, [4.0, 1.0, 0.0])


def test_truthfulness_paths_agree_on_clean_markets():
    bids, counts, rho = random_markets(np.random.default_rng(1), 2000)
    f = np.linspace(0, 3, 100)
    assert kernels.truthfulness_scan_loop(bids, counts, rho, f, 1e-12)[0] == -1
    assert kernels.truthfulness_scan_numpy(bids, counts, rho, f, 1e-12)[0] == -1


def test_truthfulness_paths_agree_when_slack_is_negative():
    bids, counts, rho = random_markets(np.random.default_rng(2), 50)
    f = np.linspace(0, 3, 100)
    a = kernels.truthfulness_scan_loop(bids, counts, rho, f, -1e-3)
    b = kernels.truthfulness_scan_numpy(bids, counts, rho, f, -1e-3)
    assert a[0] >= 0
    assert a[:2] == b[:2]
    np.testing.assert_allclose(a[2:], b[2:], rtol=1e-15)


@settings(max_examples=200)
@given(st.lists(st.tuples(st.floats(0, 50), st.floats(0, 50)), min_size=1, max_size=30),
       st.integers(2, 200))
def test_contracted_bid_paths_agree(pairs, points):
    vmax = np.array([p[0] for p in pairs])
    v0 = np.array([p[1] for p in pairs])
    grid = np.linspace(0, vmax.max(), points)
    assert kernels.contracted_bid_index_loop(vmax, v0, grid) == \
        kernels.contracted_bid_index_numpy(vmax, v0, grid)
