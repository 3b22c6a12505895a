"""Central-difference oracle shared by the unit and acceptance suites."""

import numpy as np

from dmsb.nn import Mlp


def random_case(rng, activation=None):
    depth = int(rng.integers(1, 4))
    sizes = [int(s) for s in rng.integers(1, 7, size=depth + 1)]
    act = activation or str(rng.choice(["tanh", "silu", "relu"]))
    net = Mlp(sizes, act, rng)
    for p in net.params:
        p += rng.normal(0, 0.3, p.shape)
    x = rng.normal(size=(int(rng.integers(1, 5)), sizes[0]))
    w = rng.normal(size=(x.shape[0], sizes[-1]))
    return net, x, w


def loss(net, x, w):
    return float(np.sum(net.forward(x) * w))


def numeric_grad(net, x, w, h=1e-5):
    theta = net.flat()
    g = np.zeros_like(theta)
    for i in range(theta.size):
        t = theta.copy()
        t[i] += h
        net.set_flat(t)
        up = loss(net, x, w)
        t[i] -= 2 * h
        net.set_flat(t)
        g[i] = (up - loss(net, x, w)) / (2 * h)
    net.set_flat(theta)
    return g


def analytic_grad(net, x, w):
    _, tape = net.record(x)
    grads, _ = net.backward(tape, w)
    return np.concatenate([g.ravel() for g in grads])


def relative_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def max_gradient_error(cases, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        net, x, w = random_case(rng)
        worst = max(worst, relative_error(analytic_grad(net, x, w), numeric_grad(net, x, w)))
    return worst
