"""Small feed-forward networks with a hand-written reverse pass.

Layers are stored as ``W`` of shape ``(in, out)`` and ``b`` of shape
``(out,)``; the last layer is linear. Everything runs in float64.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import DomainError, UsageError


def _tanh_grad(y, _z):
    return 1.0 - y * y


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(_y, z):
    return (z > 0).astype(np.float64)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _silu(z):
    return z * _sigmoid(z)


def _silu_grad(_y, z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
    "silu": (_silu, _silu_grad),
}
_ACT_CODES = {"tanh": 1, "relu": 2, "silu": 3}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


class Tape:
    """Activations recorded by one forward pass; good for one backward call."""

    __slots__ = ("inputs", "pre", "post", "consumed")

    def __init__(self):
        self.inputs = []
        self.pre = []
        self.post = []
        self.consumed = False


class Mlp:
    def __init__(self, sizes, activation="tanh", rng=None, params=None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise DomainError(f"invalid layer sizes {sizes}")
        if activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {activation!r}")
        self.sizes = sizes
        self.activation = activation
        self._act, self._act_grad = ACTIVATIONS[activation]
        if params is not None:
            self.params = [np.array(p, dtype=np.float64) for p in params]
            self._check_shapes()
            return
        rng = np.random.default_rng(0) if rng is None else rng
        self.params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    def _check_shapes(self):
        if len(self.params) != 2 * (len(self.sizes) - 1):
            raise DomainError("parameter list does not match layer sizes")
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if self.params[2 * i].shape != (fan_in, fan_out) or self.params[2 * i + 1].shape != (fan_out,):
                raise DomainError(f"layer {i} parameters have the wrong shape")

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    @property
    def parameter_count(self):
        return sum(p.size for p in self.params)

    def copy(self):
        return Mlp(self.sizes, self.activation, params=[p.copy() for p in self.params])

    def flat(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.parameter_count:
            raise DomainError("flat parameter vector has the wrong length")
        offset = 0
        for p in self.params:
            p[...] = vector[offset:offset + p.size].reshape(p.shape)
            offset += p.size

    def forward(self, x, tape=None):
        """Evaluate the network on a batch (or a single vector)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[-1] != self.sizes[0]:
            raise DomainError(f"expected input width {self.sizes[0]}, got {x.shape[-1]}")
        h = x
        last = self.n_layers - 1
        for i in range(self.n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            if tape is not None:
                tape.inputs.append(h)
            z = h @ w + b
            if i == last:
                h = z
            else:
                h = self._act(z)
            if tape is not None:
                tape.pre.append(z)
                tape.post.append(h)
        return h[0] if single else h

    def forward_onehot_all(self, x, n_options, dtype=np.float64):
        """Outputs for ``concat(x, onehot(j))`` for every ``j``, shape ``(B, n_options, out)``.

        Equivalent to stacking all one-hot completions, but the first layer is
        split so the ``x`` part is multiplied once. ``dtype=np.float32`` trades
        about 1e-6 relative accuracy for a several-fold speedup.
        """
        x = np.atleast_2d(np.asarray(x, dtype=dtype))
        width = x.shape[-1]
        if width + n_options != self.sizes[0]:
            raise DomainError(f"expected {self.sizes[0] - n_options} state columns, got {width}")
        params = [p.astype(dtype, copy=False) for p in self.params]
        w0 = params[0]
        b = x.shape[0]
        head = (x @ w0[:width])[:, None, :] + (w0[width:] + params[1])[None, :, :]
        h = head.reshape(b * n_options, -1)
        last = self.n_layers - 1
        for i in range(self.n_layers):
            if i > 0:
                h = h @ params[2 * i]
                h += params[2 * i + 1]
            if i != last:
                if self.activation == "relu":
                    np.maximum(h, 0.0, out=h)
                else:
                    h = self._act(h)
        return h.reshape(b, n_options, -1)

    def record(self, x):
        tape = Tape()
        y = self.forward(x, tape)
        return y, tape

    def backward(self, tape: Tape, grad_out):
        """Return ``(param_grads, input_grad)`` for an upstream output gradient."""
        if tape.consumed:
            raise UsageError("tape already consumed by a previous backward pass")
        if len(tape.inputs) != self.n_layers:
            raise UsageError("tape does not come from a completed forward pass of this network")
        tape.consumed = True
        g = np.asarray(grad_out, dtype=np.float64)
        single = g.ndim == 1
        if single:
            g = g[None, :]
        grads = [None] * len(self.params)
        last = self.n_layers - 1
        for i in range(last, -1, -1):
            if i != last:
                g = g * self._act_grad(tape.post[i], tape.pre[i])
            h = tape.inputs[i]
            flat_h = h.reshape(-1, h.shape[-1])
            flat_g = g.reshape(-1, g.shape[-1])
            grads[2 * i] = flat_h.T @ flat_g
            grads[2 * i + 1] = flat_g.sum(axis=0)
            g = g @ self.params[2 * i].T
        return grads, (g[0] if single else g)


def soft_update(target: Mlp, online: Mlp, rate: float):
    """In place: ``target <- rate * online + (1 - rate) * target``."""
    if not 0.0 <= rate <= 1.0:
        raise DomainError("soft update rate must lie in [0, 1]")
    if target.sizes != online.sizes:
        raise DomainError("target and online networks differ in shape")
    for t, o in zip(target.params, online.params):
        t *= 1.0 - rate
        t += rate * o
    return target


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, max_grad_norm=None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads):
        if self.max_grad_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.max_grad_norm:
                grads = [g * (self.max_grad_norm / norm) for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# checkpoint format
#
#   magic      8 bytes  b"DMSBNET\0"
#   version    u32      1
#   n_nets     u32
#   per net:   u16 name length, utf-8 name, u8 activation code, u8 pad, u16 pad,
#              u32 n_sizes, u32 sizes[n_sizes],
#              per layer: f64 W[in * out] row-major (in, out), f64 b[out]
#   n_arrays   u32
#   per array: u16 name length, utf-8 name, u32 ndim, u32 shape[ndim], f64 data row-major
#
# All integers and floats are little-endian.

MAGIC = b"DMSBNET\0"
VERSION = 1


def _write_name(fh, name):
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_name(fh):
    (n,) = struct.unpack("<H", fh.read(2))
    return fh.read(n).decode("utf-8")


def save_checkpoint(path, nets, arrays=None):
    """Write named networks (and optional named float arrays) to ``path``."""
    arrays = arrays or {}
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(nets)))
        for name, net in nets.items():
            _write_name(fh, name)
            fh.write(struct.pack("<BBH", _ACT_CODES[net.activation], 0, 0))
            fh.write(struct.pack("<I", len(net.sizes)))
            fh.write(struct.pack(f"<{len(net.sizes)}I", *net.sizes))
            for p in net.params:
                fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            _write_name(fh, name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(nets, arrays)``."""
    with Path(path).open("rb") as fh:
        if fh.read(8) != MAGIC:
            raise DomainError(f"{path} is not a network checkpoint")
        version, n_nets = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise DomainError(f"unsupported checkpoint version {version}")
        nets = {}
        for _ in range(n_nets):
            name = _read_name(fh)
            code, _, _ = struct.unpack("<BBH", fh.read(4))
            (n_sizes,) = struct.unpack("<I", fh.read(4))
            sizes = list(struct.unpack(f"<{n_sizes}I", fh.read(4 * n_sizes)))
            params = []
            for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
                w = np.frombuffer(fh.read(8 * fan_in * fan_out), dtype="<f8").reshape(fan_in, fan_out)
                b = np.frombuffer(fh.read(8 * fan_out), dtype="<f8")
                params += [w.astype(np.float64), b.astype(np.float64)]
            nets[name] = Mlp(sizes, _ACT_NAMES[code], params=params)
        arrays = {}
        (n_arrays,) = struct.unpack("<I", fh.read(4))
        for _ in range(n_arrays):
            name = _read_name(fh)
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return nets, arrays
