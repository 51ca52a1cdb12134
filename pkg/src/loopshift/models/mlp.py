"""Small fully connected networks with hand-written reverse-mode gradients.

Weights are stored as ``(out, in)`` matrices and inputs as row batches, so a
layer computes ``z = x W^T + b``.  Optional spectral normalization divides each
weight by a power-iteration estimate of its top singular value.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ..errors import FormatError, InvalidInputError

LEAK = 0.2
ACTIVATIONS = ("leaky_relu", "tanh", "sigmoid", "identity")
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}


def activate(name, z):
    if name == "leaky_relu":
        return np.maximum(z, LEAK * z)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return expit(z)
    if name == "identity":
        return z
    raise InvalidInputError(f"unknown activation {name!r}")


def _d1(name, z, a):
    if name == "leaky_relu":
        d = np.full_like(z, LEAK)
        d[z > 0] = 1.0
        return d
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


def _d2(name, z, a):
    if name == "tanh":
        return -2.0 * a * (1.0 - a * a)
    if name == "sigmoid":
        return a * (1.0 - a) * (1.0 - 2.0 * a)
    return np.zeros_like(z)


def spectral_normalize(w, u, iters: int = 1):
    """Power-iteration step(s) on ``w``; returns ``(w / sigma, u, v, sigma)``."""
    w = np.asarray(w, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    for _ in range(iters):
        v = w.T @ u
        v /= np.linalg.norm(v) + 1e-12
        u = w @ v
        u /= np.linalg.norm(u) + 1e-12
    sigma = float(u @ w @ v)
    return w / sigma, u, v, sigma


@dataclass
class Mlp:
    weights: list
    biases: list
    activations: list
    spectral_norm: bool = False
    sn_u: list = field(default_factory=list)
    sn_v: list = field(default_factory=list)
    sn_sigma: list = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise InvalidInputError("weights, biases and activations must align")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise InvalidInputError(f"layer {i}: bias shape {b.shape} vs weight {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidInputError(f"layer {i}: input dim does not chain")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise InvalidInputError(f"unknown activation {a!r}")

    @property
    def sizes(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def params(self) -> list:
        """Trainable arrays in a fixed order: ``W0, b0, W1, b1, ...``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   list(self.activations), self.spectral_norm,
                   [u.copy() for u in self.sn_u], [v.copy() for v in self.sn_v],
                   list(self.sn_sigma))

    def refresh_spectral(self, iters: int = 1) -> None:
        """Advance the power-iteration state of every layer (training-time call)."""
        if not self.spectral_norm:
            return
        for i, w in enumerate(self.weights):
            _, u, v, s = spectral_normalize(w, self.sn_u[i], iters)
            self.sn_u[i], self.sn_v[i], self.sn_sigma[i] = u, v, s

    def effective_weights(self) -> list:
        if not self.spectral_norm:
            return self.weights
        return [w / s for w, s in zip(self.weights, self.sn_sigma)]

    def __call__(self, x):
        return mlp_forward(self, x)[0]


def init_mlp(sizes, activations, rng, spectral_norm: bool = False) -> Mlp:
    """Uniform ``+-1/sqrt(fan_in)`` weights, zero biases."""
    if len(activations) != len(sizes) - 1:
        raise InvalidInputError("need one activation per layer")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    net = Mlp(weights, biases, list(activations), spectral_norm)
    if spectral_norm:
        net.sn_u = [rng.normal(size=w.shape[0]) for w in weights]
        net.sn_u = [u / np.linalg.norm(u) for u in net.sn_u]
        net.sn_v = [np.zeros(w.shape[1]) for w in weights]
        net.sn_sigma = [1.0] * len(weights)
        net.refresh_spectral(iters=20)
    return net


@dataclass
class Cache:
    inputs: list       # a_{l-1} per layer
    pre: list          # z_l
    post: list         # a_l
    weights: list      # effective weights used
    squeeze: bool


def mlp_forward(net: Mlp, x):
    """Forward pass on a vector or a row batch; returns ``(output, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.sizes[0]:
        raise InvalidInputError(f"input dim {x.shape[-1]} != network input {net.sizes[0]}")
    ws = net.effective_weights()
    inputs, pre, post = [], [], []
    a = x
    for w, b, act in zip(ws, net.biases, net.activations):
        inputs.append(a)
        z = a @ w.T + b
        a = activate(act, z)
        pre.append(z)
        post.append(a)
    out = a[0] if squeeze else a
    return out, Cache(inputs, pre, post, ws, squeeze)


def _sn_backward(net: Mlp, i: int, g_eff):
    """Map a gradient w.r.t. ``W / sigma`` back to the raw weight ``W``."""
    s = net.sn_sigma[i]
    w_sn = net.weights[i] / s
    return (g_eff - np.sum(g_eff * w_sn) * np.outer(net.sn_u[i], net.sn_v[i])) / s


def _finish_param_grads(net, gw, gb):
    grads = []
    for i in range(len(gw)):
        g = _sn_backward(net, i, gw[i]) if net.spectral_norm else gw[i]
        grads += [g, gb[i]]
    return grads


def mlp_grad(net: Mlp, x, upstream_grad, cache: Cache | None = None):
    """Gradients of ``<upstream_grad, net(x)>`` w.r.t. all parameters and the input.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered as
    :meth:`Mlp.params`.
    """
    if cache is None:
        _, cache = mlp_forward(net, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.post[-1].shape:
        raise InvalidInputError(f"upstream grad shape {g.shape} != output {cache.post[-1].shape}")
    n_layers = len(cache.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    for i in reversed(range(n_layers)):
        act = net.activations[i]
        dz = g * _d1(act, cache.pre[i], cache.post[i])
        gw[i] = dz.T @ cache.inputs[i]
        gb[i] = dz.sum(axis=0)
        g = dz @ cache.weights[i]
    grads = _finish_param_grads(net, gw, gb)
    return grads, (g[0] if cache.squeeze else g)


def directional_param_grad(net: Mlp, x, direction):
    """Gradient w.r.t. parameters of ``sum_i <direction_i, d net(x_i) / d x_i>``.

    ``net`` must have a scalar output.  The directional derivative is carried
    forward as a tangent next to the primal pass and the combined graph is
    then reversed, which gives the exact second-order term that the gradient
    penalty needs.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tan = np.atleast_2d(np.asarray(direction, dtype=np.float64))
    if tan.shape != x.shape:
        raise InvalidInputError("direction must match the input batch")
    if net.sizes[-1] != 1:
        raise InvalidInputError("directional_param_grad needs a scalar-output network")
    ws = net.effective_weights()
    a_in, t_in, zs, dzs, outs = [], [], [], [], []
    a, t = x, tan
    for w, b, act in zip(ws, net.biases, net.activations):
        a_in.append(a)
        t_in.append(t)
        z = a @ w.T + b
        tz = t @ w.T
        a = activate(act, z)
        t = _d1(act, z, a) * tz
        zs.append(z)
        dzs.append(tz)
        outs.append(a)
    n_layers = len(ws)
    gw, gb = [None] * n_layers, [None] * n_layers
    bar_a = np.zeros_like(outs[-1])
    bar_t = np.ones_like(outs[-1])
    for i in reversed(range(n_layers)):
        act = net.activations[i]
        z, a, tz = zs[i], outs[i], dzs[i]
        d1 = _d1(act, z, a)
        bar_tz = d1 * bar_t
        bar_z = d1 * bar_a + _d2(act, z, a) * tz * bar_t
        gw[i] = bar_z.T @ a_in[i] + bar_tz.T @ t_in[i]
        gb[i] = bar_z.sum(axis=0)
        bar_a = bar_z @ ws[i]
        bar_t = bar_tz @ ws[i]
    return _finish_param_grads(net, gw, gb)


# --- optimizer -----------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update applied in place; returns ``(params, state)``."""
    if len(params) != len(grads):
        raise InvalidInputError("params and grads differ in length")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise InvalidInputError(f"gradient shape {g.shape} != parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# --- checkpoints ---------------------------------------------------------------------

MAGIC = b"GLP1"
CHECKPOINT_VERSION = 1


def save_mlp(path, net: Mlp) -> None:
    """Binary checkpoint: magic, version, layer sizes, activations, LE float64 payload."""
    sizes = net.sizes
    parts = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(sizes) - 1)]
    parts.append(struct.pack(f"<{len(sizes)}I", *sizes))
    parts.append(bytes(_ACT_CODE[a] for a in net.activations))
    parts.append(struct.pack("<B", int(net.spectral_norm)))
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        parts.append(w.astype("<f8").tobytes())
        parts.append(b.astype("<f8").tobytes())
        if net.spectral_norm:
            parts.append(net.sn_u[i].astype("<f8").tobytes())
            parts.append(net.sn_v[i].astype("<f8").tobytes())
            parts.append(struct.pack("<d", net.sn_sigma[i]))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_mlp(path) -> Mlp:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    version, n_layers = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    sizes = struct.unpack_from(f"<{n_layers + 1}I", buf, off)
    off += 4 * (n_layers + 1)
    acts = [ACTIVATIONS[c] for c in buf[off:off + n_layers]]
    off += n_layers
    sn = bool(buf[off])
    off += 1

    def take(count, shape):
        nonlocal off
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        return arr.reshape(shape)

    net = Mlp([], [], [], sn)
    for fi, fo in zip(sizes[:-1], sizes[1:]):
        net.weights.append(take(fi * fo, (fo, fi)))
        net.biases.append(take(fo, (fo,)))
        if sn:
            net.sn_u.append(take(fo, (fo,)))
            net.sn_v.append(take(fi, (fi,)))
            net.sn_sigma.append(float(take(1, (1,))[0]))
    net.activations = acts
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    net.__post_init__()
    return net
