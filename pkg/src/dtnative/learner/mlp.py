"""Dense feed-forward network with exact reverse-mode gradients, and Adam."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionMismatch, ShapeMismatch

ACTIVATIONS = ("relu", "tanh", "identity")


class Mlp:
    """Layers of ``act(x @ W.T + b)``; ``W`` has shape (out, in).

    Inputs are a vector ``(in,)`` or a batch ``(n, in)``. ``backward`` uses the
    activations cached by the most recent ``forward``.
    """

    def __init__(self, layers):
        self.layers = []
        for w, b, act in layers:
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionMismatch(f"weights {w.shape} and biases {b.shape} disagree")
            if self.layers and self.layers[-1][0].shape[0] != w.shape[1]:
                raise DimensionMismatch(
                    f"layer input {w.shape[1]} != previous output {self.layers[-1][0].shape[0]}")
            self.layers.append((w, b, act))
        self._cache = None

    @classmethod
    def init(cls, sizes, activations, rng):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        if len(activations) != len(sizes) - 1:
            raise DimensionMismatch("one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            lim = 1.0 / np.sqrt(fan_in)
            layers.append((rng.uniform(-lim, lim, (fan_out, fan_in)),
                           rng.uniform(-lim, lim, fan_out), act))
        return cls(layers)

    @property
    def in_dim(self):
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self):
        return self.layers[-1][0].shape[0]

    @property
    def shapes(self):
        return [(w.shape, b.shape, act) for w, b, act in self.layers]

    def params(self):
        """Flat list ``[W0, b0, W1, b1, ...]`` of the live arrays."""
        out = []
        for w, b, _ in self.layers:
            out += [w, b]
        return out

    def copy(self):
        return Mlp([(w.copy(), b.copy(), act) for w, b, act in self.layers])

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise DimensionMismatch(f"input dim {x.shape} != {self.in_dim}")
        inputs, outs = [], []
        for w, b, act in self.layers:
            inputs.append(h)
            z = h @ w.T + b
            if act == "relu":
                h = np.maximum(z, 0.0)
            elif act == "tanh":
                h = np.tanh(z)
            else:
                h = z
            outs.append((z, h))
        self._cache = (single, inputs, outs)
        return h[0] if single else h

    __call__ = forward

    def backward(self, upstream):
        """Gradients of ``sum(output * upstream)``.

        Returns ``(grads, dx)``: grads aligned with :meth:`params`, and the
        gradient with respect to the input.
        """
        if self._cache is None:
            raise RuntimeError("backward needs a cached forward pass")
        single, inputs, outs = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        g = g[None, :] if single else g
        if g.shape != outs[-1][1].shape:
            raise DimensionMismatch(f"upstream {g.shape} != output {outs[-1][1].shape}")
        grads = [None] * (2 * len(self.layers))
        for k in range(len(self.layers) - 1, -1, -1):
            w, _, act = self.layers[k]
            z, h = outs[k]
            if act == "relu":
                g = g * (z > 0.0)
            elif act == "tanh":
                g = g * (1.0 - h * h)
            grads[2 * k] = g.T @ inputs[k]
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ w
        return grads, (g[0] if single else g)


def check_same_shapes(a: Mlp, b: Mlp):
    if len(a.layers) != len(b.layers) or any(
            x.shape != y.shape for x, y in zip(a.params(), b.params())):
        raise ShapeMismatch(f"{a.shapes} vs {b.shapes}")


class AdamState:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def copy(self):
        s = AdamState([], self.beta1, self.beta2, self.eps)
        s.m = [m.copy() for m in self.m]
        s.v = [v.copy() for v in self.v]
        s.t = self.t
        return s


def adam_step(params, grads, state: AdamState, lr: float):
    """Pure Adam update with bias correction: returns ``(params', state')``."""
    new_state = state.copy()
    new_params = [p.copy() for p in params]
    adam_update_(new_params, grads, new_state, lr)
    return new_params, new_state


def adam_update_(params, grads, state: AdamState, lr: float):
    """In-place variant of :func:`adam_step`."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and optimizer state disagree")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatch(f"param {p.shape} vs grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
