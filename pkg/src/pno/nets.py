"""Fully-connected networks with hand-written reverse-mode gradients.

Parameters live in one flat float64 vector. For every layer, in order from
input to output, the layout is::

    W  (out x in, row-major) | b (out) | s (1, hidden layers only, adaptive nets)

The forward pass can optionally carry input tangents (forward-mode columns of
the input Jacobian). ``backward`` then differentiates any scalar function of
the outputs *and* of those tangents with respect to the parameters, which is
what physics-informed losses built on value gradients need.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "sine", "relu")


class InvalidShapeError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Activation:
    kind: str = "tanh"
    adaptive: bool = False
    omega0: float = 30.0  # sine frequency, sin(omega0 * x)

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}")

    def derivs(self, a: np.ndarray, order: int):
        """Return (sigma, sigma', sigma'') up to ``order`` evaluated at ``a``."""
        if self.kind == "tanh":
            s = np.tanh(a)
            if order == 0:
                return s, None, None
            d1 = 1.0 - s * s
            return s, d1, (-2.0 * s * d1 if order > 1 else None)
        if self.kind == "sine":
            w = self.omega0
            wa = w * a
            s = np.sin(wa)
            if order == 0:
                return s, None, None
            d1 = w * np.cos(wa)
            return s, d1, (-w * w * s if order > 1 else None)
        s = np.maximum(a, 0.0)
        if order == 0:
            return s, None, None
        d1 = (a > 0).astype(float)
        return s, d1, (np.zeros_like(a) if order > 1 else None)


@dataclass(frozen=True)
class NetworkShape:
    input_dim: int
    output_dim: int
    hidden_widths: tuple = (64, 64, 64)

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        dims = (self.input_dim, *self.hidden_widths, self.output_dim)
        if any(int(d) <= 0 for d in dims):
            raise InvalidShapeError(f"all dimensions must be positive, got {dims}")

    @property
    def dims(self) -> tuple:
        return (self.input_dim, *self.hidden_widths, self.output_dim)


@dataclass(frozen=True)
class LayerSlices:
    W: slice
    b: slice
    s: int | None  # index of the slope scalar, None if not adaptive / output layer
    shape: tuple


@dataclass
class _Cache:
    hs: list = field(default_factory=list)       # layer inputs h_{l-1}
    hdots: list = field(default_factory=list)    # tangent inputs (B, nt, width) or None
    zs: list = field(default_factory=list)       # affine outputs z_l
    zdots: list = field(default_factory=list)
    acts: list = field(default_factory=list)     # (sigma', sigma'') per hidden layer


class MLP:
    """A tanh/sine/relu multilayer perceptron over a flat parameter vector."""

    def __init__(self, shape: NetworkShape, act: Activation = Activation()):
        self.shape = shape
        self.act = act
        self.layers: list[LayerSlices] = []
        pos = 0
        dims = shape.dims
        n_layers = len(dims) - 1
        for l in range(n_layers):
            fan_in, fan_out = dims[l], dims[l + 1]
            w = slice(pos, pos + fan_out * fan_in)
            pos += fan_out * fan_in
            b = slice(pos, pos + fan_out)
            pos += fan_out
            s = None
            if act.adaptive and l < n_layers - 1:
                s = pos
                pos += 1
            self.layers.append(LayerSlices(w, b, s, (fan_out, fan_in)))
        self.n_params = pos

    # -- parameters ---------------------------------------------------------

    def init(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        p = np.zeros(self.n_params)
        for l, layer in enumerate(self.layers):
            fan_out, fan_in = layer.shape
            if self.act.kind == "sine":
                if l == 0:
                    lim = 1.0 / fan_in
                else:
                    lim = np.sqrt(6.0 / fan_in) / self.act.omega0
            else:
                lim = np.sqrt(6.0 / (fan_in + fan_out))
            p[layer.W] = rng.uniform(-lim, lim, size=fan_out * fan_in)
            p[layer.b] = 0.0
            if layer.s is not None:
                p[layer.s] = 1.0
        return p

    def unflatten(self, params: np.ndarray) -> list:
        """Views (W, b, s) per layer; s is None when the slope is fixed."""
        self._check_params(params)
        out = []
        for layer in self.layers:
            W = params[layer.W].reshape(layer.shape)
            s = params[layer.s] if layer.s is not None else None
            out.append((W, params[layer.b], s))
        return out

    def flatten(self, blocks: list) -> np.ndarray:
        p = np.zeros(self.n_params)
        for layer, (W, b, s) in zip(self.layers, blocks):
            p[layer.W] = np.asarray(W, float).ravel()
            p[layer.b] = b
            if layer.s is not None:
                p[layer.s] = s
        return p

    def _check_params(self, params):
        if params.shape != (self.n_params,):
            raise DimensionMismatchError(
                f"expected {self.n_params} parameters, got {params.shape}")

    # -- evaluation ---------------------------------------------------------

    def run(self, params: np.ndarray, X: np.ndarray, tangents: np.ndarray | None = None,
            keep: bool = False):
        """Batched forward pass.

        X has shape (B, input_dim). ``tangents`` (nt, input_dim) are input-space
        directions shared by all rows; when given, also returns dY with shape
        (B, nt, output_dim). Returns (Y, dY, cache).
        """
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.shape.input_dim:
            raise DimensionMismatchError(
                f"input must be (B, {self.shape.input_dim}), got {X.shape}")
        blocks = self.unflatten(params)
        if tangents is not None and keep:
            order = 2
        elif tangents is not None or keep:
            order = 1
        else:
            order = 0
        cache = _Cache() if keep else None
        h = X
        hdot = None
        if tangents is not None:
            tangents = np.asarray(tangents, float)
            hdot = np.broadcast_to(tangents, (X.shape[0],) + tangents.shape)
        last = len(blocks) - 1
        for l, (W, b, s) in enumerate(blocks):
            z = h @ W.T + b
            zdot = hdot @ W.T if hdot is not None else None
            if keep:
                cache.hs.append(h)
                cache.hdots.append(hdot)
                cache.zs.append(z)
                cache.zdots.append(zdot)
            if l == last:
                h, hdot = z, zdot
                break
            a = z * s if s is not None else z
            sig, d1, d2 = self.act.derivs(a, order)
            if keep:
                cache.acts.append((d1, d2))
            h = sig
            if zdot is not None:
                g = d1 * s if s is not None else d1
                hdot = g[:, None, :] * zdot
        return h, hdot, cache

    def backward(self, params: np.ndarray, cache: _Cache, Ybar: np.ndarray | None,
                 dYbar: np.ndarray | None = None, want_input: bool = False):
        """Reverse sweep for a scalar loss with dloss/dY = Ybar, dloss/d(dY) = dYbar.

        Returns the flat parameter gradient, and the input adjoint (B, input_dim)
        if ``want_input`` (ignores the tangent path, i.e. only valid for
        dYbar=None).
        """
        blocks = self.unflatten(params)
        grad = np.zeros(self.n_params)
        B = cache.hs[0].shape[0]
        hbar = Ybar if Ybar is not None else np.zeros((B, self.shape.output_dim))
        hdbar = dYbar
        last = len(blocks) - 1
        for l in range(last, -1, -1):
            W, b, s = blocks[l]
            layer = self.layers[l]
            if l == last:
                zbar, zdbar = hbar, hdbar
            else:
                z = cache.zs[l]
                zdot = cache.zdots[l]
                d1, d2 = cache.acts[l]
                scale = s if s is not None else 1.0
                abar = hbar * d1
                zdbar = None
                sbar = 0.0
                if hdbar is not None:
                    # hdot = sigma'(a) * s * zdot
                    contr = np.einsum("bjw,bjw->bw", hdbar, zdot)
                    abar = abar + scale * d2 * contr
                    zdbar = (d1 * scale)[:, None, :] * hdbar
                    if s is not None:
                        sbar += float(np.sum(d1 * contr))
                zbar = abar * scale
                if s is not None:
                    sbar += float(np.sum(abar * z))
                    grad[layer.s] = sbar
            h_prev = cache.hs[l]
            gW = zbar.T @ h_prev
            hd_prev = cache.hdots[l]
            if zdbar is not None and hd_prev is not None:
                nt = zdbar.shape[1]
                gW += zdbar.reshape(B * nt, -1).T @ np.ascontiguousarray(hd_prev).reshape(B * nt, -1)
            grad[layer.W] = gW.ravel()
            grad[layer.b] = zbar.sum(axis=0)
            if l > 0 or want_input:
                hbar = zbar @ W
                hdbar = zdbar @ W if zdbar is not None else None
        if want_input:
            return grad, hbar
        return grad


# -- function-style API ------------------------------------------------------

def init_network(shape: NetworkShape, act: Activation, seed: int) -> np.ndarray:
    return MLP(shape, act).init(seed)


def forward(params: np.ndarray, net: MLP, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, float)
    if x.shape != (net.shape.input_dim,):
        raise DimensionMismatchError(f"input length {x.shape} != {net.shape.input_dim}")
    y, _, _ = net.run(params, x[None, :])
    return y[0]


def input_gradient(params: np.ndarray, net: MLP, x: np.ndarray) -> np.ndarray:
    """Jacobian (output_dim x input_dim) via one reverse sweep per output."""
    x = np.asarray(x, float)
    if x.shape != (net.shape.input_dim,):
        raise DimensionMismatchError(f"input length {x.shape} != {net.shape.input_dim}")
    m = net.shape.output_dim
    _, _, cache = net.run(params, np.repeat(x[None, :], m, axis=0), keep=True)
    _, xbar = net.backward(params, cache, np.eye(m), want_input=True)
    return xbar


def parameter_gradient(params: np.ndarray, net: MLP, x: np.ndarray,
                       adjoint: np.ndarray) -> np.ndarray:
    """Gradient of <adjoint, forward(x)> with respect to every parameter."""
    x = np.asarray(x, float)
    adjoint = np.asarray(adjoint, float)
    if x.shape != (net.shape.input_dim,):
        raise DimensionMismatchError(f"input length {x.shape} != {net.shape.input_dim}")
    if adjoint.shape != (net.shape.output_dim,):
        raise DimensionMismatchError(f"adjoint length {adjoint.shape} != {net.shape.output_dim}")
    _, _, cache = net.run(params, x[None, :], keep=True)
    return net.backward(params, cache, adjoint[None, :])


# -- Adam --------------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    learning_rate: float
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, learning_rate: float, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), learning_rate, **kw)


def optimizer_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
                   learning_rate: float | None = None):
    """One bias-corrected Adam update. Returns (new_params, new_state)."""
    grads = np.asarray(grads, float)
    if grads.shape != params.shape:
        raise DimensionMismatchError(f"gradient shape {grads.shape} != {params.shape}")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradientError(
            f"{int(np.sum(~np.isfinite(grads)))} non-finite gradient entries")
    lr = state.learning_rate if learning_rate is None else learning_rate
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    mhat = m / (1.0 - state.beta1 ** t)
    vhat = v / (1.0 - state.beta2 ** t)
    new = params - lr * mhat / (np.sqrt(vhat) + state.eps)
    return new, AdamState(m, v, state.learning_rate, t, state.beta1, state.beta2, state.eps)
