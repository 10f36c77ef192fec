"""Dense GELU MLP with forward-mode input tangents and reverse-mode weight gradients.

The network maps embedded coordinates to three outputs.  Alongside the values,
``forward_with_tangents`` pushes three tangent columns (derivatives w.r.t. the
three spatial coordinates) through every layer.  ``backward`` then runs reverse
mode over that combined computation, so losses may depend on the tangents.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

# python floats so float32 arrays are not promoted
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact GELU ``x * Phi(x)`` with Phi the standard normal CDF."""
    return x * (0.5 * (1.0 + erf(x * _INV_SQRT2)))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def gelu_grad2(x):
    # phi'(x) = -x phi(x), so 2 phi + x phi' = phi (2 - x^2)
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return pdf * (2.0 - x * x)


def _gelu_all(z):
    """Return gelu, gelu' and gelu'' sharing the erf/exp evaluations."""
    cdf = 0.5 * (1.0 + erf(z * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * z * z)
    return z * cdf, cdf + z * pdf, pdf * (2.0 - z * z)


@dataclass
class MlpWeights:
    """Layer list of ``(W, b)`` with ``W`` shaped ``(out, in)``.

    The last layer is linear; every other layer is followed by GELU.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def init(cls, n_in: int, width: int, depth: int, n_out: int = 3, seed: int = 0, dtype=np.float32):
        """Glorot-uniform weights and zero biases; ``depth`` counts hidden layers."""
        if depth < 1 or width < 1:
            raise ValueError("depth and width must be >= 1")
        rng = np.random.default_rng(seed)
        sizes = [n_in] + [width] * depth + [n_out]
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-lim, lim, size=(fan_out, fan_in)).astype(dtype)
            layers.append((W, np.zeros(fan_out, dtype=dtype)))
        return cls(layers)

    @property
    def depth(self) -> int:
        return len(self.layers) - 1

    @property
    def width(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def n_in(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def n_out(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def dtype(self):
        return self.layers[0][0].dtype

    def astype(self, dtype) -> "MlpWeights":
        return MlpWeights([(W.astype(dtype), b.astype(dtype)) for W, b in self.layers])

    def copy(self) -> "MlpWeights":
        return MlpWeights([(W.copy(), b.copy()) for W, b in self.layers])

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer]

    def validate(self) -> None:
        prev = None
        for W, b in self.layers:
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"bad layer shapes {W.shape}, {b.shape}")
            if prev is not None and W.shape[1] != prev:
                raise ValueError(f"layer input {W.shape[1]} does not match previous output {prev}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError("non-finite weights")
            prev = W.shape[0]


@dataclass
class TangentBundle:
    """Outputs and their derivatives w.r.t. the three input coordinates.

    ``values`` is ``(batch, out)``; ``tangents`` is ``(batch, out, 3)``.
    ``tape`` holds the intermediates ``backward`` needs.
    """

    values: np.ndarray
    tangents: np.ndarray
    tape: list = field(default=None, repr=False)


def forward(weights: MlpWeights, x: np.ndarray) -> np.ndarray:
    """Plain forward pass."""
    h = x
    for W, b in weights.layers[:-1]:
        h = gelu(h @ W.T + b)
    W, b = weights.layers[-1]
    return h @ W.T + b


def forward_with_tangents(weights: MlpWeights, x: np.ndarray, dx: np.ndarray) -> TangentBundle:
    """Forward pass carrying input tangents.

    ``x`` is ``(batch, n_in)`` and ``dx`` is ``(batch, n_in, 3)``.  Values are
    computed with exactly the same operations as :func:`forward`.
    """
    if x.ndim != 2 or x.shape[1] != weights.n_in:
        raise ValueError(f"input shape {x.shape} does not match n_in={weights.n_in}")
    if dx.shape != x.shape + (3,):
        raise ValueError(f"tangent shape {dx.shape} != {x.shape + (3,)}")
    # values and the three tangent directions share one stacked array (4, batch, features);
    # values get their own product so they round exactly like forward()
    n = x.shape[0]
    stack = np.empty((4,) + x.shape, dtype=np.result_type(x, dx))
    stack[0] = x
    stack[1:] = np.moveaxis(dx, -1, 0)
    tape = []
    for W, b in weights.layers:
        z = np.empty((4, n, W.shape[0]), dtype=stack.dtype)
        z[0] = stack[0] @ W.T + b
        z[1:] = (stack[1:].reshape(3 * n, -1) @ W.T).reshape(3, n, -1)
        if len(tape) == len(weights.layers) - 1:
            tape.append((stack,))
            return TangentBundle(z[0], np.moveaxis(z[1:], 0, -1), tape)
        g, g1, g2 = _gelu_all(z[0])
        tape.append((stack, z, g1, g2))
        stack = np.empty_like(z)
        stack[0] = g
        np.multiply(g1, z[1:], out=stack[1:])


def backward(
    weights: MlpWeights, bundle: TangentBundle, grad_values: np.ndarray | None, grad_tangents: np.ndarray | None
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradients of a scalar loss w.r.t. every ``(W, b)``.

    ``grad_values`` and ``grad_tangents`` are the loss derivatives w.r.t.
    ``bundle.values`` and ``bundle.tangents``; either may be ``None`` (zero).
    """
    (stack,) = bundle.tape[-1]
    n = stack.shape[1]
    g = np.zeros((4,) + bundle.values.shape, dtype=stack.dtype)
    if grad_values is not None:
        g[0] = grad_values
    if grad_tangents is not None:
        g[1:] = np.moveaxis(np.asarray(grad_tangents), -1, 0)

    grads = [None] * len(weights.layers)
    for idx in range(len(weights.layers) - 1, -1, -1):
        W, _ = weights.layers[idx]
        flat_g = g.reshape(4 * n, -1)
        grads[idx] = (flat_g.T @ stack.reshape(4 * n, -1), g[0].sum(axis=0))
        if idx == 0:
            break
        g_in = (flat_g @ W).reshape(4, n, -1)
        stack, z, g1, g2 = bundle.tape[idx - 1]
        # h = gelu(z0), dh = gelu'(z0) * dz  =>  pull back to (z0, dz)
        g = np.empty_like(g_in)
        g[0] = g_in[0] * g1 + g2 * np.einsum("dnk,dnk->nk", g_in[1:], z[1:])
        np.multiply(g_in[1:], g1, out=g[1:])
    return grads


@dataclass
class AdamState:
    """Bias-corrected Adam moments for an :class:`MlpWeights`."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, weights: MlpWeights) -> "AdamState":
        ps = weights.params()
        return cls([np.zeros_like(p) for p in ps], [np.zeros_like(p) for p in ps])


def adam_step(state: AdamState, weights: MlpWeights, grads, lr: float) -> tuple[MlpWeights, AdamState]:
    """One Adam update; returns new weights and state, inputs are left untouched."""
    flat_g = [g for pair in grads for g in pair]
    params = weights.params()
    if len(flat_g) != len(params):
        raise ValueError("gradient structure does not match weights")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, flat_g, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        upd = (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
        new_p.append(p - upd)
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    layers = [(new_p[2 * i], new_p[2 * i + 1]) for i in range(len(new_p) // 2)]
    return MlpWeights(layers), AdamState(new_m, new_v, step, b1, b2, state.eps)
