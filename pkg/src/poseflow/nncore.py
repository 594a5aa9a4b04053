"""Small dense networks with a hand-written backward pass, and Adam.

The only network shape needed here is the coupling-layer hypernet: a
leaky-ReLU trunk ending in one linear layer whose output is split into a
log-scale head ``s`` and a shift head ``t``.  ``s`` is bounded by
``s_max * tanh(raw / s_max)``.

Everything works on batches: inputs are ``(batch, in_width)`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergedError, ShapeError, TapeReuseError

NEGATIVE_SLOPE = 0.01
S_MAX = 5.0


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)

    def __post_init__(self):
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"inconsistent dense layer shapes {self.weights.shape} / {self.biases.shape}"
            )

    @property
    def in_width(self) -> int:
        return self.weights.shape[1]

    @property
    def out_width(self) -> int:
        return self.weights.shape[0]


@dataclass
class Mlp:
    """Leaky-ReLU trunk with an ``(s, t)`` output split.

    The last layer has ``s_width + t_width`` outputs; the first ``s_width``
    are the log-scale head.
    """

    layers: list[DenseLayer]
    s_width: int
    t_width: int
    negative_slope: float = NEGATIVE_SLOPE
    s_max: float = S_MAX

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_width != nxt.in_width:
                raise ShapeError("consecutive layer widths do not chain")
        if self.layers[-1].out_width != self.s_width + self.t_width:
            raise ShapeError("output width must equal s_width + t_width")

    @classmethod
    def create(cls, in_width, hidden, out_half, rng, dtype=np.float64, output_scale=0.0):
        """Fan-in scaled uniform init for hidden layers.

        The output layer is drawn from ``U(-output_scale, output_scale)``;
        the default of zero makes the network output ``s = t = 0``.
        """
        widths = [in_width, *hidden]
        layers = []
        gain = np.sqrt(2.0 / (1.0 + NEGATIVE_SLOPE**2))
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = gain * np.sqrt(3.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in), size=fan_out)
            layers.append(DenseLayer(w.astype(dtype), b.astype(dtype)))
        shape = (2 * out_half, widths[-1])
        if output_scale:
            w = rng.uniform(-output_scale, output_scale, size=shape)
            b = rng.uniform(-output_scale, output_scale, size=2 * out_half)
        else:
            w, b = np.zeros(shape), np.zeros(2 * out_half)
        layers.append(DenseLayer(w.astype(dtype), b.astype(dtype)))
        return cls(layers, out_half, out_half)

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.biases]
        return out


@dataclass
class GradTape:
    """Activations recorded by one :func:`mlp_forward` call."""

    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    s: np.ndarray | None = None
    mlp: Mlp | None = None
    used: bool = False


def mlp_forward(m: Mlp, x, tape: GradTape | None = None):
    """Evaluate the hypernet on a ``(batch, in_width)`` array, returning ``(s, t)``."""
    h = np.asarray(x)
    if h.ndim != 2 or h.shape[1] != m.in_width:
        raise ShapeError(f"expected (batch, {m.in_width}) input, got shape {h.shape}")
    if tape is not None:
        tape.mlp = m
    last = len(m.layers) - 1
    for i, layer in enumerate(m.layers):
        if tape is not None:
            tape.inputs.append(h)
        pre = h @ layer.weights.T + layer.biases
        if i == last:
            h = pre
        else:
            if tape is not None:
                tape.pre.append(pre)
            h = np.where(pre > 0, pre, m.negative_slope * pre)
    s = m.s_max * np.tanh(h[:, : m.s_width] / m.s_max)
    t = h[:, m.s_width :]
    if tape is not None:
        tape.s = s
    return s, t


def mlp_backward(tape: GradTape, grad_s, grad_t):
    """Backpropagate through a recorded forward pass.

    Returns ``(param_grads, grad_input)`` where ``param_grads`` follows the
    order of :meth:`Mlp.params`.  Parameter gradients are summed over the
    batch.  A tape can only be consumed once.
    """
    if tape.used:
        raise TapeReuseError("gradient tape already consumed")
    if tape.mlp is None:
        raise TapeReuseError("gradient tape was never recorded")
    tape.used = True
    m = tape.mlp
    g_raw_s = grad_s * (1.0 - (tape.s / m.s_max) ** 2)
    g = np.concatenate([g_raw_s, grad_t], axis=1)
    grads = []
    for i in range(len(m.layers) - 1, -1, -1):
        layer = m.layers[i]
        grads.append(g.sum(axis=0))
        grads.append(g.T @ tape.inputs[i])
        g = g @ layer.weights
        if i > 0:
            g = np.where(tape.pre[i - 1] > 0, g, m.negative_slope * g)
    grads.reverse()
    return grads, g


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergedError()
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state
