"""RealNVP flow over flat vectors.

Each coupling layer splits its input into contiguous halves
``[0, d/2)`` and ``[d/2, d)``.  Even layers transform the second half
conditioned on the first, odd layers the reverse.  The forward direction
maps latent to ambient space:

    x2' = x2 * exp(s(x1)) + t(x1),    log|det J| = sum(s(x1))

Densities are natural-log (nats).  All log-determinants are accumulated in
float64 regardless of the model's working precision.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore
from .errors import DivergedError, ShapeError
from .nncore import GradTape, Mlp, mlp_backward, mlp_forward

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class CouplingLayer:
    net: Mlp
    parity: int  # 0: condition on first half; 1: condition on second half

    def halves(self, dim: int):
        h = dim // 2
        first, second = slice(0, h), slice(h, dim)
        return (first, second) if self.parity == 0 else (second, first)


@dataclass
class FlowModel:
    layers: list[CouplingLayer]
    dim: int
    hidden: tuple[int, ...]
    dtype: np.dtype = np.dtype(np.float64)

    def __post_init__(self):
        if self.dim % 2:
            raise ShapeError(f"flow dimension must be even, got {self.dim}")
        for i, layer in enumerate(self.layers):
            if layer.parity != i % 2:
                raise ShapeError("coupling parities must alternate")
        self.dtype = np.dtype(self.dtype)

    @classmethod
    def create(cls, dim=126, n_layers=12, hidden=(256, 256, 256, 256), seed=0,
               dtype=np.float64, output_scale=0.0):
        """Fresh model.  With ``output_scale=0`` every layer is the identity."""
        rng = np.random.default_rng(seed)
        half = dim // 2
        layers = [
            CouplingLayer(Mlp.create(half, hidden, half, rng, dtype, output_scale), i % 2)
            for i in range(n_layers)
        ]
        return cls(layers, dim, tuple(hidden), np.dtype(dtype))

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def hyperparameters(self) -> dict:
        return {
            "dim": self.dim,
            "n_layers": self.n_layers,
            "hidden": list(self.hidden),
            "dtype": self.dtype.name,
            "negative_slope": self.layers[0].net.negative_slope if self.layers else nncore.NEGATIVE_SLOPE,
            "s_max": self.layers[0].net.s_max if self.layers else nncore.S_MAX,
        }

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += layer.net.params()
        return out

    def copy(self) -> FlowModel:
        clone = FlowModel.create(self.dim, self.n_layers, self.hidden, dtype=self.dtype)
        for dst, src in zip(clone.params(), self.params()):
            dst[...] = src
        return clone


@dataclass
class DensityResult:
    """``log_prob = standard_normal_logpdf(z) + log_det`` (inverse direction)."""

    log_prob: np.ndarray
    log_det: np.ndarray
    z: np.ndarray


def standard_normal_logpdf(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return -0.5 * (z.shape[-1] * LOG_2PI + np.sum(z * z, axis=-1))


def _as_batch(x, dim, dtype):
    x = np.asarray(x)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"expected vectors of length {dim}, got shape {x.shape}")
    return x.astype(dtype, copy=False), single


def _st(layer, cond, tape=None):
    s, t = mlp_forward(layer.net, cond, tape)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
        raise DivergedError()
    return s, t


def _coupling_fwd(layer, x):
    cond, moved = layer.halves(x.shape[1])
    s, t = _st(layer, x[:, cond])
    out = x.copy()
    out[:, moved] = x[:, moved] * np.exp(s) + t
    return out, s.astype(np.float64).sum(axis=1)


def _coupling_inv(layer, y, tape=None):
    cond, moved = layer.halves(y.shape[1])
    s, t = _st(layer, y[:, cond], tape)
    out = y.copy()
    out[:, moved] = (y[:, moved] - t) * np.exp(-s)
    return out, -s.astype(np.float64).sum(axis=1)


def _unbatch(x, ld, single):
    return (x[0], float(ld[0])) if single else (x, ld)


def coupling_forward(layer: CouplingLayer, x):
    """Apply one layer in the latent-to-ambient direction: ``(x', log_det)``."""
    x, single = _as_batch(x, 2 * layer.net.in_width, layer.net.layers[0].weights.dtype)
    return _unbatch(*_coupling_fwd(layer, x), single)


def coupling_inverse(layer: CouplingLayer, y):
    """Exact inverse of :func:`coupling_forward`; the log-det is negated."""
    y, single = _as_batch(y, 2 * layer.net.in_width, layer.net.layers[0].weights.dtype)
    return _unbatch(*_coupling_inv(layer, y), single)


def flow_forward(model: FlowModel, z):
    """``x = T(z)`` with the summed forward log-determinant."""
    x, single = _as_batch(z, model.dim, model.dtype)
    total = np.zeros(x.shape[0])
    for layer in model.layers:
        x, ld = _coupling_fwd(layer, x)
        total += ld
    return _unbatch(x, total, single)


def flow_inverse(model: FlowModel, x):
    """``z = T^-1(x)`` with the summed inverse log-determinant."""
    z, single = _as_batch(x, model.dim, model.dtype)
    total = np.zeros(z.shape[0])
    for layer in reversed(model.layers):
        z, ld = _coupling_inv(layer, z)
        total += ld
    return _unbatch(z, total, single)


def log_prob(model: FlowModel, x) -> DensityResult:
    """Log-density of ambient vectors by change of variables (nats)."""
    z, ld = flow_inverse(model, x)
    lp = standard_normal_logpdf(z) + ld
    if np.ndim(lp) == 0:
        lp = float(lp)
    return DensityResult(lp, ld, z)


def sample(model: FlowModel, n: int, rng: np.random.Generator):
    """Draw ``n`` ambient samples with their log-density.

    The density comes out of the same forward pass that produces the
    sample, ``log N(z) - forward log_det``, so no inverse pass is needed.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    z = rng.standard_normal((n, model.dim))
    x, ld = flow_forward(model, z)
    return x, standard_normal_logpdf(z) - ld


def loss_and_grads(model: FlowModel, batch, weights=None):
    """Mean negative log-density of a batch and its parameter gradients.

    Gradients follow the order of :meth:`FlowModel.params`.  ``weights``
    optionally replaces the uniform ``1/batch`` averaging.
    """
    x, _ = _as_batch(batch, model.dim, model.dtype)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)

    records = []
    z = x
    total = np.zeros(n)
    for layer in reversed(model.layers):
        tape = GradTape()
        y = z
        z, ld = _coupling_inv(layer, y, tape)
        records.append((layer, tape, z))
        total += ld
    lp = standard_normal_logpdf(z) + total
    loss = -float(np.dot(w, lp))
    if not np.isfinite(loss):
        raise DivergedError()

    # dloss/dz of -sum w*logN(z) is w*z; dloss/dlog_det is -w per sample.
    wcol = w[:, None].astype(model.dtype)
    g = wcol * z
    g_ld = -wcol
    per_layer = []
    # records run last-layer-first; walk them back so layer 0 comes first.
    for layer, tape, out in records[::-1]:
        cond, moved = layer.halves(model.dim)
        s = tape.s
        g_out_moved = g[:, moved]
        e = np.exp(-s)
        g_t = -g_out_moved * e
        g_s = -g_out_moved * out[:, moved] - g_ld
        pgrads, g_cond = mlp_backward(tape, g_s, g_t)
        g_in = np.empty_like(g)
        g_in[:, moved] = g_out_moved * e
        g_in[:, cond] = g[:, cond] + g_cond
        g = g_in
        per_layer.append(pgrads)
    grads = [gp for pg in per_layer for gp in pg]
    return loss, grads
