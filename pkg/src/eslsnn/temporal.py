"""Single-spike feedforward SNN with exponentially decaying synaptic kernels.

Spike times live in the z-domain, ``z = exp(t)``; ``+inf`` means no spike.
A neuron fed by spikes ``z_i`` through weights ``w_i`` first crosses the
unit threshold at::

    z_out = sum_{i in C} w_i z_i / (sum_{i in C} w_i - 1)

where the causal set ``C`` is the shortest time-ordered prefix of inputs
whose weight sum exceeds 1 and whose solution precedes the next input.
Forward and backward are exact; the hot loops live in :mod:`eslsnn.kernels`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import FIRE_TOL, z_backward, z_forward
from .topology import SparseMask, er_init, ErdosRenyiConfig

V_THRESHOLD = 1.0
# stand-in spike time for silent output neurons inside the loss
Z_MAX = float(np.exp(10.0))


@dataclass
class TemporalLayer:
    weights: np.ndarray
    mask: SparseMask | None = None
    name: str = ""

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if self.mask is not None:
            if self.mask.bits.shape != self.weights.shape:
                raise ValueError("mask and weight shapes differ")
            self.weights[~self.mask.bits] = 0.0

    @property
    def shape(self):
        return self.weights.shape


@dataclass
class CausalSet:
    """Per-output causal sets of one forward call (batched)."""

    order: np.ndarray
    n_causal: np.ndarray
    s_w: np.ndarray
    mask_bits: np.ndarray | None = None

    def members(self, j: int, b: int = 0) -> list[int]:
        """Presynaptic indices (in spike order) that caused output ``j``."""
        idx = self.order[b, : self.n_causal[b, j]]
        if self.mask_bits is not None:
            idx = idx[self.mask_bits[idx, j]]
        return [int(i) for i in idx]


def _as_batch(z):
    z = np.asarray(z, dtype=np.float64)
    return (z[None, :], True) if z.ndim == 1 else (z, False)


def validate_z(z):
    z = np.asarray(z, dtype=np.float64)
    finite = np.isfinite(z)
    if np.isnan(z).any() or (z == -np.inf).any():
        raise ValueError("z-domain spike times must be finite or +inf")
    if (z[finite] < 1.0).any():
        raise ValueError("finite z-domain spike times must be >= 1")
    return z


def forward_layer(z_in, layer: TemporalLayer, use_numba=None):
    """First-spike times of a layer's outputs. Accepts one sample or a batch."""
    zb, single = _as_batch(z_in)
    if zb.shape[1] != layer.shape[0]:
        raise ValueError(f"expected {layer.shape[0]} inputs, got {zb.shape[1]}")
    z_out, s_w, n_causal, order = z_forward(zb, layer.weights, FIRE_TOL, use_numba)
    causal = CausalSet(order, n_causal, s_w, None if layer.mask is None else layer.mask.bits)
    return (z_out[0] if single else z_out), causal


def backward_layer(grad_z_out, z_in, z_out, causal: CausalSet, layer: TemporalLayer,
                   dense: bool = False, use_numba=None):
    """Chain ``grad_z_out`` through one layer.

    Returns ``(grad_z_in, grad_weights)`` with ``grad_weights`` summed over the
    batch. Gradients on masked-out weights are zeroed unless ``dense`` is set,
    in which case they hold the derivative the connection *would* have.
    """
    gb, single = _as_batch(grad_z_out)
    zb, _ = _as_batch(z_in)
    ob, _ = _as_batch(z_out)
    grad_in, grad_w = z_backward(
        gb, zb, layer.weights, ob, causal.s_w, causal.n_causal, causal.order, use_numba
    )
    if layer.mask is not None:
        if not dense:
            grad_w[~layer.mask.bits] = 0.0
    return (grad_in[0] if single else grad_in), grad_w


def z_loss(z_out, g):
    """Softmax cross-entropy on negated spike times.

    Accepts a single output vector with an integer class, or a batch with an
    integer array; batch losses are averaged. Silent outputs (``+inf``) are
    replaced by :data:`Z_MAX`. Returns ``(loss, grad_z_out)``.
    """
    z = np.asarray(z_out, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    g = np.atleast_1d(np.asarray(g))
    n_cls = zb.shape[1]
    if g.shape[0] != zb.shape[0] or not np.issubdtype(g.dtype, np.integer):
        raise ValueError("class indices must be integers, one per sample")
    if (g < 0).any() or (g >= n_cls).any():
        raise ValueError(f"class index out of range [0, {n_cls})")
    zc = np.where(np.isfinite(zb), zb, Z_MAX)
    logits = -zc
    shift = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - shift)
    tot = ex.sum(axis=1, keepdims=True)
    rows = np.arange(zb.shape[0])
    losses = np.log(tot[:, 0]) - (logits[rows, g] - shift[:, 0])
    p = ex / tot
    # dL/dz = onehot - softmax(-z)
    grad = -p
    grad[rows, g] += 1.0
    if single:
        return float(losses[0]), grad[0]
    n = zb.shape[0]
    return float(losses.mean()), grad / n


def weight_sum_penalty(weights, coef, z_in=None):
    """``coef * sum_j max(0, 1 - S_j)`` and its gradient w.r.t. ``weights``.

    Without ``z_in``, ``S_j`` is the plain column sum. With a batch of input
    times, ``S_j`` is the weight sum over the inputs that spiked in each
    sample, i.e. the causal weight sum of a neuron that stayed silent, and the
    penalty is averaged over the batch. Neurons that fired have ``S_j > 1``
    and contribute nothing.
    """
    if z_in is None:
        col = weights.sum(axis=0)
        short = col < 1.0
        loss = float(coef * np.sum(1.0 - col[short]))
        grad = np.zeros_like(weights)
        grad[:, short] = -coef
        return loss, grad
    spiked = np.isfinite(_as_batch(z_in)[0]).astype(np.float64)
    n = spiked.shape[0]
    gap = np.maximum(0.0, 1.0 - spiked @ weights)
    loss = float(coef * gap.sum() / n)
    grad = -(coef / n) * (spiked.T @ (gap > 0))
    return loss, grad


def clip_norm(grad, max_norm):
    if max_norm is None or max_norm <= 0:
        return grad
    n = float(np.linalg.norm(grad))
    if n > max_norm:
        grad = grad * (max_norm / n)
    return grad


def init_weights(mask: SparseMask, rng, scale=4.0):
    """Uniform on ``[0, scale / fan_in]`` over active entries, 0 elsewhere.

    ``fan_in`` is the mean number of active inputs per output neuron.
    """
    fan_in = max(1.0, mask.cardinality / mask.n_post)
    w = rng.uniform(0.0, scale / fan_in, size=mask.bits.shape)
    w[~mask.bits] = 0.0
    return w


@dataclass
class TemporalMLP:
    """Fully connected single-spike network, e.g. 784-800-10."""

    layers: list[TemporalLayer]
    weight_reg: float = 1e-2
    sparse: list[bool] = field(default_factory=list)

    @classmethod
    def build(cls, sizes, epsilons, seed, weight_reg=1e-2, init_scale=4.0):
        """``epsilons[k]`` is the ER factor of layer ``k`` or ``None`` for dense."""
        ss = np.random.SeedSequence(seed)
        mask_seeds = ss.spawn(len(sizes) - 1)
        rng = np.random.default_rng(ss.spawn(1)[0])
        layers, sparse = [], []
        for k, (n_pre, n_post) in enumerate(zip(sizes[:-1], sizes[1:])):
            eps = epsilons[k] if k < len(epsilons) else None
            if eps is None:
                mask = SparseMask.dense(n_pre, n_post)
            else:
                mask_seed = int(mask_seeds[k].generate_state(1)[0])
                mask = er_init(n_pre, n_post, ErdosRenyiConfig(eps), mask_seed)
            w = init_weights(mask, rng, init_scale)
            layers.append(TemporalLayer(w, mask, name=f"fc{k + 1}"))
            sparse.append(eps is not None)
        return cls(layers, weight_reg, sparse)

    def forward(self, z_in, use_numba=None):
        acts = [np.asarray(z_in, dtype=np.float64)]
        caches = []
        for layer in self.layers:
            z, c = forward_layer(acts[-1], layer, use_numba)
            acts.append(z)
            caches.append(c)
        return acts, caches

    def predict(self, z_in, use_numba=None):
        acts, _ = self.forward(z_in, use_numba)
        out = np.where(np.isfinite(acts[-1]), acts[-1], Z_MAX)
        return np.argmin(out, axis=-1)

    def loss_and_grads(self, z_in, labels, use_numba=None):
        """Mean loss over the batch and dense per-layer weight gradients."""
        acts, caches = self.forward(z_in, use_numba)
        loss, grad = z_loss(acts[-1], labels)
        grads = [None] * len(self.layers)
        for k in range(len(self.layers) - 1, -1, -1):
            grad, gw = backward_layer(grad, acts[k], acts[k + 1], caches[k], self.layers[k],
                                      dense=True, use_numba=use_numba)
            grads[k] = gw
        if self.weight_reg > 0:
            for k, layer in enumerate(self.layers):
                rl, rg = weight_sum_penalty(layer.weights, self.weight_reg, acts[k])
                loss += rl
                grads[k] = grads[k] + rg
        return loss, grads, acts[-1]
