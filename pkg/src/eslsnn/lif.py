"""Iterative LIF networks trained with surrogate gradients (BPTT) and TET.

Tensors carry time first: ``(T, B, ...)``. Stateless layers (dense, conv,
pooling) fold time into the batch axis; only :class:`LifLayer` and the
readout accumulator look across time.

Weight matrices of dense and conv layers share one layout, ``(n_pre,
n_post)``; for a conv layer ``n_pre = c_in * k_h * k_w`` (row index
``(c, dy, dx)`` in C order) and ``n_post = c_out``. Masks use the same shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .topology import ErdosRenyiConfig, SparseMask, er_init


@dataclass(frozen=True)
class LifConfig:
    tau: float = 0.5
    v_th: float = 1.0
    surrogate_width: float = 1.0

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.v_th <= 0 or self.surrogate_width <= 0:
            raise ValueError("v_th and surrogate_width must be positive")


def heaviside(x):
    return (np.asarray(x) >= 0).astype(np.float64)


def lif_step(u_prev, current, cfg: LifConfig = LifConfig()):
    """One Euler step: leak, integrate, fire, hard reset to 0.

    Returns ``(a_next, u_next)``.
    """
    v = cfg.tau * np.asarray(u_prev, dtype=np.float64) + current
    a = heaviside(v - cfg.v_th)
    return a, v * (1.0 - a)


def surrogate_grad(v_minus_vth, cfg: LifConfig = LifConfig()):
    """Rectangular stand-in for the Heaviside derivative (unit area)."""
    x = np.asarray(v_minus_vth, dtype=np.float64)
    g = cfg.surrogate_width
    return np.where(np.abs(x) < g / 2.0, 1.0 / g, 0.0)


def _masked(weights, mask):
    if mask is None:
        return weights
    bits = mask.bits if isinstance(mask, SparseMask) else np.asarray(mask, dtype=bool)
    return weights * bits


def masked_dense_forward(x, weights, mask=None):
    """``I = x @ (M * W)`` over the last axis of ``x``."""
    w = _masked(weights, mask)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"input width {x.shape[-1]} != weight rows {w.shape[0]}")
    return x @ w


def _pad_amount(k, padding):
    if padding == "same":
        return k // 2
    if padding == "valid":
        return 0
    raise ValueError(f"unknown padding {padding!r}")


def im2col(x, kernel, padding):
    """``(N, C, H, W)`` -> ``(N, Ho, Wo, C * kh * kw)`` patch matrix."""
    kh, kw = kernel
    ph, pw = _pad_amount(kh, padding), _pad_amount(kw, padding)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N, C, Ho, Wo, kh, kw
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)


def col2im(cols, x_shape, kernel, padding):
    """Adjoint of :func:`im2col` (sums overlapping patches)."""
    n, c, h, w = x_shape
    kh, kw = kernel
    ph, pw = _pad_amount(kh, padding), _pad_amount(kw, padding)
    _, ho, wo, _ = cols.shape
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for dy in range(kh):
        for dx in range(kw):
            out[:, :, dy:dy + ho, dx:dx + wo] += cols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
    return out[:, :, ph:ph + h, pw:pw + w]


def masked_conv_forward(x, weights, mask=None, kernel=(3, 3), padding="same"):
    """Stride-1 2-D cross-correlation with a masked kernel.

    ``x`` is ``(N, C_in, H, W)``; ``weights`` is ``(C_in*kh*kw, C_out)``.
    Returns ``(N, C_out, Ho, Wo)``.
    """
    w = _masked(weights, mask)
    cols = im2col(x, kernel, padding)
    if cols.shape[-1] != w.shape[0]:
        raise ValueError(f"patch size {cols.shape[-1]} != weight rows {w.shape[0]}")
    return (cols @ w).transpose(0, 3, 1, 2)


def avg_pool2(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("avg_pool2 needs even spatial dims")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2_backward(g):
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25


def cross_entropy(logits, y):
    """Per-row softmax cross-entropy and its gradient w.r.t. the logits."""
    shift = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shift)
    tot = ex.sum(axis=-1, keepdims=True)
    p = ex / tot
    rows = np.arange(logits.shape[0])
    loss = np.log(tot[:, 0]) - shift[rows, y]
    grad = p
    grad[rows, y] -= 1.0
    return loss, grad


def tet_loss(O, y):
    """Mean over time steps of the cross-entropy of each step's readout.

    ``O`` is ``(T, C)`` with an integer label, or ``(T, B, C)`` with a label
    array (the loss is then also averaged over the batch). Returns
    ``(loss, dL/dO)``.
    """
    O = np.asarray(O, dtype=np.float64)
    if O.ndim not in (2, 3):
        raise ValueError("readout must be (T, C) or (T, B, C)")
    single = O.ndim == 2
    Ob = O[:, None, :] if single else O
    T, B, C = Ob.shape
    if T < 1:
        raise ValueError("need at least one time step")
    y = np.atleast_1d(np.asarray(y))
    if y.shape != (B,) or not np.issubdtype(y.dtype, np.integer) or (y < 0).any() or (y >= C).any():
        raise ValueError(f"labels must be {B} integers in [0, {C})")
    loss, grad = cross_entropy(Ob.reshape(T * B, C), np.tile(y, T))
    total = float(loss.mean())
    grad = grad.reshape(T, B, C) / (T * B)
    return total, (grad[:, 0, :] if single else grad)


# --- layers -----------------------------------------------------------------


@dataclass
class DenseLayer:
    name: str
    weights: np.ndarray
    mask: SparseMask | None = None
    skip_input_grad: bool = False

    def forward(self, x):
        self._x = x
        return masked_dense_forward(x, self.weights, self.mask)

    def backward(self, g):
        x = self._x.reshape(-1, self._x.shape[-1])
        gw = x.T @ g.reshape(-1, g.shape[-1])
        if self.skip_input_grad:
            return None, gw
        return g @ _masked(self.weights, self.mask).T, gw

    def output_positions(self):
        return 1


@dataclass
class ConvLayer:
    name: str
    weights: np.ndarray
    mask: SparseMask | None
    in_shape: tuple
    kernel: tuple = (3, 3)
    padding: str = "same"
    skip_input_grad: bool = False

    @property
    def out_shape(self):
        c, h, w = self.in_shape
        kh, kw = self.kernel
        if self.padding == "valid":
            h, w = h - kh + 1, w - kw + 1
        return (self.weights.shape[1], h, w)

    def forward(self, x):
        self._x_shape = x.shape
        self._cols = im2col(x, self.kernel, self.padding)
        return (self._cols @ _masked(self.weights, self.mask)).transpose(0, 3, 1, 2)

    def backward(self, g):
        g2 = g.transpose(0, 2, 3, 1)  # N, Ho, Wo, Cout
        cout = g2.shape[-1]
        gw = self._cols.reshape(-1, self._cols.shape[-1]).T @ g2.reshape(-1, cout)
        self._cols = None
        if self.skip_input_grad:
            return None, gw
        gcols = g2 @ _masked(self.weights, self.mask).T
        return col2im(gcols, self._x_shape, self.kernel, self.padding), gw

    def output_positions(self):
        _, h, w = self.out_shape
        return h * w


class AvgPool2:
    def forward(self, x):
        return avg_pool2(x)

    def backward(self, g):
        return avg_pool2_backward(g), None


class Flatten:
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._shape), None


@dataclass
class LifLayer:
    cfg: LifConfig = field(default_factory=LifConfig)
    temporal = True

    def forward(self, current):
        """``current`` is ``(T, B, ...)``; returns spikes of the same shape."""
        T = current.shape[0]
        u = np.zeros(current.shape[1:], dtype=current.dtype)
        self._v = np.empty_like(current)
        spikes = np.empty_like(current)
        for t in range(T):
            v = self.cfg.tau * u + current[t]
            a = (v >= self.cfg.v_th).astype(current.dtype)
            u = v * (1.0 - a)
            self._v[t] = v
            spikes[t] = a
        self.spikes = spikes
        return spikes

    def backward(self, g_spikes):
        # reset factor (1 - a) is held constant (detached reset)
        T = g_spikes.shape[0]
        g_in = np.empty_like(g_spikes)
        g_u = np.zeros(g_spikes.shape[1:], dtype=g_spikes.dtype)
        for t in range(T - 1, -1, -1):
            sg = surrogate_grad(self._v[t] - self.cfg.v_th, self.cfg).astype(g_spikes.dtype)
            g_v = g_spikes[t] * sg + g_u * (1.0 - self.spikes[t])
            g_in[t] = g_v
            g_u = self.cfg.tau * g_v
        return g_in, None


class Accumulate:
    """Readout integrator: ``O(t) = sum_{s <= t} I(s)``, no leak, no firing."""

    temporal = True

    def forward(self, current):
        return np.cumsum(current, axis=0)

    def backward(self, g):
        return np.cumsum(g[::-1], axis=0)[::-1], None


# --- networks ---------------------------------------------------------------


def kaiming_uniform(mask: SparseMask, rng, gain=1.0, dtype=np.float64):
    fan_in = max(1.0, mask.cardinality / mask.n_post)
    bound = gain * np.sqrt(3.0 / fan_in)
    w = rng.uniform(-bound, bound, size=mask.bits.shape).astype(dtype)
    w[~mask.bits] = 0.0
    return w


class SpikingNet:
    """Sequential LIF network whose readout is integrated, not fired."""

    def __init__(self, modules, sparse, dtype=np.float64):
        self.modules = modules
        self.layers = [m for m in modules if isinstance(m, (DenseLayer, ConvLayer))]
        self.sparse = list(sparse)
        self.dtype = dtype
        if len(self.sparse) != len(self.layers):
            raise ValueError("one sparse flag per weight layer required")
        # nothing upstream of the first layer needs a gradient
        modules[0].skip_input_grad = True

    def forward(self, x):
        """``x``: ``(T, B, ...)`` input; returns readout ``O``: ``(T, B, classes)``."""
        h = np.asarray(x, dtype=self.dtype)
        T, B = h.shape[:2]
        for m in self.modules:
            if getattr(m, "temporal", False):
                h = m.forward(h)
            else:
                out = m.forward(h.reshape((T * B,) + h.shape[2:]))
                h = out.reshape((T, B) + out.shape[1:])
        return h

    def backward(self, g):
        grads = {}
        T, B = g.shape[:2]
        for m in reversed(self.modules):
            if getattr(m, "temporal", False):
                g, _ = m.backward(g)
            else:
                gx, gw = m.backward(g.reshape((T * B,) + g.shape[2:]))
                if gw is not None:
                    grads[id(m)] = gw
                if gx is None:
                    break
                g = gx.reshape((T, B) + gx.shape[1:])
        return [grads[id(layer)] for layer in self.layers]

    def loss_and_grads(self, x, y):
        """TET loss of a batch and dense weight gradients, one per layer."""
        O = self.forward(x)
        loss, g = tet_loss(O, y)
        grads = self.backward(g.astype(self.dtype))
        return loss, [np.asarray(gw, dtype=np.float64) for gw in grads], O

    def predict(self, x):
        return np.argmax(self.forward(x).mean(axis=0), axis=-1)

    def spike_records(self):
        return [m.spikes for m in self.modules if isinstance(m, LifLayer)]


def bptt(net: SpikingNet, x, y, dense: bool = False):
    """Loss and weight gradients of a batch under the surrogate relaxation.

    Gradients on masked-out weights are zeroed unless ``dense`` is set.
    """
    loss, grads, _ = net.loss_and_grads(x, y)
    if not dense:
        for layer, gw in zip(net.layers, grads):
            if layer.mask is not None:
                gw[~layer.mask.bits] = 0.0
    return loss, grads


def _mask_for(n_pre, n_post, eps, seed_seq):
    if eps is None:
        return SparseMask.dense(n_pre, n_post)
    return er_init(n_pre, n_post, ErdosRenyiConfig(eps), int(seed_seq.generate_state(1)[0]))


def build_lif_mlp(sizes=(784, 800, 10), epsilons=(None, None), seed=0, cfg=LifConfig(),
                  dtype=np.float64, gain=2.0):
    """Dense/masked LIF MLP; the last layer feeds the integrating readout."""
    ss = np.random.SeedSequence(seed)
    seeds = ss.spawn(len(sizes))
    rng = np.random.default_rng(seeds[-1])
    modules, sparse = [], []
    for k, (n_pre, n_post) in enumerate(zip(sizes[:-1], sizes[1:])):
        eps = epsilons[k] if k < len(epsilons) else None
        mask = _mask_for(n_pre, n_post, eps, seeds[k])
        last = k == len(sizes) - 2
        w = kaiming_uniform(mask, rng, 1.0 if last else gain, dtype)
        modules.append(DenseLayer(f"fc{k + 1}", w, mask))
        modules.append(Accumulate() if last else LifLayer(cfg))
        sparse.append(eps is not None)
    return SpikingNet(modules, sparse, dtype)


def build_tiny_conv(in_shape=(1, 28, 28), n_classes=10, channels=(16, 32),
                    epsilons=(None, None, None), seed=0, cfg=LifConfig(),
                    dtype=np.float64, gain=2.0):
    """``16C3-AP2-32C3-AP2-FC`` with LIF after each conv.

    ``epsilons`` gives the ER factor of conv1, conv2 and the readout
    (``None`` keeps a layer dense).
    """
    ss = np.random.SeedSequence(seed)
    seeds = ss.spawn(4)
    rng = np.random.default_rng(seeds[-1])
    modules, sparse = [], []
    shape = tuple(in_shape)
    for k, c_out in enumerate(channels):
        n_pre = shape[0] * 9
        eps = epsilons[k] if k < len(epsilons) else None
        mask = _mask_for(n_pre, c_out, eps, seeds[k])
        conv = ConvLayer(f"conv{k + 1}", kaiming_uniform(mask, rng, gain, dtype), mask, shape)
        modules += [conv, LifLayer(cfg), AvgPool2()]
        c, h, w = conv.out_shape
        shape = (c, h // 2, w // 2)
        sparse.append(eps is not None)
    n_flat = int(np.prod(shape))
    eps = epsilons[2] if len(epsilons) > 2 else None
    mask = _mask_for(n_flat, n_classes, eps, seeds[2])
    modules += [Flatten(), DenseLayer("fc", kaiming_uniform(mask, rng, 1.0, dtype), mask), Accumulate()]
    sparse.append(eps is not None)
    return SpikingNet(modules, sparse, dtype)
