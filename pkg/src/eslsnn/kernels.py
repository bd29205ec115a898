"""Hot loops of the single-spike (z-domain) network.

Every kernel has a numba version and a vectorised numpy version with the
same signature; :func:`z_forward` / :func:`z_backward` dispatch on
``eslsnn._accel.USE_NUMBA``. Both versions accumulate in the same order
(ascending input spike time, ties by input index), so their results agree
to the last bit on ordinary inputs.

Layout conventions: ``z_in`` is ``(batch, n_in)``, weights are
``(n_in, n_out)``, ``+inf`` marks a neuron that never spikes.
"""
import numpy as np

from . import _accel
from ._accel import njit

# a prefix fires only if its weight sum exceeds 1 by more than this
FIRE_TOL = 1e-9


@njit
def _z_forward_nb(z_in, w, tol):
    batch, n_in = z_in.shape
    n_out = w.shape[1]
    z_out = np.full((batch, n_out), np.inf)
    s_w = np.zeros((batch, n_out))
    n_causal = np.zeros((batch, n_out), dtype=np.int64)
    order = np.empty((batch, n_in), dtype=np.int64)
    sw = np.empty(n_out)
    swz = np.empty(n_out)
    done = np.empty(n_out, dtype=np.bool_)
    for b in range(batch):
        zb = z_in[b]
        ob = np.argsort(zb, kind="mergesort")
        order[b] = ob
        n_fin = 0
        while n_fin < n_in and zb[ob[n_fin]] < np.inf:
            n_fin += 1
        sw[:] = 0.0
        swz[:] = 0.0
        done[:] = False
        remaining = n_out
        pos = 0
        while pos < n_fin and remaining > 0:
            zg = zb[ob[pos]]
            end = pos
            while end < n_fin and zb[ob[end]] == zg:
                i = ob[end]
                for j in range(n_out):
                    if not done[j]:
                        wij = w[i, j]
                        sw[j] += wij
                        swz[j] += wij * zg
                end += 1
            nxt = zb[ob[end]] if end < n_fin else np.inf
            for j in range(n_out):
                if not done[j] and sw[j] > 1.0 + tol:
                    cand = swz[j] / (sw[j] - 1.0)
                    if cand < nxt:
                        z_out[b, j] = cand
                        s_w[b, j] = sw[j]
                        n_causal[b, j] = end
                        done[j] = True
                        remaining -= 1
            pos = end
    return z_out, s_w, n_causal, order


def _z_forward_np(z_in, w, tol):
    batch, n_in = z_in.shape
    n_out = w.shape[1]
    z_out = np.full((batch, n_out), np.inf)
    s_w = np.zeros((batch, n_out))
    n_causal = np.zeros((batch, n_out), dtype=np.int64)
    order = np.argsort(z_in, axis=1, kind="stable")
    cols = np.arange(n_out)
    for b in range(batch):
        ob = order[b]
        zs = z_in[b, ob]
        n_fin = int(np.count_nonzero(np.isfinite(zs)))
        if n_fin == 0:
            continue
        zs = zs[:n_fin]
        rows = w[ob[:n_fin]]
        cum_w = np.cumsum(rows, axis=0)
        cum_wz = np.cumsum(rows * zs[:, None], axis=0)
        # last index of every tie group
        ends = np.flatnonzero(np.append(zs[1:] != zs[:-1], True))
        nxt = np.append(zs[ends[:-1] + 1], np.inf)
        sw = cum_w[ends]
        fires = sw > 1.0 + tol
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = np.where(fires, cum_wz[ends] / (sw - 1.0), np.inf)
        ok = fires & (cand < nxt[:, None])
        hit = ok.any(axis=0)
        first = np.argmax(ok, axis=0)
        sel = cols[hit]
        g = first[hit]
        z_out[b, sel] = cand[g, sel]
        s_w[b, sel] = sw[g, sel]
        n_causal[b, sel] = ends[g] + 1
    return z_out, s_w, n_causal, order


@njit
def _z_backward_nb(grad_out, z_in, w, z_out, s_w, n_causal, order):
    batch, n_in = z_in.shape
    n_out = w.shape[1]
    grad_in = np.zeros((batch, n_in))
    grad_w = np.zeros((n_in, n_out))
    scale = np.empty(n_out)
    for b in range(batch):
        kmax = 0
        for j in range(n_out):
            if n_causal[b, j] > 0 and grad_out[b, j] != 0.0:
                scale[j] = grad_out[b, j] / (s_w[b, j] - 1.0)
                if n_causal[b, j] > kmax:
                    kmax = n_causal[b, j]
            else:
                scale[j] = 0.0
        for k in range(kmax):
            i = order[b, k]
            zi = z_in[b, i]
            acc = 0.0
            for j in range(n_out):
                if k < n_causal[b, j]:
                    a = scale[j]
                    grad_w[i, j] += a * (zi - z_out[b, j])
                    acc += a * w[i, j]
            grad_in[b, i] = acc
    return grad_in, grad_w


def _z_backward_np(grad_out, z_in, w, z_out, s_w, n_causal, order):
    batch, n_in = z_in.shape
    grad_in = np.zeros((batch, n_in))
    grad_w = np.zeros_like(w, dtype=float)
    for b in range(batch):
        live = (n_causal[b] > 0) & (grad_out[b] != 0.0)
        if not live.any():
            continue
        scale = np.zeros(w.shape[1])
        scale[live] = grad_out[b, live] / (s_w[b, live] - 1.0)
        kmax = int(n_causal[b, live].max())
        idx = order[b, :kmax]
        causal = np.arange(kmax)[:, None] < n_causal[b][None, :]
        coef = np.where(causal, scale[None, :], 0.0)
        zi = z_in[b, idx][:, None]
        zo = np.where(np.isfinite(z_out[b]), z_out[b], 0.0)[None, :]
        grad_w[idx] += coef * (zi - zo)
        grad_in[b, idx] = (coef * w[idx]).sum(axis=1)
    return grad_in, grad_w


def z_forward(z_in, w, tol=FIRE_TOL, use_numba=None):
    """Batch forward pass. Returns ``(z_out, s_w, n_causal, order)``.

    ``order[b]`` sorts sample ``b``'s inputs by spike time; the causal set of
    output ``j`` is ``order[b, :n_causal[b, j]]`` (0 when ``j`` is silent) and
    ``s_w[b, j]`` is its weight sum.
    """
    z_in = np.ascontiguousarray(z_in, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
    fn = _z_forward_nb if use_numba else _z_forward_np
    return fn(z_in, w, float(tol))


def z_backward(grad_out, z_in, w, z_out, s_w, n_causal, order, use_numba=None):
    """Exact gradients of the forward map.

    Returns ``(grad_z_in, grad_w)``; ``grad_w`` is summed over the batch and
    is dense, i.e. also defined for zero (masked) weights.
    """
    args = [
        np.ascontiguousarray(grad_out, dtype=np.float64),
        np.ascontiguousarray(z_in, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(z_out, dtype=np.float64),
        np.ascontiguousarray(s_w, dtype=np.float64),
        np.ascontiguousarray(n_causal, dtype=np.int64),
        np.ascontiguousarray(order, dtype=np.int64),
    ]
    use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
    fn = _z_backward_nb if use_numba else _z_backward_np
    return fn(*args)
