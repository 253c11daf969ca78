"""Pure-numpy GRU sequence kernel (fallback backend).

Gate layout along the last weight axis is [reset | update | candidate].
The update rule is

    r_t = sigmoid(x_t Wr + h_{t-1} Ur + br)
    z_t = sigmoid(x_t Wz + h_{t-1} Uz + bz)
    c_t = tanh(x_t Wc + (r_t * h_{t-1}) Uc + bc)
    h_t = (1 - z_t) * h_{t-1} + z_t * c_t

with h_0 = 0.  Gate activations are computed in place on a (B, T, 3H)
slab which doubles as the backward cache; buffers stay in input layout to
avoid transpose copies.
"""
from __future__ import annotations

import numpy as np

NAME = "numpy"


def _sigmoid(x):
    # exp overflow saturates to the correct limit (sigmoid -> 0)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def gru_cell(x_t, h, w, u, b):
    """One GRU step for a (B, E) input and (B, H) state."""
    hidden = h.shape[1]
    gates = x_t @ w + b
    gates[:, : 2 * hidden] += h @ u[:, : 2 * hidden]
    r = _sigmoid(gates[:, :hidden])
    z = _sigmoid(gates[:, hidden : 2 * hidden])
    c = np.tanh(gates[:, 2 * hidden :] + (r * h) @ u[:, 2 * hidden :])
    return (1.0 - z) * h + z * c


def gru_forward(x, w, u, b):
    batch, steps, _ = x.shape
    hidden = w.shape[1] // 3
    gates = x.reshape(batch * steps, -1) @ w
    gates += b
    gates = gates.reshape(batch, steps, 3 * hidden)

    hs = np.empty((batch, steps, hidden))
    h = np.zeros((batch, hidden))
    urz = u[:, : 2 * hidden]
    uc = u[:, 2 * hidden :]
    with np.errstate(over="ignore"):
        for t in range(steps):
            g = gates[:, t, :]
            rz = g[:, : 2 * hidden]
            rz += h @ urz
            np.negative(rz, out=rz)
            np.exp(rz, out=rz)
            rz += 1.0
            np.reciprocal(rz, out=rz)
            cc = g[:, 2 * hidden :]
            cc += (g[:, :hidden] * h) @ uc
            np.tanh(cc, out=cc)
            h = h + g[:, hidden : 2 * hidden] * (cc - h)
            hs[:, t, :] = h
    return hs, (gates, hs)


def gru_backward(x, w, u, b, cache, grad_hs):
    gates, hs = cache
    batch, steps, _ = x.shape
    hidden = w.shape[1] // 3
    urzt = u[:, : 2 * hidden].T
    uct = u[:, 2 * hidden :].T

    dgates = np.empty((batch, steps, 3 * hidden))
    dh = np.zeros((batch, hidden))
    zero_h = np.zeros((batch, hidden))
    for t in range(steps - 1, -1, -1):
        g = gates[:, t, :]
        r = g[:, :hidden]
        z = g[:, hidden : 2 * hidden]
        c = g[:, 2 * hidden :]
        h_prev = hs[:, t - 1, :] if t > 0 else zero_h
        dh = dh + grad_hs[:, t, :]
        dpc = (dh * z) * (1.0 - c * c)
        dpz = (dh * (c - h_prev)) * (z * (1.0 - z))
        drh = dpc @ uct
        dpr = (drh * h_prev) * (r * (1.0 - r))
        dg = dgates[:, t, :]
        dg[:, :hidden] = dpr
        dg[:, hidden : 2 * hidden] = dpz
        dg[:, 2 * hidden :] = dpc
        dh = dh * (1.0 - z) + drh * r + dg[:, : 2 * hidden] @ urzt

    h_prev_all = np.concatenate([zero_h[:, None, :], hs[:, :-1, :]], axis=1)
    flat_hp = h_prev_all.reshape(batch * steps, hidden)
    flat_dg = dgates.reshape(batch * steps, 3 * hidden)
    gu = np.empty_like(u)
    gu[:, : 2 * hidden] = flat_hp.T @ flat_dg[:, : 2 * hidden]
    gu[:, 2 * hidden :] = (
        (gates[:, :, :hidden] * h_prev_all).reshape(batch * steps, hidden).T
        @ flat_dg[:, 2 * hidden :])

    gx = (flat_dg @ w.T).reshape(batch, steps, -1)
    gw = x.reshape(batch * steps, -1).T @ flat_dg
    gb = flat_dg.sum(axis=0)
    return gx, gw, gu, gb
