"""Forward/backward pairs for the handful of layers the two networks use.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache.  Shapes follow a
channels-last convention: sequences are (B, T, C), images are
(N, T, F, C).
"""

from __future__ import annotations

import numpy as np

LAYER_NORM_EPS = 1e-5


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


# ---------------------------------------------------------------- conv 1-D

def _pad_time(x, pad):
    return np.pad(x, ((0, 0), (pad, pad), (0, 0)))


def conv1d_forward(x, weight, bias):
    """Same-length 1-D convolution.  x (B, T, Cin), weight (Cout, Cin, k)."""
    c_out, c_in, k = weight.shape
    pad = (k - 1) // 2
    B, T, _ = x.shape
    xp = _pad_time(x, pad)
    # patches[b, t, j, c] = xp[b, t + j, c]
    patches = np.stack([xp[:, j:j + T, :] for j in range(k)], axis=2)
    wmat = weight.transpose(2, 1, 0).reshape(k * c_in, c_out)
    out = patches.reshape(B, T, k * c_in) @ wmat + bias
    return out, (patches, weight)


def conv1d_backward(dout, cache):
    patches, weight = cache
    c_out, c_in, k = weight.shape
    B, T = dout.shape[:2]
    flat = patches.reshape(B * T, k * c_in)
    d2 = dout.reshape(B * T, c_out)
    dwmat = flat.T @ d2
    dweight = dwmat.reshape(k, c_in, c_out).transpose(2, 1, 0)
    dbias = d2.sum(axis=0)
    wmat = weight.transpose(2, 1, 0).reshape(k * c_in, c_out)
    dpatches = (d2 @ wmat.T).reshape(B, T, k, c_in)
    pad = (k - 1) // 2
    dxp = np.zeros((B, T + 2 * pad, c_in))
    for j in range(k):
        dxp[:, j:j + T, :] += dpatches[:, :, j, :]
    return dxp[:, pad:pad + T, :], dweight, dbias


# ---------------------------------------------------------------- conv 2-D

def conv2d_forward(x, weight, bias):
    """Same-size 2-D convolution.  x (N, T, F, Cin), weight (Cout, Cin, kt, kf)."""
    c_out, c_in, kt, kf = weight.shape
    pt, pf = (kt - 1) // 2, (kf - 1) // 2
    N, T, F, _ = x.shape
    xp = np.pad(x, ((0, 0), (pt, pt), (pf, pf), (0, 0)))
    cols = [xp[:, i:i + T, j:j + F, :] for i in range(kt) for j in range(kf)]
    patches = np.stack(cols, axis=3)  # (N, T, F, kt*kf, Cin)
    wmat = weight.transpose(2, 3, 1, 0).reshape(kt * kf * c_in, c_out)
    out = patches.reshape(N, T, F, -1) @ wmat + bias
    return out, (patches, weight)


def conv2d_backward(dout, cache):
    patches, weight = cache
    c_out, c_in, kt, kf = weight.shape
    N, T, F = dout.shape[:3]
    flat = patches.reshape(-1, kt * kf * c_in)
    d2 = dout.reshape(-1, c_out)
    dweight = (flat.T @ d2).reshape(kt, kf, c_in, c_out).transpose(3, 2, 0, 1)
    dbias = d2.sum(axis=0)
    wmat = weight.transpose(2, 3, 1, 0).reshape(kt * kf * c_in, c_out)
    dpatches = (d2 @ wmat.T).reshape(N, T, F, kt * kf, c_in)
    pt, pf = (kt - 1) // 2, (kf - 1) // 2
    dxp = np.zeros((N, T + 2 * pt, F + 2 * pf, c_in))
    for i in range(kt):
        for j in range(kf):
            dxp[:, i:i + T, j:j + F, :] += dpatches[:, :, :, i * kf + j, :]
    return dxp[:, pt:pt + T, pf:pf + F, :], dweight, dbias


# ---------------------------------------------------------------- norms

def layer_norm_forward(x, gain, bias, eps=LAYER_NORM_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dout, cache):
    xhat, inv, gain = cache
    lead = tuple(range(dout.ndim - 1))
    dgain = (dout * xhat).sum(axis=lead)
    dbias = dout.sum(axis=lead)
    dxhat = dout * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def batch_norm_forward(x, mask, scale, shift, running_mean, running_var, train,
                       momentum=0.9, eps=1e-5):
    """Channel-wise batch norm over the valid positions of x (N, T, F, C).

    ``mask`` is (N, T) and marks real frames.  In train mode the batch
    statistics are used and ``(new_mean, new_var)`` are returned for the
    caller to store; in eval mode the running statistics are used.
    """
    w = np.broadcast_to(mask[:, :, None, None], x.shape[:3] + (1,))
    count = w.sum()
    if train:
        mean = (x * w).sum(axis=(0, 1, 2)) / count
        xc = x - mean
        var = (xc * xc * w).sum(axis=(0, 1, 2)) / count
        new_stats = (momentum * running_mean + (1 - momentum) * mean,
                     momentum * running_var + (1 - momentum) * var)
    else:
        mean, var = running_mean, running_var
        xc = x - mean
        new_stats = (running_mean, running_var)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * scale + shift, (xhat, inv, scale, w, count, train), new_stats


def batch_norm_backward(dout, cache):
    xhat, inv, scale, w, count, train = cache
    dout = dout * w
    dscale = (dout * xhat).sum(axis=(0, 1, 2))
    dshift = dout.sum(axis=(0, 1, 2))
    dxhat = dout * scale
    if train:
        mean_d = dxhat.sum(axis=(0, 1, 2)) / count
        mean_dx = (dxhat * xhat).sum(axis=(0, 1, 2)) / count
        dx = inv * (dxhat - mean_d - xhat * mean_dx) * w
    else:
        dx = dxhat * inv
    return dx, dscale, dshift


# ---------------------------------------------------------------- GRU

def gru_step_forward(x, h, w_input, w_hidden, b_input, b_hidden):
    """One GRU step with the reset gate applied to the hidden projection.

    r = sig(Wx_r x + bx_r + Wh_r h + bh_r)
    z = sig(Wx_z x + bx_z + Wh_z h + bh_z)
    n = tanh(Wx_n x + bx_n + r * (Wh_n h + bh_n))
    h' = (1 - z) * n + z * h
    """
    R = h.shape[-1]
    gx = x @ w_input.T + b_input
    gh = h @ w_hidden.T + b_hidden
    r = sigmoid(gx[:, :R] + gh[:, :R])
    z = sigmoid(gx[:, R:2 * R] + gh[:, R:2 * R])
    n = np.tanh(gx[:, 2 * R:] + r * gh[:, 2 * R:])
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, r, z, n, gh[:, 2 * R:])


def gru_step_backward(dh_new, cache, w_input, w_hidden):
    """Returns ``(dx, dh, dw_input, dw_hidden, db_input, db_hidden)``."""
    x, h, r, z, n, ghn = cache
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    dan = dn * (1.0 - n * n)
    dr = dan * ghn
    dar = dr * r * (1.0 - r)
    daz = dz * z * (1.0 - z)
    dgx = np.concatenate([dar, daz, dan], axis=1)
    dgh = np.concatenate([dar, daz, dan * r], axis=1)
    dx = dgx @ w_input
    dh = dh + dgh @ w_hidden
    return dx, dh, dgx.T @ x, dgh.T @ h, dgx.sum(axis=0), dgh.sum(axis=0)
