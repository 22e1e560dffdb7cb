"""Pure NumPy fallbacks for the compiled row kernels.

Same signatures and semantics as seqrec.backend._ckernels; used when the
extension is unavailable or when SEQREC_BACKEND=python is set.
"""

import numpy as np


def softmax_rows_fwd(x, mask_add=None):
    """Row-wise stable softmax of x (R, C). mask_add, when given, is an
    (M, C) additive float array with R % M == 0; row r uses mask_add[r % M]."""
    if mask_add is not None:
        m = mask_add.shape[0]
        z = x.reshape(-1, m, x.shape[1]) + mask_add[None, :, :]
        z = z.reshape(x.shape)
    else:
        z = x
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_bwd(y, dy):
    dot = (y * dy).sum(axis=1, keepdims=True)
    return y * (dy - dot)


def layernorm_rows_fwd(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    var = np.square(x - mean).mean(axis=1)
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean) * rstd[:, None]
    return gain * xhat + bias, xhat, rstd


def layernorm_rows_bwd(dy, xhat, rstd, gain):
    d = dy.shape[1]
    g = dy * gain
    m1 = g.mean(axis=1, keepdims=True)
    m2 = (g * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (g - m1 - xhat * m2)
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    return dx, dgain, dbias


def gather_rows(table, idx):
    return table[idx]


def scatter_add_rows(acc, idx, upd):
    np.add.at(acc, idx, upd)


def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * np.square(g)
    mh = m / (1.0 - beta1 ** t)
    vh = v / (1.0 - beta2 ** t)
    p -= (lr * mh / (np.sqrt(vh) + eps)).astype(p.dtype, copy=False)
