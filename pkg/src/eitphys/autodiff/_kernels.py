"""Compiled convolution kernels.

Each image is unrolled into a column buffer that stays in cache, then a single
BLAS product handles all output channels. Inputs arrive already padded.
"""

import numba as nb
import numpy as np


@nb.njit(cache=True, fastmath=True)
def _fill_cols(xp, n, cols, k, stride, ho, wo):
    c_in = xp.shape[1]
    r = 0
    for c in range(c_in):
        for i in range(k):
            for j in range(k):
                for y in range(ho):
                    src = xp[n, c, y * stride + i]
                    base = y * wo
                    for x in range(wo):
                        cols[r, base + x] = src[x * stride + j]
                r += 1


@nb.njit(cache=True)
def conv_forward(xp, wm, out, k, stride):
    """out[n] = wm @ cols(xp[n]); wm is [C_out, C_in*k*k], out is [N, C_out, Ho, Wo]."""
    n_img = xp.shape[0]
    c_out = wm.shape[0]
    ho = out.shape[2]
    wo = out.shape[3]
    cols = np.empty((wm.shape[1], ho * wo), xp.dtype)
    for n in range(n_img):
        _fill_cols(xp, n, cols, k, stride, ho, wo)
        out[n] = np.dot(wm, cols).reshape(c_out, ho, wo)


@nb.njit(cache=True)
def conv_backward(xp, wm, g, dxp, dwm, k, stride, need_dx, need_dw):
    """Accumulate input gradient into dxp (padded) and weight gradient into dwm."""
    n_img = xp.shape[0]
    c_in = xp.shape[1]
    c_out = g.shape[1]
    ho = g.shape[2]
    wo = g.shape[3]
    cols = np.empty((wm.shape[1], ho * wo), xp.dtype)
    wmt = np.ascontiguousarray(wm.T)
    for n in range(n_img):
        gn = np.ascontiguousarray(g[n]).reshape(c_out, ho * wo)
        if need_dw:
            _fill_cols(xp, n, cols, k, stride, ho, wo)
            dwm += np.dot(gn, cols.T)
        if need_dx:
            dcols = np.dot(wmt, gn)
            r = 0
            for c in range(c_in):
                for i in range(k):
                    for j in range(k):
                        for y in range(ho):
                            dst = dxp[n, c, y * stride + i]
                            base = y * wo
                            for x in range(wo):
                                dst[x * stride + j] += dcols[r, base + x]
                        r += 1


@nb.njit(cache=True, fastmath=True)
def bn_stats(x):
    """Per-channel mean and population variance of x viewed as [N, C, L]."""
    n_img, c_n, length = x.shape
    mean = np.zeros(c_n)
    var = np.zeros(c_n)
    for n in range(n_img):
        for c in range(c_n):
            s = 0.0
            for p in range(length):
                s += x[n, c, p]
            mean[c] += s
    count = n_img * length
    mean /= count
    for n in range(n_img):
        for c in range(c_n):
            m = mean[c]
            s = 0.0
            for p in range(length):
                d = x[n, c, p] - m
                s += d * d
            var[c] += s
    var /= count
    return mean, var


@nb.njit(cache=True, fastmath=True)
def bn_apply(x, mean, invstd, gamma, beta, out):
    n_img, c_n, length = x.shape
    for n in range(n_img):
        for c in range(c_n):
            a = gamma[c] * invstd[c]
            b = beta[c] - mean[c] * a
            for p in range(length):
                out[n, c, p] = x[n, c, p] * a + b


@nb.njit(cache=True, fastmath=True)
def bn_backward(g, x, mean, invstd, gamma, gx, training):
    """Returns (dgamma, dbeta) and writes the input gradient into gx."""
    n_img, c_n, length = x.shape
    dgamma = np.zeros(c_n)
    dbeta = np.zeros(c_n)
    for n in range(n_img):
        for c in range(c_n):
            m = mean[c]
            s = invstd[c]
            sg = 0.0
            sgx = 0.0
            for p in range(length):
                gv = g[n, c, p]
                sg += gv
                sgx += gv * (x[n, c, p] - m) * s
            dbeta[c] += sg
            dgamma[c] += sgx
    count = n_img * length
    for n in range(n_img):
        for c in range(c_n):
            m = mean[c]
            s = invstd[c]
            scale = gamma[c] * s
            if training:
                mg = dbeta[c] / count
                mgx = dgamma[c] / count
                for p in range(length):
                    xh = (x[n, c, p] - m) * s
                    gx[n, c, p] = scale * (g[n, c, p] - mg - xh * mgx)
            else:
                for p in range(length):
                    gx[n, c, p] = scale * g[n, c, p]
    return dgamma, dbeta
