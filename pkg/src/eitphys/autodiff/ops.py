"""Differentiable operators.

Every op computes its forward value with numpy, then records a closure that maps
output gradients to input gradients. Only the operators the CNN-BiLSTM needs are
provided.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from eitphys.autodiff import _kernels
from eitphys.autodiff.tensor import Tensor, get_default_dtype, record
from eitphys.errors import DimensionError


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=get_default_dtype()))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    record("add", (a, b), (out,), lambda g: (_unbroadcast(g[0], a.shape), _unbroadcast(g[0], b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    record("sub", (a, b), (out,), lambda g: (_unbroadcast(g[0], a.shape), _unbroadcast(-g[0], b.shape)))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    out = Tensor(a.data * b.data)

    def _backward(g):
        return _unbroadcast(g[0] * b.data, a.shape), _unbroadcast(g[0] * a.data, b.shape)

    record("mul", (a, b), (out,), _backward)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    record("neg", (a,), (out,), lambda g: (-g[0],))
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    record("relu", (x,), (out,), lambda g: (g[0] * (out.data > 0),))
    return out


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = Tensor(np.abs(x.data))
    record("abs", (x,), (out,), lambda g: (g[0] * np.sign(x.data),))
    return out


# ------------------------------------------------------------------ reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = Tensor(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)))

    def _backward(g):
        gk = g[0] if keepdims else np.expand_dims(g[0], axes)
        return (np.broadcast_to(gk, x.shape).copy(),)

    record("sum", (x,), (out,), _backward)
    return out


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = Tensor(np.asarray(x.data.mean(axis=axes, keepdims=keepdims)))

    def _backward(g):
        gk = g[0] if keepdims else np.expand_dims(g[0], axes)
        return (np.broadcast_to(gk / count, x.shape).astype(x.dtype),)

    record("mean", (x,), (out,), _backward)
    return out


# -------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    out = Tensor(data)
    record("reshape", (x,), (out,), lambda g: (g[0].reshape(x.shape),))
    return out


def flip(x: Tensor, axis: int) -> Tensor:
    out = Tensor(np.flip(x.data, axis=axis).copy())
    record("flip", (x,), (out,), lambda g: (np.flip(g[0], axis=axis).copy(),))
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {ax}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    record("concat", tensors, (out,), lambda g: tuple(np.split(g[0], splits, axis=ax)))
    return out


# --------------------------------------------------------------------- layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ weight.T + bias over the last axis; weight is [out, in]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input feature axis {x.shape[-1]} does not match weight in-features "
            f"{weight.shape[1] if weight.ndim == 2 else weight.shape}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(y.reshape(*x.shape[:-1], weight.shape[0]))

    def _backward(g):
        g2 = g[0].reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    record("linear", inputs, (out,), lambda g: _backward(g)[: len(inputs)])
    return out


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) on [B, C_in, H, W] inputs."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be [B,C,H,W], got {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be [C_out,C_in,k,k], got {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if kh != kw:
        raise DimensionError(f"conv2d: kernel axes 2 and 3 differ ({kh} vs {kw})")
    if x.shape[1] != c_in:
        raise DimensionError(f"conv2d: input channel axis 1 is {x.shape[1]} but weight axis 1 is {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias axis 0 is {bias.shape} but weight axis 0 is {c_out}")
    if kh < 1 or stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: need k>=1, stride>=1, padding>=0 (k={kh}, stride={stride}, padding={padding})")
    b, _, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kh, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: spatial axes 2,3 ({h}x{w}) collapse below 1 with k={kh}, stride={stride}")

    dtype = x.dtype
    if padding:
        xp = np.zeros((b, c_in, h + 2 * padding, w + 2 * padding), dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x.data
    else:
        xp = np.ascontiguousarray(x.data)
    wm = np.ascontiguousarray(weight.data.reshape(c_out, -1), dtype=dtype)
    y = np.empty((b, c_out, ho, wo), dtype)
    _kernels.conv_forward(xp, wm, y, kh, stride)
    if bias is not None:
        y += bias.data.reshape(1, c_out, 1, 1)
    out = Tensor(y)

    def _backward(g):
        gy = np.ascontiguousarray(g[0], dtype=dtype)
        need_dx, need_dw = x.requires_grad, weight.requires_grad
        dxp = np.zeros_like(xp) if need_dx else np.zeros((1, 1, 1, 1), dtype)
        dwm = np.zeros_like(wm)
        _kernels.conv_backward(xp, wm, gy, dxp, dwm, kh, stride, need_dx, need_dw)
        gx = None
        if need_dx:
            gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
            gx = np.ascontiguousarray(gx)
        gw = dwm.reshape(weight.shape) if need_dw else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(gy.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    record("conv2d", inputs, (out,), _backward)
    return out


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over every axis but axis 1.

    In training mode batch statistics are used (population variance) and the
    running buffers are updated in place; otherwise the running buffers are used.
    """
    c = x.shape[1]
    if x.ndim < 2:
        raise DimensionError(f"batch_norm: input needs a channel axis 1, got {x.shape}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: channel axis 1 is {c}, scale/shift are {gamma.shape}/{beta.shape}")
    x3 = np.ascontiguousarray(x.data).reshape(x.shape[0], c, -1)
    m = x.size // c
    if training:
        mu, var = _kernels.bn_stats(x3)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean.astype(np.float64), running_var.astype(np.float64)
    invstd = 1.0 / np.sqrt(var + eps)
    y = np.empty_like(x3)
    _kernels.bn_apply(x3, mu, invstd, gamma.data.astype(np.float64), beta.data.astype(np.float64), y)
    out = Tensor(y.reshape(x.shape))

    def _backward(g):
        g3 = np.ascontiguousarray(g[0]).reshape(x3.shape)
        gx = np.empty_like(x3)
        dgamma, dbeta = _kernels.bn_backward(g3, x3, mu, invstd, gamma.data.astype(np.float64), gx, training)
        return gx.reshape(x.shape), dgamma.astype(gamma.dtype), dbeta.astype(beta.dtype)

    record("batch_norm", (x, gamma, beta), (out,), _backward)
    return out


# ----------------------------------------------------------------------- LSTM


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def _check_lstm(d: int, w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> int:
    hidden = w_hh.shape[-1]
    if w_hh.shape != (4 * hidden, hidden):
        raise DimensionError(f"lstm: recurrent weight must be [4H,H], got {w_hh.shape}")
    if w_ih.shape != (4 * hidden, d):
        raise DimensionError(f"lstm: input weight must be [4H={4 * hidden},D={d}], got {w_ih.shape}")
    if bias.shape != (4 * hidden,):
        raise DimensionError(f"lstm: bias must be [4H={4 * hidden}], got {bias.shape}")
    return hidden


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor):
    """One LSTM cell update. Gate order along the 4H axis: input, forget, cell, output."""
    hidden = _check_lstm(x.shape[-1], w_ih, w_hh, bias)
    if h_prev.shape != (x.shape[0], hidden) or c_prev.shape != h_prev.shape:
        raise DimensionError(f"lstm_step: state shapes {h_prev.shape}/{c_prev.shape}, expected {(x.shape[0], hidden)}")
    z = x.data @ w_ih.data.T + h_prev.data @ w_hh.data.T + bias.data
    i = _sigmoid(z[:, :hidden])
    f = _sigmoid(z[:, hidden : 2 * hidden])
    gg = np.tanh(z[:, 2 * hidden : 3 * hidden])
    o = _sigmoid(z[:, 3 * hidden :])
    c = f * c_prev.data + i * gg
    tc = np.tanh(c)
    h_out = Tensor(o * tc)
    c_out = Tensor(c)

    def _backward(grads):
        dh, dc_in = grads
        do = dh * tc
        dc = dh * o * (1 - tc * tc) + dc_in
        dz = np.concatenate(
            [dc * gg * i * (1 - i), dc * c_prev.data * f * (1 - f), dc * i * (1 - gg * gg), do * o * (1 - o)], axis=1
        )
        return (
            dz @ w_ih.data,
            dz @ w_hh.data,
            dc * f,
            dz.T @ x.data,
            dz.T @ h_prev.data,
            dz.sum(axis=0),
        )

    record("lstm_step", (x, h_prev, c_prev, w_ih, w_hh, bias), (h_out, c_out), _backward)
    return h_out, c_out


def lstm_sequence(x: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor, reverse: bool = False) -> Tensor:
    """Run an LSTM over [B, T, D] from zero state; returns hidden states [B, T, H].

    With ``reverse`` the sequence is consumed from the last frame to the first and
    the outputs are returned in the original time order.
    """
    if x.ndim != 3:
        raise DimensionError(f"lstm_sequence: input must be [B,T,D], got {x.shape}")
    bsz, steps, d = x.shape
    hidden = _check_lstm(d, w_ih, w_hh, bias)
    dtype = x.dtype
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    # input contribution for every frame in one product
    zx = (x.data.reshape(-1, d) @ w_ih.data.T + bias.data).reshape(bsz, steps, 4 * hidden)
    whh_t = np.ascontiguousarray(w_hh.data.T)
    gates = np.empty((bsz, steps, 4 * hidden), dtype)
    cs = np.empty((bsz, steps, hidden), dtype)
    hs = np.empty((bsz, steps, hidden), dtype)
    h = np.zeros((bsz, hidden), dtype)
    c = np.zeros((bsz, hidden), dtype)
    for t in order:
        z = zx[:, t] + h @ whh_t
        act = gates[:, t]
        act[:, :hidden] = _sigmoid(z[:, :hidden])
        act[:, hidden : 2 * hidden] = _sigmoid(z[:, hidden : 2 * hidden])
        act[:, 2 * hidden : 3 * hidden] = np.tanh(z[:, 2 * hidden : 3 * hidden])
        act[:, 3 * hidden :] = _sigmoid(z[:, 3 * hidden :])
        c = act[:, hidden : 2 * hidden] * c + act[:, :hidden] * act[:, 2 * hidden : 3 * hidden]
        h = act[:, 3 * hidden :] * np.tanh(c)
        cs[:, t] = c
        hs[:, t] = h
    out = Tensor(hs)

    def _backward(grads):
        dhs = grads[0]
        dz_all = np.empty_like(gates)
        dh_next = np.zeros((bsz, hidden), dtype)
        dc_next = np.zeros((bsz, hidden), dtype)
        zeros = np.zeros((bsz, hidden), dtype)
        w_hh_d = w_hh.data
        for t in reversed(list(order)):
            prev = t + 1 if reverse else t - 1
            c_prev = cs[:, prev] if 0 <= prev < steps else zeros
            act = gates[:, t]
            i = act[:, :hidden]
            f = act[:, hidden : 2 * hidden]
            gg = act[:, 2 * hidden : 3 * hidden]
            o = act[:, 3 * hidden :]
            tc = np.tanh(cs[:, t])
            dh = dhs[:, t] + dh_next
            dc = dh * o * (1 - tc * tc) + dc_next
            dz = dz_all[:, t]
            dz[:, :hidden] = dc * gg * i * (1 - i)
            dz[:, hidden : 2 * hidden] = dc * c_prev * f * (1 - f)
            dz[:, 2 * hidden : 3 * hidden] = dc * i * (1 - gg * gg)
            dz[:, 3 * hidden :] = dh * tc * o * (1 - o)
            dc_next = dc * f
            dh_next = dz @ w_hh_d
        dz2 = dz_all.reshape(-1, 4 * hidden)
        # hidden state that fed each step (zero at the sequence start)
        h_prev = np.zeros_like(hs)
        if reverse:
            h_prev[:, :-1] = hs[:, 1:]
        else:
            h_prev[:, 1:] = hs[:, :-1]
        gx = (dz2 @ w_ih.data).reshape(x.shape) if x.requires_grad else None
        return (
            gx,
            dz2.T @ x.data.reshape(-1, d),
            dz2.T @ h_prev.reshape(-1, hidden),
            dz2.sum(axis=0),
        )

    record("lstm_sequence", (x, w_ih, w_hh, bias), (out,), _backward)
    return out


# ----------------------------------------------------------------------- loss


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over all elements."""
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: prediction {pred.shape} vs target {target.shape}")
    return mean(abs(sub(pred, target)))
