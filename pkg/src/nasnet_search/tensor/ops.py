"""Differentiable primitives over NHWC feature maps and 2-D matrices.

Convolutions use "same" padding with ceiling division for strided outputs,
split TF-style (extra pad on the bottom/right). Kernels are laid out
``(kh, kw, in_channels // groups, out_channels)``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import ShapeError, Tensor, as_tensor, record

BN_EPS = 1e-3
BN_MOMENTUM = 0.9


def _new(data: np.ndarray) -> Tensor:
    return Tensor(data, dtype=data.dtype)


def _check(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {msg}")


# --- elementwise and reductions -------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, "add", f"shape mismatch {a.shape} vs {b.shape}")
    out = _new(a.data + b.data)
    record("add", [out], [a, b], lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, "sub", f"shape mismatch {a.shape} vs {b.shape}")
    out = _new(a.data - b.data)
    record("sub", [out], [a, b], lambda g: (g, -g))
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a tensor of the same shape or a constant array/scalar
    broadcastable to ``a`` (used for path masks and advantage weights)."""
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _check(a.shape == b.shape, "mul", f"shape mismatch {a.shape} vs {b.shape}")
        out = _new(a.data * b.data)
        record("mul", [out], [a, b], lambda g: (g * b.data, g * a.data))
        return out
    const = np.asarray(b, dtype=a.data.dtype)
    try:
        data = a.data * const
    except ValueError:
        raise ShapeError(f"mul: cannot scale {a.shape} by {const.shape}") from None
    _check(data.shape == a.shape, "mul", f"constant {const.shape} broadcasts beyond {a.shape}")
    out = _new(data)
    record("mul", [out], [a], lambda g: (g * const,))
    return out


def neg(a: Tensor) -> Tensor:
    return mul(a, -1.0)


def exp(a: Tensor) -> Tensor:
    out = _new(np.exp(a.data))
    record("exp", [out], [a], lambda g: (g * out.data,))
    return out


def log(a: Tensor) -> Tensor:
    out = _new(np.log(a.data))
    record("log", [out], [a], lambda g: (g / a.data,))
    return out


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _new(np.maximum(x.data, 0))
    record("relu", [out], [x], lambda g: (g * (x.data > 0),))
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    out = _new(np.clip(x.data, lo, hi))
    record("clip", [out], [x], lambda g: (g * inside,))
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    _check(a.shape == b.shape, "minimum", f"shape mismatch {a.shape} vs {b.shape}")
    take_a = a.data <= b.data
    out = _new(np.where(take_a, a.data, b.data))
    record("minimum", [out], [a, b], lambda g: (g * take_a, g * ~take_a))
    return out


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = _new(np.asarray(x.data.sum(axis=axis)))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    record("sum", [out], [x], vjp)
    return out


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    _check(len(xs) >= 1, "concat_channels", "needs at least one input")
    lead = xs[0].shape[:-1]
    for x in xs:
        _check(x.shape[:-1] == lead, "concat_channels", f"leading dims {x.shape[:-1]} vs {lead}")
    out = _new(np.concatenate([x.data for x in xs], axis=-1))
    splits = np.cumsum([x.shape[-1] for x in xs])[:-1]
    record("concat_channels", [out], xs, lambda g: tuple(np.split(g, splits, axis=-1)))
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    _check(x.ndim == 4, "global_avg_pool", f"expected NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    out = _new(x.data.mean(axis=(1, 2)))
    record(
        "global_avg_pool",
        [out],
        [x],
        lambda g: (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),),
    )
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    _check(x.ndim == 2 and w.ndim == 2, "linear", f"expected 2-D operands, got {x.shape} and {w.shape}")
    _check(x.shape[1] == w.shape[0], "linear", f"inner dims {x.shape[1]} vs {w.shape[0]}")
    data = x.data @ w.data
    if b is not None:
        _check(b.shape == (w.shape[1],), "linear", f"bias shape {b.shape} vs ({w.shape[1]},)")
        data = data + b.data
    out = _new(data)
    inputs = [x, w] if b is None else [x, w, b]

    def vjp(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    record("linear", [out], inputs, vjp)
    return out


# --- softmax family -------------------------------------------------------------


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    p = np.exp(_log_softmax(x.data))
    out = _new(p)
    record(
        "softmax",
        [out],
        [x],
        lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),),
    )
    return out


def log_softmax(x: Tensor) -> Tensor:
    ls = _log_softmax(x.data)
    out = _new(ls)
    p = np.exp(ls)
    record(
        "log_softmax",
        [out],
        [x],
        lambda g: (g - p * g.sum(axis=-1, keepdims=True),),
    )
    return out


def pick(x: Tensor, index) -> Tensor:
    """``out[n] = x[n, index[n]]`` for a 2-D ``x``."""
    index = np.asarray(index, dtype=np.int64)
    _check(x.ndim == 2 and index.shape == (x.shape[0],), "pick", f"bad shapes {x.shape}, {index.shape}")
    rows = np.arange(x.shape[0])
    out = _new(x.data[rows, index])

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[rows, index] = g
        return (dx,)

    record("pick", [out], [x], vjp)
    return out


def cross_entropy_loss(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer class labels."""
    labels = np.asarray(labels, dtype=np.int64)
    _check(
        logits.ndim == 2 and labels.shape == (logits.shape[0],),
        "cross_entropy_loss",
        f"logits {logits.shape} vs labels {labels.shape}",
    )
    ls = _log_softmax(logits.data)
    rows = np.arange(len(labels))
    per = -ls[rows, labels]
    n = len(labels)
    if reduction == "mean":
        out = _new(np.asarray(per.mean(), dtype=logits.data.dtype))
    elif reduction == "none":
        out = _new(per)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def vjp(g):
        d = np.exp(ls)
        d[rows, labels] -= 1.0
        if reduction == "mean":
            return (d * (g / n),)
        return (d * g[:, None],)

    record("cross_entropy_loss", [out], [logits], vjp)
    return out


def embedding_lookup(table: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    _check(table.ndim == 2, "embedding_lookup", f"table must be 2-D, got {table.shape}")
    _check(
        index.size == 0 or (index.min() >= 0 and index.max() < table.shape[0]),
        "embedding_lookup",
        f"index out of range for table with {table.shape[0]} rows",
    )
    out = _new(table.data[index])

    def vjp(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, index, g)
        return (dt,)

    record("embedding_lookup", [out], [table], vjp)
    return out


# --- LSTM -----------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def lstm_step(x: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step. ``w`` is ``(in + hidden, 4 * hidden)`` with gate order i, f, g, o."""
    hidden = h.shape[1]
    _check(w.shape == (x.shape[1] + hidden, 4 * hidden), "lstm_step", f"weight shape {w.shape}")
    _check(b.shape == (4 * hidden,), "lstm_step", f"bias shape {b.shape}")
    _check(c.shape == h.shape and x.shape[0] == h.shape[0], "lstm_step", "state/batch mismatch")
    xh = np.concatenate([x.data, h.data], axis=1)
    z = xh @ w.data + b.data
    i = _sigmoid(z[:, :hidden])
    f = _sigmoid(z[:, hidden : 2 * hidden])
    gg = np.tanh(z[:, 2 * hidden : 3 * hidden])
    o = _sigmoid(z[:, 3 * hidden :])
    c_new = f * c.data + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    h_out, c_out = _new(h_new), _new(c_new)

    def vjp(dh, dc):
        dc_total = dc + dh * o * (1.0 - tc**2)
        dz = np.concatenate(
            [
                dc_total * gg * i * (1.0 - i),
                dc_total * c.data * f * (1.0 - f),
                dc_total * i * (1.0 - gg**2),
                dh * tc * o * (1.0 - o),
            ],
            axis=1,
        )
        dxh = dz @ w.data.T
        return (
            dxh[:, : x.shape[1]],
            dxh[:, x.shape[1] :],
            dc_total * f,
            xh.T @ dz,
            dz.sum(axis=0),
        )

    record("lstm_step", [h_out, c_out], [x, h, c, w, b], vjp)
    return h_out, c_out


# --- convolution ------------------------------------------------------------------


def same_padding(size: int, kernel: int, stride: int, dilation: int = 1) -> tuple[int, int, int]:
    """Output size and (before, after) padding for "same" convolution/pooling."""
    effective = (kernel - 1) * dilation + 1
    out = -(-size // stride)
    total = max((out - 1) * stride + effective - size, 0)
    return out, total // 2, total - total // 2


def _window(xp: np.ndarray, i: int, j: int, stride: int, dilation: int, ho: int, wo: int) -> tuple:
    r0, c0 = i * dilation, j * dilation
    return (
        slice(None),
        slice(r0, r0 + stride * (ho - 1) + 1, stride),
        slice(c0, c0 + stride * (wo - 1) + 1, stride),
        slice(None),
    )


def _conv_geometry(x: np.ndarray, kh: int, kw: int, stride: int, dilation: int):
    _, h, w, _ = x.shape
    ho, pt, pb = same_padding(h, kh, stride, dilation)
    wo, pl, pr = same_padding(w, kw, stride, dilation)
    return ho, wo, ((0, 0), (pt, pb), (pl, pr), (0, 0))


def _depthwise_rows_forward(xp: np.ndarray, w: np.ndarray, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Stride-1 depthwise conv with each row flattened to ``W*C``.

    A kernel tap is then one slice with long contiguous runs instead of
    ``C``-sized ones, which roughly halves the memory traffic.
    """
    n, hp, wp, c = xp.shape
    kh, kw = w.shape[:2]
    xf = xp.reshape(n, hp, wp * c)
    wt = np.tile(w[:, :, 0, :], (1, 1, wo))
    out = np.zeros((n, ho, wo * c), dtype=xp.dtype)
    tmp = np.empty_like(out)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation * c
            out += np.multiply(xf[:, r0 : r0 + ho, c0 : c0 + wo * c], wt[i, j], out=tmp)
    return out.reshape(n, ho, wo, c)


def _depthwise_rows_backward(g: np.ndarray, xp: np.ndarray, w: np.ndarray, dilation: int):
    n, ho, wo, c = g.shape
    _, hp, wp, _ = xp.shape
    kh, kw = w.shape[:2]
    xf = xp.reshape(n, hp, wp * c)
    gf = g.reshape(n, ho, wo * c)
    wt = np.tile(w[:, :, 0, :], (1, 1, wo))
    dxf = np.zeros_like(xf)
    dw = np.zeros_like(w)
    ones = np.ones(n * ho * wo, dtype=g.dtype)
    tmp = np.empty_like(gf)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation * c
            rows, cols = slice(r0, r0 + ho), slice(c0, c0 + wo * c)
            # a ones-vector matmul reduces far faster than sum() over three axes
            dw[i, j, 0] = ones @ np.multiply(xf[:, rows, cols], gf, out=tmp).reshape(-1, c)
            dxf[:, rows, cols] += np.multiply(gf, wt[i, j], out=tmp)
    return dxf.reshape(xp.shape), dw


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, dilation: int, groups: int):
    n, _, _, cin = x.shape
    kh, kw, cpg, cout = w.shape
    ho, wo, pads = _conv_geometry(x, kh, kw, stride, dilation)
    if kh == kw == 1 and groups == 1:
        # pointwise: "same" padding is always zero, so no padded copy is needed
        xs = x[:, ::stride, ::stride, :]
        return (xs.reshape(-1, cin) @ w[0, 0]).reshape(n, ho, wo, cout), x, pads
    xp = np.pad(x, pads)
    depthwise = groups == cin and cout == cin
    if depthwise and stride == 1:
        return _depthwise_rows_forward(xp, w, dilation, ho, wo), xp, pads
    out = np.zeros((n, ho, wo, cout), dtype=x.dtype)
    tmp = np.empty_like(out) if depthwise else None
    for i in range(kh):
        for j in range(kw):
            patch = xp[_window(xp, i, j, stride, dilation, ho, wo)]
            if groups == 1:
                out += (patch.reshape(-1, cin) @ w[i, j]).reshape(out.shape)
            elif depthwise:
                out += np.multiply(patch, w[i, j, 0], out=tmp)
            else:
                opg = cout // groups
                pr = patch.reshape(n, ho, wo, groups, cpg)
                wr = w[i, j].reshape(cpg, groups, opg)
                out += np.einsum("nhwgc,cgo->nhwgo", pr, wr).reshape(out.shape)
    return out, xp, pads


def _conv_backward(g, x, xp, pads, w, stride, dilation, groups):
    n, h, wd, cin = x.shape
    kh, kw, cpg, cout = w.shape
    _, ho, wo, _ = g.shape
    g2 = g.reshape(-1, cout)
    if kh == kw == 1 and groups == 1:
        xs = x[:, ::stride, ::stride, :]
        dw = (xs.reshape(-1, cin).T @ g2).reshape(w.shape)
        dxs = (g2 @ w[0, 0].T).reshape(xs.shape)
        if stride == 1:
            return dxs, dw
        dx = np.zeros_like(x)
        dx[:, ::stride, ::stride, :] = dxs
        return dx, dw
    depthwise = groups == cin and cout == cin
    (_, _), (pt, _), (pl, _), _ = pads
    if depthwise and stride == 1:
        dxp, dw = _depthwise_rows_backward(g, xp, w, dilation)
        return dxp[:, pt : pt + h, pl : pl + wd, :], dw
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    ones = np.ones(g2.shape[0], dtype=g.dtype) if depthwise else None
    tmp = np.empty_like(g) if depthwise else None
    for i in range(kh):
        for j in range(kw):
            win = _window(xp, i, j, stride, dilation, ho, wo)
            patch = xp[win]
            if groups == 1:
                dw[i, j] += patch.reshape(-1, cin).T @ g2
                dxp[win] += (g2 @ w[i, j].T).reshape(patch.shape)
            elif depthwise:
                # a ones-vector matmul reduces far faster than sum() over three axes
                dw[i, j, 0] += ones @ np.multiply(patch, g, out=tmp).reshape(-1, cin)
                dxp[win] += np.multiply(g, w[i, j, 0], out=tmp)
            else:
                opg = cout // groups
                pr = patch.reshape(n, ho, wo, groups, cpg)
                gr = g.reshape(n, ho, wo, groups, opg)
                wr = w[i, j].reshape(cpg, groups, opg)
                dw[i, j] += np.einsum("nhwgc,nhwgo->cgo", pr, gr).reshape(cpg, cout)
                dxp[win] += np.einsum("nhwgo,cgo->nhwgc", gr, wr).reshape(patch.shape)
    return dxp[:, pt : pt + h, pl : pl + wd, :], dw


def _check_conv(op: str, x: Tensor, w: Tensor, stride: int, dilation: int, groups: int) -> None:
    _check(x.ndim == 4, op, f"expected NHWC input, got {x.shape}")
    _check(w.ndim == 4, op, f"expected (kh, kw, cin/groups, cout) kernel, got {w.shape}")
    _check(stride >= 1 and dilation >= 1 and groups >= 1, op, "stride, dilation and groups must be >= 1")
    cin, cout = x.shape[3], w.shape[3]
    _check(cin % groups == 0 and cout % groups == 0, op, f"channels {cin}->{cout} not divisible by groups={groups}")
    _check(w.shape[2] * groups == cin, op, f"kernel expects {w.shape[2] * groups} input channels, got {cin}")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, dilation: int = 1, groups: int = 1) -> Tensor:
    _check_conv("conv2d", x, w, stride, dilation, groups)
    data, xp, pads = _conv_forward(x.data, w.data, stride, dilation, groups)
    out = _new(data)
    record(
        "conv2d",
        [out],
        [x, w],
        lambda g: _conv_backward(g, x.data, xp, pads, w.data, stride, dilation, groups),
    )
    return out


def depthwise_separable_conv(
    x: Tensor, w_depth: Tensor, w_point: Tensor, stride: int = 1, dilation: int = 1
) -> Tensor:
    """Per-channel spatial conv (``w_depth``: kh, kw, 1, C) then 1x1 pointwise conv, with nothing in between."""
    c = x.shape[-1] if x.ndim == 4 else -1
    _check_conv("depthwise_separable_conv", x, w_depth, stride, dilation, max(c, 1))
    _check(w_depth.shape[3] == c, "depthwise_separable_conv", f"depthwise kernel {w_depth.shape} vs {c} channels")
    _check(w_point.shape[:3] == (1, 1, c), "depthwise_separable_conv", f"pointwise kernel {w_point.shape}")
    mid, xp1, pads1 = _conv_forward(x.data, w_depth.data, stride, dilation, c)
    data, xp2, pads2 = _conv_forward(mid, w_point.data, 1, 1, 1)
    out = _new(data)

    def vjp(g):
        dmid, dwp = _conv_backward(g, mid, xp2, pads2, w_point.data, 1, 1, 1)
        dx, dwd = _conv_backward(dmid, x.data, xp1, pads1, w_depth.data, stride, dilation, c)
        return dx, dwd, dwp

    record("depthwise_separable_conv", [out], [x, w_depth, w_point], vjp)
    return out


def factored_conv_1xN_Nx1(x: Tensor, w_row: Tensor, w_col: Tensor, stride: int = 1) -> Tensor:
    """A ``1 x n`` conv (carrying the stride) followed by an ``n x 1`` conv."""
    _check_conv("factored_conv_1xN_Nx1", x, w_row, stride, 1, 1)
    n = w_row.shape[1]
    _check(w_row.shape[0] == 1, "factored_conv_1xN_Nx1", f"first kernel must be 1xN, got {w_row.shape}")
    _check(
        w_col.shape[:3] == (n, 1, w_row.shape[3]),
        "factored_conv_1xN_Nx1",
        f"second kernel must be {n}x1 over {w_row.shape[3]} channels, got {w_col.shape}",
    )
    mid, xp1, pads1 = _conv_forward(x.data, w_row.data, stride, 1, 1)
    data, xp2, pads2 = _conv_forward(mid, w_col.data, 1, 1, 1)
    out = _new(data)

    def vjp(g):
        dmid, dwc = _conv_backward(g, mid, xp2, pads2, w_col.data, 1, 1, 1)
        dx, dwr = _conv_backward(dmid, x.data, xp1, pads1, w_row.data, stride, 1, 1)
        return dx, dwr, dwc

    record("factored_conv_1xN_Nx1", [out], [x, w_row, w_col], vjp)
    return out


# --- pooling ----------------------------------------------------------------------


def avg_pool(x: Tensor, size: int, stride: int = 1) -> Tensor:
    """Average over the window, excluding padded positions from the count."""
    _check(x.ndim == 4, "avg_pool", f"expected NHWC input, got {x.shape}")
    ho, wo, pads = _conv_geometry(x.data, size, size, stride, 1)
    xp = np.pad(x.data, pads)
    ones = np.pad(np.ones((1,) + x.shape[1:3] + (1,), dtype=x.data.dtype), pads)
    total = np.zeros((x.shape[0], ho, wo, x.shape[3]), dtype=x.data.dtype)
    count = np.zeros((1, ho, wo, 1), dtype=x.data.dtype)
    for i in range(size):
        for j in range(size):
            win = _window(xp, i, j, stride, 1, ho, wo)
            total += xp[win]
            count += ones[win]
    out = _new(total / count)

    def vjp(g):
        dxp = np.zeros_like(xp)
        gc = g / count
        for i in range(size):
            for j in range(size):
                dxp[_window(xp, i, j, stride, 1, ho, wo)] += gc
        (_, _), (pt, _), (pl, _), _ = pads
        return (dxp[:, pt : pt + x.shape[1], pl : pl + x.shape[2], :],)

    record("avg_pool", [out], [x], vjp)
    return out


def _max_along(a: np.ndarray, axis: int, size: int, stride: int, n_out: int):
    """Strided 1-D running max along ``axis``; returns the result and a gradient router."""

    def sl(k):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(k, k + stride * (n_out - 1) + 1, stride)
        return tuple(idx)

    best = a[sl(0)].copy()
    for k in range(1, size):
        np.maximum(best, a[sl(k)], out=best)

    def route(g):
        da = np.zeros_like(a)
        free = np.ones(best.shape, dtype=bool)
        for k in range(size):
            hit = (a[sl(k)] == best) & free
            da[sl(k)] += g * hit
            free &= ~hit
        return da

    return best, route


def max_pool(x: Tensor, size: int, stride: int = 1) -> Tensor:
    """Square-window max, computed as a row max followed by a column max.

    The gradient goes to the first maximal element of each window.
    """
    _check(x.ndim == 4, "max_pool", f"expected NHWC input, got {x.shape}")
    ho, wo, pads = _conv_geometry(x.data, size, size, stride, 1)
    xp = np.pad(x.data, pads, constant_values=-np.inf)
    rows, route_w = _max_along(xp, 2, size, stride, wo)
    best, route_h = _max_along(rows, 1, size, stride, ho)
    out = _new(best)

    def vjp(g):
        dxp = route_w(route_h(g))
        (_, _), (pt, _), (pl, _), _ = pads
        return (dxp[:, pt : pt + x.shape[1], pl : pl + x.shape[2], :],)

    record("max_pool", [out], [x], vjp)
    return out


# --- batch norm ---------------------------------------------------------------------


def _channel_sum(a: np.ndarray) -> np.ndarray:
    """Sum over every axis but the last; a ones-vector matmul is much faster than ``sum`` over 3 axes."""
    flat = a.reshape(-1, a.shape[-1])
    return np.ones(flat.shape[0], dtype=a.dtype) @ flat


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Normalize over every axis but the last.

    Training mode uses batch statistics and updates ``running_mean`` and
    ``running_var`` in place; evaluation mode uses the running statistics.
    """
    c = x.shape[-1]
    _check(gamma.shape == (c,) and beta.shape == (c,), "batch_norm", f"scale/shift must be ({c},)")
    m = x.data.size // c
    if training:
        mu = _channel_sum(x.data) / m
        centered = x.data - mu
        var = _channel_sum(centered * centered) / m
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1 - momentum) * mu
        if running_var is not None:
            running_var *= momentum
            running_var += (1 - momentum) * var
    else:
        _check(running_mean is not None and running_var is not None, "batch_norm", "eval mode needs running stats")
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = _new((xhat * gamma.data + beta.data).astype(x.data.dtype))

    def vjp(g):
        dgamma = _channel_sum(g * xhat)
        dbeta = _channel_sum(g)
        dxhat = g * gamma.data
        if training:
            dx = inv_std / m * (m * dxhat - _channel_sum(dxhat) - xhat * _channel_sum(dxhat * xhat))
        else:
            dx = dxhat * inv_std
        return dx.astype(x.data.dtype), dgamma, dbeta

    record("batch_norm", [out], [x, gamma, beta], vjp)
    return out
