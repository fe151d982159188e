"""Differentiable operations.

Each op computes its forward value with numpy and, when any input requires a
gradient, attaches a closure that pushes the output gradient to its inputs.
Broadcasting is limited to what the model needs (bias rows, per-row scales).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .tensor import ShapeError, Tensor, as_tensor, needs_grad

LN_EPS = 1e-5


def _result(data, parents, backward_fn, op):
    parents = tuple(parents)
    if needs_grad(*parents):
        return Tensor(data, True, parents, backward_fn, op, dtype=data.dtype)
    return Tensor(data, False, (), None, op, dtype=data.dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def segment_sum(values: np.ndarray, index: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n_rows`` buckets given by ``index``."""
    index = np.asarray(index, dtype=np.int64)
    if values.shape[0] != index.shape[0]:
        raise ShapeError(
            f"scatter_add_rows: values {values.shape} and index {index.shape} disagree"
        )
    flat = values.reshape(values.shape[0], -1)
    if index.size == 0:
        return np.zeros((n_rows,) + values.shape[1:], dtype=values.dtype)
    onehot = sp.csr_matrix(
        (np.ones(index.size, dtype=values.dtype), (index, np.arange(index.size))),
        shape=(n_rows, index.size),
    )
    out = np.asarray(onehot @ flat, dtype=values.dtype)
    return out.reshape((n_rows,) + values.shape[1:])


# ----------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return _result(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.shape))

    return _result(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), bw, "mul")


def mul_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    out = a.data * a.data.dtype.type(c)

    def bw(g):
        a.accumulate(g * c)

    return _result(out, (a,), bw, "mul_scalar")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return _result(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis of a 2-D or 3-D input."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} for weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        if x.requires_grad:
            x.accumulate((g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            weight.accumulate(x2.T @ g2)
        if bias is not None and bias.requires_grad:
            bias.accumulate(g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw, "linear")


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            x.accumulate(np.broadcast_to(g, x.shape))
        else:
            x.accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _result(out, (x,), bw, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul_scalar(sum(x, axis), 1.0 / max(n, 1))


def weighted_sum(x, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` with constant weights."""
    x = as_tensor(x)
    w = np.asarray(weights, dtype=x.data.dtype)
    if w.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs values {x.shape}")
    out = np.asarray((x.data * w).sum())

    def bw(g):
        x.accumulate(g * w)

    return _result(out, (x,), bw, "weighted_sum")


def masked_mean(x, mask: np.ndarray, axis: int = 0) -> Tensor:
    """Mean of ``x`` along ``axis`` counting only entries where ``mask`` is set."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=x.data.dtype)
    if m.shape != x.shape[: m.ndim]:
        raise ShapeError(f"masked_mean: mask {m.shape} vs values {x.shape}")
    m = m.reshape(m.shape + (1,) * (x.ndim - m.ndim))
    count = np.maximum(m.sum(axis=axis, keepdims=True), 1.0)
    scale = m / count
    out = (x.data * scale).sum(axis=axis)

    def bw(g):
        x.accumulate(np.expand_dims(g, axis) * scale * np.ones_like(x.data))

    return _result(out, (x,), bw, "masked_mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bw(g):
        x.accumulate(g.reshape(x.shape))

    return _result(out, (x,), bw, "reshape")


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[key])

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        x.accumulate(full)

    return _result(out, (x,), bw, "getitem")


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ShapeError("concat: no inputs")
    ax = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
            t.shape[i] != xs[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {xs[0].shape} and {t.shape}")
    out = np.concatenate([t.data for t in xs], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def bw(g):
        for t, part in zip(xs, np.split(g, splits, axis=ax)):
            if t.requires_grad:
                t.accumulate(part)

    return _result(out, xs, bw, "concat")


def cumsum(x, axis: int) -> Tensor:
    x = as_tensor(x)
    out = np.cumsum(x.data, axis=axis)

    def bw(g):
        x.accumulate(np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))

    return _result(out, (x,), bw, "cumsum")


def gather_rows(x, index: np.ndarray) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {x.shape}")
    out = x.data[index]

    def bw(g):
        x.accumulate(segment_sum(g, index, x.shape[0]))

    return _result(out, (x,), bw, "gather_rows")


def scatter_add_rows(src, index: np.ndarray, n_rows: int) -> Tensor:
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise ShapeError(f"scatter_add_rows: index out of range for {n_rows} rows")
    out = segment_sum(src.data, index, n_rows)

    def bw(g):
        src.accumulate(g[index])

    return _result(out, (src,), bw, "scatter_add_rows")


# ---------------------------------------------------------------- nonlinear


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.data.dtype)

    def bw(g):
        x.accumulate(g * pos)

    return _result(out, (x,), bw, "relu")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(x.data)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        x.accumulate(np.where(out > 0, g / (2 * safe), 0.0))

    return _result(out, (x,), bw, "sqrt")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: nonpositive input")
    out = np.log(x.data)

    def bw(g):
        x.accumulate(g / x.data)

    return _result(out, (x,), bw, "log")


def norm(x, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
    x = as_tensor(x)
    out = np.sqrt((x.data**2).sum(axis=axis))

    def bw(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0, n, 1.0)
        x.accumulate(np.where(n > 0, np.expand_dims(g, axis) * x.data / safe, 0.0))

    return _result(out, (x,), bw, "norm")


def layer_norm(x, gamma=None, beta=None, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    x = as_tensor(x)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    parents = [x]
    if gamma is not None:
        gamma = as_tensor(gamma)
        if gamma.shape != (d,):
            raise ShapeError(f"layer_norm: gamma {gamma.shape} for input {x.shape}")
        out = out * gamma.data
        parents.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        if beta.shape != (d,):
            raise ShapeError(f"layer_norm: beta {beta.shape} for input {x.shape}")
        out = out + beta.data
        parents.append(beta)
    out = out.astype(x.data.dtype)

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        if gamma is not None and gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=lead))
        if beta is not None and beta.requires_grad:
            beta.accumulate(g.sum(axis=lead))
        if x.requires_grad:
            gx = g * gamma.data if gamma is not None else g
            gx = inv * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )
            x.accumulate(gx)

    return _result(out, parents, bw, "layer_norm")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x.accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        x.accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return _result(out, (x,), bw, "log_softmax")


def conv1d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Temporal convolution, channels last.

    ``x`` is (N, L, C_in), ``weight`` is (k, C_in, C_out) with odd ``k``;
    zero padding of ``k // 2`` on both ends.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} and {weight.shape}")
    k = weight.shape[0]
    if k % 2 != 1:
        raise ShapeError(f"conv1d: kernel size must be odd, got {k}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[2],):
            raise ShapeError(f"conv1d: bias shape {bias.shape} for weight {weight.shape}")
    n, length, cin = x.shape
    pad = k // 2
    lout = (length + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    taps = [xp[:, j : j + stride * (lout - 1) + 1 : stride, :] for j in range(k)]
    cols = np.concatenate(taps, axis=2).reshape(n * lout, k * cin)
    wmat = weight.data.reshape(k * cin, -1)
    out = (cols @ wmat).reshape(n, lout, -1)
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(n * lout, -1)
        if weight.requires_grad:
            weight.accumulate((cols.T @ g2).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, lout, k, cin)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j : j + stride * (lout - 1) + 1 : stride, :] += gcols[:, :, j, :]
            x.accumulate(gxp[:, pad : pad + length, :])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw, "conv1d")


# -------------------------------------------------------------------- losses


def _reduce(values: Tensor, reduction: str) -> Tensor:
    if reduction == "none":
        return values
    if reduction == "sum":
        return sum(values)
    if reduction == "mean":
        return mean(values)
    raise ValueError(f"unknown reduction {reduction!r}")


def smooth_l1(pred, target, beta: float = 1.0, reduction: str = "mean") -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1: incompatible shapes {pred.shape} and {target.shape}")
    d = pred.data - target.data
    ad = np.abs(d)
    quad = ad < beta
    out = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta).astype(pred.data.dtype)

    def bw(g):
        dd = np.where(quad, d / beta, np.sign(d)) * g
        if pred.requires_grad:
            pred.accumulate(dd)
        if target.requires_grad:
            target.accumulate(-dd)

    return _reduce(_result(out, (pred, target), bw, "smooth_l1"), reduction)


def mse(pred, target, reduction: str = "mean") -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: incompatible shapes {pred.shape} and {target.shape}")
    d = pred.data - target.data
    out = d * d

    def bw(g):
        if pred.requires_grad:
            pred.accumulate(2 * d * g)
        if target.requires_grad:
            target.accumulate(-2 * d * g)

    return _reduce(_result(out, (pred, target), bw, "mse"), reduction)


def cross_entropy(logits, targets: np.ndarray, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of (n, C) logits against integer class targets."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: incompatible shapes {logits.shape} and {targets.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ValueError("cross_entropy: target class out of range")
    lsm = log_softmax(logits, axis=1)
    picked = getitem(lsm, (np.arange(targets.size), targets))
    return _reduce(mul_scalar(picked, -1.0), reduction)


def _log_sigmoid(z: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -z)


def focal_loss(
    logits, targets: np.ndarray, gamma: float = 2.0, alpha: float | None = 0.25,
    reduction: str = "mean",
) -> Tensor:
    """Binary focal loss on raw logits.

    ``alpha`` weights positives by ``alpha`` and negatives by ``1 - alpha``;
    ``alpha=None`` disables class weighting, which with ``gamma=0`` is plain
    binary cross-entropy.
    """
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"focal_loss: incompatible shapes {logits.shape} and {y.shape}")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("focal_loss: targets must be 0 or 1")
    z = logits.data
    # signed logit so that p_t = sigmoid(s)
    sign = 2 * y - 1
    s = sign * z
    log_pt = _log_sigmoid(s)
    pt = np.exp(log_pt)
    one_m = 1.0 - pt
    if alpha is None:
        a_t = np.ones_like(z)
    else:
        a_t = np.where(y == 1, alpha, 1.0 - alpha)
    mod = one_m**gamma
    out = (-a_t * mod * log_pt).astype(z.dtype)

    def bw(g):
        # d/ds of -(1-p)^gamma log p with p = sigmoid(s)
        if gamma == 0:
            dmod = 0.0
        else:
            dmod = -gamma * one_m ** (gamma - 1) * pt * one_m
        ds = -(dmod * log_pt + mod * one_m)
        logits.accumulate(g * a_t * ds * sign)

    return _reduce(_result(out, (logits,), bw, "focal_loss"), reduction)
