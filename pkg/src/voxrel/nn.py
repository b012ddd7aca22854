"""Neural-network kernels: forward passes and hand-derived gradients.

Layout conventions: activations are (N, C, X, Y, Z) arrays for volumetric
layers and (N, D) for dense layers; convolution kernels are
(F, C, kx, ky, kz) with odd extents, applied at stride 1 with zero "same"
padding. Training runs in float32; every kernel also accepts float64 so
gradients can be checked against central finite differences at full
precision. Explicit reductions (means, sums of gradients, the loss)
accumulate in float64 and cast back to the input dtype.

Parallelism contract: any threading lives inside BLAS calls whose
per-element accumulation order is fixed, so results do not depend on
thread count.
"""

from __future__ import annotations

from itertools import product

import numpy as np

from .errors import ValidationError


# ---------------------------------------------------------------------------
# convolution


def _check_conv_args(x, w, b):
    if x.ndim != 5 or w.ndim != 5:
        raise ValidationError("conv3d expects x (N,C,X,Y,Z) and w (F,C,kx,ky,kz)")
    if x.shape[1] != w.shape[1]:
        raise ValidationError(f"channel mismatch: x has {x.shape[1]}, w expects {w.shape[1]}")
    if any(k % 2 == 0 for k in w.shape[2:]):
        raise ValidationError("conv3d kernels must have odd extents")
    if b.shape != (w.shape[0],):
        raise ValidationError("bias must have one entry per filter")


def _pad_same(x, kdims):
    px, py, pz = (k // 2 for k in kdims)
    n, c, X, Y, Z = x.shape
    xp = np.zeros((n, c, X + 2 * px, Y + 2 * py, Z + 2 * pz), dtype=x.dtype)
    xp[:, :, px : px + X, py : py + Y, pz : pz + Z] = x
    return xp


def _im2col(x: np.ndarray, kdims) -> np.ndarray:
    """Gather every kernel window into columns: (N, C*kx*ky*kz, X*Y*Z).

    Column index order matches w.reshape(F, -1), so one matmul per batch
    computes the whole correlation.
    """
    n, c, X, Y, Z = x.shape
    kx, ky, kz = kdims
    xp = _pad_same(x, kdims)
    sn, sc, sx, sy, sz = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kx, ky, kz, X, Y, Z),
        strides=(sn, sc, sx, sy, sz, sx, sy, sz),
        writeable=False,
    )
    return view.reshape(n, c * kx * ky * kz, X * Y * Z)


def conv3d_with_col(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """conv3d that also returns the gathered column matrix for gradient reuse."""
    _check_conv_args(x, w, b)
    n, c, X, Y, Z = x.shape
    f = w.shape[0]
    col = _im2col(x, w.shape[2:])
    y = np.matmul(w.reshape(f, -1), col).reshape(n, f, X, Y, Z)
    y += b.reshape(1, f, 1, 1, 1)
    return y, col


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-1 zero-padded correlation; output spatial dims equal input's.

    y[n,f,p] = b[f] + sum_{c,o} w[f,c,o] * x[n,c,p+o-center]
    """
    return conv3d_with_col(x, w, b)[0]


def _flip_transpose(w: np.ndarray) -> np.ndarray:
    """Kernel of the adjoint: swap filter/channel axes and mirror all offsets."""
    return np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))


def conv3d_input_grad(w: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """d(sum(conv3d(x, w, b) * dy))/dx; spatial dims match dy (same padding).

    With symmetric zero padding the adjoint of a stride-1 correlation is the
    correlation with the flipped, channel-transposed kernel.
    """
    n, f, X, Y, Z = dy.shape
    wt = _flip_transpose(w)
    c = wt.shape[0]
    col = _im2col(dy, wt.shape[2:])
    return np.matmul(wt.reshape(c, -1), col).reshape(n, c, X, Y, Z)


def conv3d_backward(
    x: np.ndarray,
    w: np.ndarray,
    dy: np.ndarray,
    need_dx: bool = True,
    col: np.ndarray | None = None,
):
    """Gradients of a conv3d output sum weighted by dy; returns (dx, dw, db).

    need_dx=False skips the input gradient (dx comes back None), which the
    first layer of a network never needs. col may pass in the column matrix
    from conv3d_with_col to avoid regathering x.
    """
    n, c, X, Y, Z = x.shape
    f = w.shape[0]
    if col is None:
        col = _im2col(x, w.shape[2:])
    dy2 = dy.reshape(n, f, X * Y * Z)
    dw = np.matmul(dy2, col.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape).astype(w.dtype, copy=False)
    dx = conv3d_input_grad(w, dy) if need_dx else None
    db = dy.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(dy.dtype)
    return dx, dw, db


# ---------------------------------------------------------------------------
# max pooling (2x2x2 window, stride 2, odd remainders dropped)


def maxpool3d(x: np.ndarray):
    """Returns (y, argmax) where argmax holds the within-window winner index.

    Windows are flattened in (wx, wy, wz) lexicographic order (wz fastest);
    ties take the first position in that order, so a constant window selects
    index 0.
    """
    n, c, X, Y, Z = x.shape
    if min(X, Y, Z) < 2:
        raise ValidationError(f"maxpool3d needs every spatial extent >= 2, got {(X, Y, Z)}")
    ox, oy, oz = X // 2, Y // 2, Z // 2
    xv = x[:, :, : 2 * ox, : 2 * oy, : 2 * oz]
    xw = xv.reshape(n, c, ox, 2, oy, 2, oz, 2)
    xw = np.ascontiguousarray(xw.transpose(0, 1, 2, 4, 6, 3, 5, 7)).reshape(n, c, ox, oy, oz, 8)
    arg = xw.argmax(axis=-1).astype(np.uint8)
    y = np.take_along_axis(xw, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return y, arg


def maxpool3d_backward(x_shape, arg: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Route dy to each window's winner; cropped odd remainders get zero."""
    n, c, X, Y, Z = x_shape
    ox, oy, oz = X // 2, Y // 2, Z // 2
    dxw = np.zeros((n, c, ox, oy, oz, 8), dtype=dy.dtype)
    np.put_along_axis(dxw, arg[..., None].astype(np.intp), dy[..., None], axis=-1)
    dxw = dxw.reshape(n, c, ox, oy, oz, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    dx = np.zeros((n, c, X, Y, Z), dtype=dy.dtype)
    dx[:, :, : 2 * ox, : 2 * oy, : 2 * oz] = dxw.reshape(n, c, 2 * ox, 2 * oy, 2 * oz)
    return dx


# ---------------------------------------------------------------------------
# batch normalization (channel axis 1, population statistics)


def batchnorm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    mode: str,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float = 0.1,
    eps: float = 1e-5,
):
    """Normalize per channel; returns (y, cache, new_running_mean, new_running_var).

    Train mode uses biased batch statistics over all non-channel axes and
    nudges the running stats by `momentum` toward them; infer mode uses the
    running stats unchanged. cache is None in infer mode. Zero-variance
    channels are legal (eps guards) and counted in cache["zero_variance"].
    """
    if mode not in ("train", "infer"):
        raise ValidationError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")
    c = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, c) + (1,) * (x.ndim - 2)
    if mode == "infer":
        inv = 1.0 / np.sqrt(running_var + eps)
        y = gamma.reshape(shape) * (x - running_mean.reshape(shape).astype(x.dtype)) * inv.reshape(shape).astype(x.dtype)
        y += beta.reshape(shape)
        return y, None, running_mean, running_var
    mu64 = x.mean(axis=axes, dtype=np.float64)
    var64 = np.square(x.astype(np.float64) - mu64.reshape(shape)).mean(axis=axes)
    mu = mu64.astype(x.dtype)
    var = var64.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var64 + eps)).astype(x.dtype)
    xhat = (x - mu.reshape(shape)) * inv_std.reshape(shape)
    y = gamma.reshape(shape) * xhat + beta.reshape(shape)
    new_mean = ((1.0 - momentum) * running_mean.astype(np.float64) + momentum * mu64).astype(running_mean.dtype)
    new_var = ((1.0 - momentum) * running_var.astype(np.float64) + momentum * var64).astype(running_var.dtype)
    cache = {
        "x": x,
        "xhat": xhat,
        "inv_std": inv_std,
        "zero_variance": int((var64 == 0.0).sum()),
    }
    return y, cache, new_mean, new_var


def batchnorm_backward(cache: dict, gamma: np.ndarray, dy: np.ndarray):
    """Returns (dx, dgamma, dbeta) for train-mode batchnorm."""
    xhat = cache["xhat"]
    inv_std = cache["inv_std"]
    c = xhat.shape[1]
    axes = (0,) + tuple(range(2, xhat.ndim))
    shape = (1, c) + (1,) * (xhat.ndim - 2)
    m = xhat.size // c
    dbeta = dy.sum(axis=axes, dtype=np.float64)
    dgamma = (dy * xhat).sum(axis=axes, dtype=np.float64)
    dx = (gamma * inv_std).reshape(shape) * (
        dy
        - (dbeta / m).reshape(shape).astype(dy.dtype)
        - xhat * (dgamma / m).reshape(shape).astype(dy.dtype)
    )
    return dx, dgamma.astype(gamma.dtype), dbeta.astype(gamma.dtype)


# ---------------------------------------------------------------------------
# dense / activation / loss


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValidationError(f"dense shape mismatch: x {x.shape}, w {w.shape}")
    return x @ w + b


def dense_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    dx = dy @ w.T
    dw = x.T @ dy
    db = dy.sum(axis=0, dtype=np.float64).astype(dy.dtype)
    return dx, dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shifted by the row max so large logits cannot overflow."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood; returns (loss, d_logits).

    d_logits is (softmax - onehot) / N, the exact gradient of the mean loss.
    """
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValidationError("labels must be one integer per row")
    if labels.min() < 0 or labels.max() >= k:
        raise ValidationError(f"label out of range for {k} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(n), labels]
    loss = float(np.mean((lse - picked).astype(np.float64)))
    d = softmax(logits)
    d[np.arange(n), labels] -= 1.0
    d /= n
    return loss, d.astype(logits.dtype)


def dropout(x: np.ndarray, p: float, mode: str, rng: np.random.Generator):
    """Inverted dropout; returns (y, keep_mask). Infer mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {p}")
    if mode == "infer" or p == 0.0:
        return x, np.ones(x.shape, dtype=bool)
    mask = rng.random(x.shape) >= p
    y = x * mask.astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    return y, mask


# ---------------------------------------------------------------------------
# finite differences


def numerical_gradient(f, params: list[np.ndarray], eps: float = 1e-4) -> list[np.ndarray]:
    """Central-difference gradient of scalar f() w.r.t. each array in params.

    f is re-evaluated with single elements perturbed in place; arrays are
    restored afterwards. Use float64 params or the O(eps^2) truncation error
    will be swamped by rounding.
    """
    grads = []
    for p in params:
        g = np.zeros(p.shape, dtype=np.float64)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + eps
            f_plus = float(f())
            p[idx] = orig - eps
            f_minus = float(f())
            p[idx] = orig
            g[idx] = (f_plus - f_minus) / (2.0 * eps)
            it.iternext()
        grads.append(g)
    return grads
