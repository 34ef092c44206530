"""Layer primitives with explicit forward/backward, and an Adam updater.

Tensors are plain numpy arrays (NCHW for images). Parameters are stored as
float32; matrix products and reductions accumulate in float64 and the result
is cast back to the input dtype, so float64 inputs stay float64 end to end
(which is what the gradient checks use).

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes that cache.
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ShapeError

F64 = np.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# --------------------------------------------------------------------- conv

def conv2d_forward(x, weight, bias, stride=1, padding=0):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got {x.ndim} dims", dim="ndim", expected=4, got=x.ndim)
    o, i, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("conv2d kernel must be square", dim="kernel", expected=k, got=k2)
    if x.shape[1] != i:
        raise ShapeError(f"conv2d input has {x.shape[1]} channels, weight expects {i}",
                         dim="in_channels", expected=i, got=x.shape[1])
    if bias.shape != (o,):
        raise ShapeError(f"conv2d bias has shape {bias.shape}, expected ({o},)",
                         dim="out_channels", expected=o, got=bias.shape[0] if bias.ndim else None)
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d needs stride >= 1 and padding >= 0", dim="stride")
    n, _, h, w = x.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be empty for input {h}x{w}", dim="spatial")
    cols = kernels.im2col(x, k, stride, padding)
    w2 = weight.reshape(o, -1)
    out = cols.astype(F64) @ w2.T.astype(F64) + bias.astype(F64)
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2).astype(x.dtype)
    cache = (x.shape, cols, weight, stride, padding)
    return np.ascontiguousarray(out), cache


def conv2d_backward(dout, cache):
    x_shape, cols, weight, stride, padding = cache
    o, _, k, _ = weight.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o).astype(F64)
    dw = (d2.T @ cols.astype(F64)).reshape(weight.shape).astype(weight.dtype)
    db = d2.sum(axis=0).astype(weight.dtype)
    dcols = (d2 @ weight.reshape(o, -1).astype(F64)).astype(dout.dtype)
    dx = kernels.col2im(dcols, x_shape, k, stride, padding)
    return dx, dw, db


# -------------------------------------------------------------------- dense

def dense_forward(x, weight, bias):
    """``x`` is (N, N_in) or a single vector (N_in,)."""
    if weight.ndim != 2:
        raise ShapeError("dense weight must be a matrix", dim="weight", expected=2, got=weight.ndim)
    n_out, n_in = weight.shape
    if x.shape[-1] != n_in:
        raise ShapeError(f"dense input has {x.shape[-1]} features, weight expects {n_in}",
                         dim="in_features", expected=n_in, got=x.shape[-1])
    if bias.shape != (n_out,):
        raise ShapeError(f"dense bias has shape {bias.shape}, expected ({n_out},)",
                         dim="out_features", expected=n_out, got=bias.shape)
    out = (x.astype(F64) @ weight.T.astype(F64) + bias.astype(F64)).astype(x.dtype)
    return out, (x, weight)


def dense_backward(dout, cache):
    x, weight = cache
    x2 = np.atleast_2d(x).astype(F64)
    d2 = np.atleast_2d(dout).astype(F64)
    dw = (d2.T @ x2).astype(weight.dtype)
    db = d2.sum(axis=0).astype(weight.dtype)
    dx = (d2 @ weight.astype(F64)).astype(dout.dtype).reshape(x.shape)
    return dx, dw, db


# ------------------------------------------------------ relu, pool, avgpool

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    # subgradient at exactly 0 is 0
    return dout * mask


def maxpool2_forward(x):
    if x.ndim != 4:
        raise ShapeError("maxpool2 expects NCHW input", dim="ndim", expected=4, got=x.ndim)
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}",
                         dim="height" if h % 2 else "width", got=(h, w))
    out, idx = kernels.maxpool2_forward(x)
    return out, (x.shape, idx)


def maxpool2_backward(dout, cache):
    x_shape, idx = cache
    return kernels.maxpool2_backward(dout, idx, x_shape)


def globalavgpool_forward(x):
    if x.ndim != 4:
        raise ShapeError("globalavgpool expects NCHW input", dim="ndim", expected=4, got=x.ndim)
    return x.mean(axis=(2, 3), dtype=F64).astype(x.dtype), x.shape


def globalavgpool_backward(dout, x_shape):
    hw = x_shape[2] * x_shape[3]
    return np.broadcast_to((dout / hw)[:, :, None, None], x_shape).astype(dout.dtype)


# ---------------------------------------------------------------- batchnorm

def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode="train",
                      momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch normalisation over N (and H, W for 4-d input).

    In ``train`` mode the running statistics are updated in place
    (``running = (1 - momentum) * running + momentum * batch``; the variance
    uses the unbiased batch estimate).
    """
    c = x.shape[1]
    for name, v in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if v.shape != (c,):
            raise ShapeError(f"batchnorm {name} has shape {v.shape}, input has {c} channels",
                             dim="channels", expected=c, got=v.shape)
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    bshape = (1, c, 1, 1) if x.ndim == 4 else (1, c)
    xd = x.astype(F64)
    if mode == "train":
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = x.size // c
        unbiased = var * m / (m - 1) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += (momentum * mean).astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += (momentum * unbiased).astype(running_var.dtype)
    elif mode == "inference":
        mean = running_mean.astype(F64)
        var = running_var.astype(F64)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.astype(F64).reshape(bshape) + beta.astype(F64).reshape(bshape)
    return out.astype(x.dtype), (xhat, inv_std, gamma, mode, axes, bshape, x.dtype)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, mode, axes, bshape, dtype = cache
    d = dout.astype(F64)
    dgamma = (d * xhat).sum(axis=axes)
    dbeta = d.sum(axis=axes)
    g = gamma.astype(F64).reshape(bshape)
    if mode == "train":
        m = d.size // d.shape[1]
        dxhat = d * g
        dx = (inv_std.reshape(bshape) / m) * (
            m * dxhat - dxhat.sum(axis=axes).reshape(bshape)
            - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape))
    else:
        dx = d * g * inv_std.reshape(bshape)
    return dx.astype(dtype), dgamma.astype(gamma.dtype), dbeta.astype(gamma.dtype)


# -------------------------------------------------------------------- loss

def softmax_xent(logits, labels):
    """Mean cross-entropy. Returns ``(loss, dlogits)`` with
    ``dlogits = (softmax - onehot) / N``."""
    logits = np.atleast_2d(logits)
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}", dim="batch", expected=n,
                         got=labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.astype(F64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    d = np.exp(logp)
    d[rows, labels] -= 1.0
    return loss, (d / n).astype(logits.dtype)


# -------------------------------------------------------------------- adam

@dataclass
class ParamState:
    value: np.ndarray
    grad: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        for name in ("grad", "m", "v"):
            cur = getattr(self, name)
            if cur is None:
                setattr(self, name, np.zeros_like(self.value))
            elif cur.shape != self.value.shape:
                raise ShapeError(f"{name} shape {cur.shape} != value shape {self.value.shape}", dim=name)

    def copy(self):
        return ParamState(self.value.copy(), self.grad.copy(), self.m.copy(), self.v.copy(), self.step)


def adam_step(p, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update (minimisation). Returns a new state with
    the gradient cleared; ``p`` itself is not modified."""
    g = p.grad.astype(F64)
    step = p.step + 1
    m = beta1 * p.m.astype(F64) + (1 - beta1) * g
    v = beta2 * p.v.astype(F64) + (1 - beta2) * g * g
    mhat = m / (1 - beta1 ** step)
    vhat = v / (1 - beta2 ** step)
    value = p.value.astype(F64) - lr * mhat / (np.sqrt(vhat) + eps)
    dt = p.value.dtype
    return ParamState(value.astype(dt), np.zeros_like(p.value), m.astype(dt), v.astype(dt), step)


@dataclass
class ParamStore:
    """Named trainable parameters plus non-trainable buffers (BN running stats).

    ``version`` is bumped on every update so forward caches can detect that
    they are stale.
    """
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    version: int = 0

    def __getitem__(self, name):
        return self.params[name].value

    def zero_grad(self):
        for p in self.params.values():
            p.grad[...] = 0

    def step(self, lr, names=None):
        for name in self.params if names is None else names:
            self.params[name] = adam_step(self.params[name], lr)
        self.version += 1

    def copy(self):
        return ParamStore({k: p.copy() for k, p in self.params.items()},
                          {k: b.copy() for k, b in self.buffers.items()}, self.version)
