"""Layer vocabulary for the two models.

Activations use NCHW layout.  Convolutions transpose to NHWC internally and
accumulate one matrix product per kernel offset, which keeps memory at the
size of the activations instead of an im2col buffer.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .graph import Parameter, ParameterStore


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def resolve_padding(padding, kernel_hw) -> tuple[int, int]:
    """``'same'`` (odd kernels, stride 1), ``'valid'``, an int or a pair."""
    if padding == "same":
        kh, kw = kernel_hw
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("'same' padding needs odd kernel sizes")
        return kh // 2, kw // 2
    if padding == "valid":
        return 0, 0
    return _pair(padding)


def conv_output_hw(h, w, kernel_hw, stride, padding) -> tuple[int, int]:
    kh, kw = kernel_hw
    sh, sw = _pair(stride)
    ph, pw = resolve_padding(padding, kernel_hw)
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def conv2d(x, w, b=None, stride=1, padding=0, return_cache=False):
    """2D cross-correlation with bias.

    Args:
        x: input of shape (C_in, H, W) or (B, C_in, H, W).
        w: kernels of shape (C_out, C_in, h, w).
        b: optional bias of shape (C_out,).
        stride: int or (sh, sw).
        padding: int, pair, ``'same'`` or ``'valid'``; zero padding.

    Returns:
        Output of shape (C_out, H', W') or (B, C_out, H', W'), and the backward
        cache when ``return_cache`` is set.
    """
    x = np.asarray(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    B, C, H, W = x.shape
    co, ci, kh, kw = w.shape
    if ci != C:
        raise ValueError(f"input has {C} channels, kernels expect {ci}")
    sh, sw = _pair(stride)
    ph, pw = resolve_padding(padding, (kh, kw))
    Ho, Wo = conv_output_hw(H, W, (kh, kw), (sh, sw), (ph, pw))

    xp = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    wk = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    out = np.zeros((B, Ho, Wo, co), dtype=np.result_type(x.dtype, w.dtype))
    hs, ws = sh * (Ho - 1) + 1, sw * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + hs:sh, j:j + ws:sw, :] @ wk[i, j]
    if b is not None:
        out += b
    y = out.transpose(0, 3, 1, 2)
    if squeeze:
        y = y[0]
    if return_cache:
        return y, (xp, wk, (H, W), (sh, sw), (ph, pw), squeeze)
    return y


def conv2d_backward(gy, cache, input_grad=True):
    """Gradients (dx, dw, db) for :func:`conv2d` given its cache.

    ``dx`` is None when ``input_grad`` is false.
    """
    xp, wk, (H, W), (sh, sw), (ph, pw), squeeze = cache
    if squeeze:
        gy = gy[None]
    g = np.ascontiguousarray(gy.transpose(0, 2, 3, 1))
    B, Ho, Wo, co = g.shape
    kh, kw = wk.shape[:2]
    hs, ws = sh * (Ho - 1) + 1, sw * (Wo - 1) + 1
    dxp = np.zeros_like(xp) if input_grad else None
    dwk = np.empty_like(wk)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, i:i + hs:sh, j:j + ws:sw, :]
            # batched (W' x C)^T (W' x C_out) products avoid copying the strided slice
            dwk[i, j] = np.matmul(xs.transpose(0, 1, 3, 2), g).sum(axis=(0, 1))
            if input_grad:
                dxp[:, i:i + hs:sh, j:j + ws:sw, :] += g @ wk[i, j].T
    db = g.sum(axis=(0, 1, 2))
    dw = dwk.transpose(3, 2, 0, 1)
    if not input_grad:
        return None, dw, db
    dx = dxp[:, ph:ph + H, pw:pw + W, :].transpose(0, 3, 1, 2)
    if squeeze:
        dx = dx[0]
    return dx, dw, db


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float64):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Node:
    """Base node: stateless unless a subclass caches activations."""

    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, *xs, training=False, rng=None):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError


class Conv2D(Node):
    def __init__(self, weight: Parameter, bias: Parameter, stride=1, padding="same"):
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding
        # Graph clears this for convs fed directly by graph inputs
        self.input_grad = True
        self._cache = None

    @classmethod
    def create(cls, store: ParameterStore, name, c_in, c_out, kernel, rng, stride=1,
               padding="same", dtype=np.float64):
        kh, kw = _pair(kernel)
        w = glorot_uniform(rng, (c_out, c_in, kh, kw), c_in * kh * kw, c_out * kh * kw, dtype)
        return cls(store.add(f"{name}.kernel", w),
                   store.add(f"{name}.bias", np.zeros(c_out, dtype=dtype)),
                   stride=stride, padding=padding)

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training=False, rng=None):
        y, self._cache = conv2d(x, self.weight.value, self.bias.value, self.stride,
                                self.padding, return_cache=True)
        return y

    def backward(self, gy):
        dx, dw, db = conv2d_backward(gy, self._cache, self.input_grad)
        self.weight.grad += dw
        self.bias.grad += db
        return (dx,)


class Dense(Node):
    """Affine map x @ W + b with W of shape (n_in, n_out)."""

    def __init__(self, weight: Parameter, bias: Parameter):
        self.weight = weight
        self.bias = bias
        self._x = None

    @classmethod
    def create(cls, store: ParameterStore, name, n_in, n_out, rng, dtype=np.float64):
        w = glorot_uniform(rng, (n_in, n_out), n_in, n_out, dtype)
        return cls(store.add(f"{name}.kernel", w),
                   store.add(f"{name}.bias", np.zeros(n_out, dtype=dtype)))

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training=False, rng=None):
        self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, gy):
        self.weight.grad += self._x.T @ gy
        self.bias.grad += gy.sum(axis=0)
        return (gy @ self.weight.value.T,)


class ReLU(Node):
    def forward(self, x, training=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, gy):
        return (np.where(self._mask, gy, 0.0).astype(gy.dtype, copy=False),)


class Sigmoid(Node):
    def forward(self, x, training=False, rng=None):
        self._y = expit(x)
        return self._y

    def backward(self, gy):
        return (gy * self._y * (1.0 - self._y),)


class Softmax(Node):
    """Softmax over the last axis."""

    def forward(self, x, training=False, rng=None):
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        self._y = z / z.sum(axis=-1, keepdims=True)
        return self._y

    def backward(self, gy):
        s = self._y
        return (s * (gy - (gy * s).sum(axis=-1, keepdims=True)),)


class Dropout(Node):
    """Inverted dropout: survivors scaled by 1/(1-p) at train time, identity at eval."""

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self._mask = None

    def forward(self, x, training=False, rng=None):
        if not training or self.p == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        keep = rng.random(x.shape) >= self.p
        self._mask = keep.astype(x.dtype) / (1.0 - self.p)
        return x * self._mask

    def backward(self, gy):
        return (gy if self._mask is None else gy * self._mask,)


class MaxPool2D(Node):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a
    window are dropped."""

    def __init__(self, pool):
        self.pool = _pair(pool)

    def forward(self, x, training=False, rng=None):
        B, C, H, W = x.shape
        ph, pw = self.pool
        Ho, Wo = H // ph, W // pw
        if Ho == 0 or Wo == 0:
            raise ValueError(f"pool {self.pool} larger than input {H}x{W}")
        win = x[:, :, :Ho * ph, :Wo * pw].reshape(B, C, Ho, ph, Wo, pw)
        win = win.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, ph * pw)
        self._idx = win.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(win, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, gy):
        B, C, H, W = self._shape
        ph, pw = self.pool
        Ho, Wo = gy.shape[2:]
        onehot = np.arange(ph * pw) == self._idx[..., None]
        win = np.where(onehot, gy[..., None], 0.0).astype(gy.dtype, copy=False)
        win = win.reshape(B, C, Ho, Wo, ph, pw).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(self._shape, dtype=gy.dtype)
        dx[:, :, :Ho * ph, :Wo * pw] = win.reshape(B, C, Ho * ph, Wo * pw)
        return (dx,)


class Flatten(Node):
    def forward(self, x, training=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, gy):
        return (gy.reshape(self._shape),)


class Concat(Node):
    def __init__(self, axis: int = 1):
        self.axis = axis

    def forward(self, *xs, training=False, rng=None):
        self._sizes = [x.shape[self.axis] for x in xs]
        return np.concatenate(xs, axis=self.axis)

    def backward(self, gy):
        cuts = np.cumsum(self._sizes)[:-1]
        return tuple(np.split(gy, cuts, axis=self.axis))


class L2Distance(Node):
    """Row-wise Euclidean distance between two (B, k) inputs.

    The gradient at zero distance is taken as zero.
    """

    def forward(self, a, b, training=False, rng=None):
        self._diff = a - b
        self._d = np.sqrt((self._diff ** 2).sum(axis=1))
        return self._d

    def backward(self, gy):
        d = self._d
        scale = np.divide(gy, d, out=np.zeros_like(d), where=d > 0)
        ga = self._diff * scale[:, None]
        return ga, -ga
