"""Layers with hand-written reverse-mode gradients on ``(batch, channels, H, W)`` arrays.

Each layer caches what its backward pass needs during ``forward``; calling
``backward`` without a preceding ``forward`` raises. Arrays keep the dtype of
the input, so float64 inputs give a float64 pass for gradient checking.
"""

from __future__ import annotations

import numpy as np


class TapeError(RuntimeError):
    """Backward called without a matching forward."""


def check_tensor4(x: np.ndarray, name: str = "input") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4 or min(x.shape) < 1:
        raise ValueError(f"{name}: expected a (batch, channels, height, width) array, got shape {x.shape}")
    return x


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Patches of an NCHW array as a ``(B*Ho*Wo, kh*kw*C)`` matrix (kernel-major, channel-minor)."""
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    xh = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((B, Ho, Wo, kh, kw, C), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xh[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :]
    return cols.reshape(B * Ho * Wo, kh * kw * C), (B, C, H, W, Ho, Wo)


def _col2im(dcols: np.ndarray, dims, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    B, C, H, W, Ho, Wo = dims
    dcols = dcols.reshape(B, Ho, Wo, kh, kw, C)
    dxh = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxh[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += dcols[:, :, :, i, j, :]
    return dxh[:, pad : pad + H, pad : pad + W, :].transpose(0, 3, 1, 2)


def conv2d_forward(x, w, b, stride: int = 1, pad: int | None = None, name: str = "conv"):
    """Cross-correlation of ``x`` (B, C, H, W) with ``w`` (O, C, kh, kw) plus bias ``b`` (O,).

    ``pad=None`` means same-padding for odd kernels. Returns ``(out, cache)``.
    """
    x = check_tensor4(x, name)
    O, C, kh, kw = w.shape
    if x.shape[1] != C:
        raise ValueError(f"{name}: input has {x.shape[1]} channels, weights expect {C}")
    if b.shape != (O,):
        raise ValueError(f"{name}: bias shape {b.shape} does not match {O} output channels")
    if pad is None:
        pad = (kh - 1) // 2
    cols, dims = _im2col(x, kh, kw, stride, pad)
    wm = w.transpose(2, 3, 1, 0).reshape(kh * kw * C, O)
    B, _, _, _, Ho, Wo = dims
    out = (cols @ wm + b).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, wm, dims, w.shape, stride, pad)


def conv2d_backward(grad, cache):
    """Gradients ``(dx, dw, db)`` of a convolution given ``d loss / d out``."""
    cols, wm, dims, wshape, stride, pad = cache
    O, C, kh, kw = wshape
    go = grad.transpose(0, 2, 3, 1).reshape(-1, O)
    dw = (cols.T @ go).reshape(kh, kw, C, O).transpose(3, 2, 0, 1)
    db = go.sum(axis=0)
    dx = _col2im(go @ wm.T, dims, kh, kw, stride, pad)
    return np.ascontiguousarray(dx), np.ascontiguousarray(dw), db


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(grad, mask):
    return grad * mask


def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(grad, y):
    return grad * (1 - y * y)


def maxpool2_forward(x):
    """Non-overlapping 2x2 max pooling; ties route the gradient to the first maximum."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool: spatial dims {H}x{W} are not even")
    blocks = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(grad, cache):
    idx, shape = cache
    B, C, H, W = shape
    blocks = np.zeros((B, C, H // 2, W // 2, 4), dtype=grad.dtype)
    np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=-1)
    return blocks.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


def upsample2_forward(x):
    """Nearest-neighbour 2x upsampling."""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(grad):
    B, C, H, W = grad.shape
    return grad.reshape(B, C, H // 2, 2, W // 2, 2).sum(axis=(3, 5))


def mse_forward(pred, target):
    """Mean squared error over all elements."""
    diff = pred - target
    return float(np.mean(diff * diff)), diff


def mse_backward(diff):
    return 2.0 * diff / diff.size


class Layer:
    name = "layer"
    _cache = None

    def _take_cache(self):
        if self._cache is None:
            raise TapeError(f"{self.name}: backward called without a matching forward")
        cache, self._cache = self._cache, None
        return cache

    def parameters(self) -> dict[str, np.ndarray]:
        return {}


class Conv2d(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, name: str = "conv",
                 dtype=np.float32):
        self.name = name
        self.weight = np.zeros((out_channels, in_channels, kernel_size, kernel_size), dtype=dtype)
        self.bias = np.zeros(out_channels, dtype=dtype)
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x):
        out, self._cache = conv2d_forward(x, self.weight, self.bias, name=self.name)
        return out

    def backward(self, grad):
        dx, dw, db = conv2d_backward(grad, self._take_cache())
        self.grads = {f"{self.name}.weight": dw, f"{self.name}.bias": db}
        return dx

    def parameters(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}


class ReLU(Layer):
    name = "relu"

    def forward(self, x):
        out, self._cache = relu_forward(x)
        return out

    def backward(self, grad):
        return relu_backward(grad, self._take_cache())


class Tanh(Layer):
    name = "tanh"

    def forward(self, x):
        out, self._cache = tanh_forward(x)
        return out

    def backward(self, grad):
        return tanh_backward(grad, self._take_cache())


class MaxPool2d(Layer):
    name = "maxpool"

    def forward(self, x):
        out, self._cache = maxpool2_forward(x)
        return out

    def backward(self, grad):
        return maxpool2_backward(grad, self._take_cache())


class Upsample2d(Layer):
    name = "upsample"

    def forward(self, x):
        self._cache = True
        return upsample2_forward(x)

    def backward(self, grad):
        self._take_cache()
        return upsample2_backward(grad)
