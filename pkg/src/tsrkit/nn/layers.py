"""Layer kernels over (channels, height, width) float32 arrays."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch

LEAKY_SLOPE = 0.1
BN_EPSILON = 1e-6


def linear(x):
    return x


def leaky(x):
    if isinstance(x, np.ndarray):
        return np.maximum(x, x * np.asarray(LEAKY_SLOPE, dtype=x.dtype))
    return x if x >= 0 else LEAKY_SLOPE * x


def sigmoid(x):
    if isinstance(x, np.ndarray):
        # Split by sign so exp never overflows.
        out = np.empty_like(x, dtype=np.result_type(x, np.float32))
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        e = np.exp(x[~pos])
        out[~pos] = e / (1.0 + e)
        return out
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


_ACTIVATIONS = {"linear": linear, "leaky": leaky, "sigmoid": sigmoid}


def activate(x, kind: str):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def im2col(x: np.ndarray, size: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Unfold (C, H, W) into (C * size * size, Ho * Wo) patch columns plus (Ho, Wo)."""
    c, h, w = x.shape
    oh = (h + 2 * padding - size) // stride + 1
    ow = (w + 2 * padding - size) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, size, size, oh, ow), dtype=x.dtype)
    for ki in range(size):
        for kj in range(size):
            cols[:, ki, kj] = x[:, ki:ki + stride * (oh - 1) + 1:stride,
                                kj:kj + stride * (ow - 1) + 1:stride]
    return cols.reshape(c * size * size, oh * ow), oh, ow


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int = 0, activation: str = "linear") -> np.ndarray:
    """Cross-correlation of (C, H, W) input with (F, C, K, K) weights, zero padded."""
    if x.ndim != 3 or weights.ndim != 4:
        raise ShapeMismatch(f"conv2d expects a rank-3 input and rank-4 weights, "
                            f"got {x.shape} and {weights.shape}")
    f, c, k, k2 = weights.shape
    if k != k2:
        raise ShapeMismatch(f"non-square kernel {weights.shape}")
    if x.shape[0] != c:
        raise ShapeMismatch(f"input has {x.shape[0]} channels, kernel expects {c}")
    if k == 1 and stride == 1 and padding == 0:
        _, oh, ow = x.shape
        out = weights.reshape(f, c) @ x.reshape(c, oh * ow)
    else:
        cols, oh, ow = im2col(x, k, stride, padding)
        out = weights.reshape(f, c * k * k) @ cols
    if bias is not None:
        out += bias.reshape(f, 1)
    return activate(out.reshape(f, oh, ow), activation)


def maxpool(x: np.ndarray, size: int, stride: int, padding: int | None = None) -> np.ndarray:
    """Max pooling; windows that leave the tensor only see the elements inside it."""
    if size < 1 or stride < 1:
        raise ValueError("size and stride must be >= 1")
    if padding is None:
        padding = size - 1
    c, h, w = x.shape
    oh = (h + padding - size) // stride + 1
    ow = (w + padding - size) // stride + 1
    if size == stride and padding // 2 == 0 and h % size == 0 and w % size == 0:
        return x.reshape(c, oh, size, ow, size).max(axis=(2, 4))
    before = padding // 2
    after_h = max(0, (oh - 1) * stride + size - before - h)
    after_w = max(0, (ow - 1) * stride + size - before - w)
    xp = np.pad(x, ((0, 0), (before, after_h), (before, after_w)), constant_values=-np.inf)
    out = np.full((c, oh, ow), -np.inf, dtype=x.dtype)
    for ki in range(size):
        for kj in range(size):
            np.maximum(out, xp[:, ki:ki + stride * (oh - 1) + 1:stride,
                               kj:kj + stride * (ow - 1) + 1:stride], out=out)
    return out


def global_avgpool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(1, 2), keepdims=True, dtype=np.float64).astype(x.dtype)


def reorg(x: np.ndarray, stride: int) -> np.ndarray:
    """Space-to-depth in the reference detector's passthrough element order.

    The reference kernel reads its input as if it had ``C / stride**2``
    channels of twice the spatial size; weights trained with it depend on
    that permutation, so it is reproduced here rather than a plain
    space-to-depth.
    """
    c, h, w = x.shape
    s = stride
    if c % (s * s) or h % s or w % s:
        raise ShapeMismatch(f"reorg stride {s} does not divide shape {x.shape}")
    out_c = c // (s * s)
    k = np.arange(c)[:, None, None]
    j = np.arange(h)[None, :, None]
    i = np.arange(w)[None, None, :]
    offset = k // out_c
    src = x.reshape(out_c, h * s, w * s)
    out = src[k % out_c, j * s + offset // s, i * s + offset % s]
    return np.ascontiguousarray(out.reshape(c * s * s, h // s, w // s))


def batch_norm(x: np.ndarray, scale: np.ndarray, mean: np.ndarray, variance: np.ndarray,
               shift: np.ndarray, eps: float = BN_EPSILON) -> np.ndarray:
    """Inference-time batch normalization over the channel axis of (C, H, W)."""
    inv = 1.0 / np.sqrt(variance.astype(np.float64) + eps)
    y = (x - mean[:, None, None]) * (scale * inv)[:, None, None] + shift[:, None, None]
    return y.astype(x.dtype)


def fold_batch_norm(weights: np.ndarray, scale: np.ndarray, mean: np.ndarray,
                    variance: np.ndarray, shift: np.ndarray, eps: float = BN_EPSILON,
                    dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Absorb batch normalization into the preceding convolution.

    Returns ``(w * g / sqrt(v + eps), b - g * m / sqrt(v + eps))`` where ``b``
    is the BN shift; the convolution itself carries no separate bias.
    """
    if np.any(variance < 0):
        raise ValueError("batch-norm variance must be non-negative")
    factor = scale.astype(np.float64) / np.sqrt(variance.astype(np.float64) + eps)
    folded_w = weights.astype(np.float64) * factor[:, None, None, None]
    folded_b = shift.astype(np.float64) - mean.astype(np.float64) * factor
    return folded_w.astype(dtype), folded_b.astype(dtype)
