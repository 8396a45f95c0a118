"""Dense array primitives for small bias-free convolutional networks.

Everything operates on plain numpy arrays in (H, W, C) layout, float32 by
default with float64 available for high-precision checks. Functions accept an
optional leading batch axis where noted. All functions are pure.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32
SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Smallest positive normal binary32; stands in for exact zeros in relative-error
# denominators and as the divide guard when normalizing images.
FP32_TINY = float(np.finfo(np.float32).tiny)

ACTIVATION_KINDS = ("relu", "leaky_relu", "relu6")
LEAKY_SLOPE = 0.2


class ShapeMismatchError(ValueError):
    """Raised when an operation receives incompatibly shaped operands."""

    def __init__(self, op: str, expected, actual):
        self.op = op
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"{op}: expected shape {self.expected}, got {self.actual}")


def as_tensor(data, dtype=None) -> np.ndarray:
    """Coerce data to a supported float array, defaulting to float32."""
    arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    if arr.dtype not in SUPPORTED_DTYPES:
        raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    return arr


def _ensure_batch(x: np.ndarray, rank: int):
    # Returns a view with a leading batch axis plus a flag to squeeze it back.
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeMismatchError("batch", ("...",) * rank, x.shape)


def same_pads(size: int, window: int, stride: int):
    """Output length and (before, after) zero pads for 'same' coverage.

    The asymmetric split puts the smaller pad before (top/left) and the larger
    after (bottom/right).
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + window - size, 0)
    before = total // 2
    return out, before, total - before


def _im2col(xp: np.ndarray, r1: int, r2: int, stride: int, oh: int, ow: int):
    n, _, _, c = xp.shape
    cols = np.empty((n, oh, ow, r1, r2, c), dtype=xp.dtype)
    for a in range(r1):
        for b in range(r2):
            cols[:, :, :, a, b, :] = xp[
                :,
                a : a + (oh - 1) * stride + 1 : stride,
                b : b + (ow - 1) * stride + 1 : stride,
                :,
            ]
    return cols.reshape(n, oh * ow, r1 * r2 * c)


def _col2im(cols: np.ndarray, hp: int, wp: int, c: int, r1: int, r2: int, stride: int, oh: int, ow: int):
    n = cols.shape[0]
    xp = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    cols = cols.reshape(n, oh, ow, r1, r2, c)
    for a in range(r1):
        for b in range(r2):
            xp[
                :,
                a : a + (oh - 1) * stride + 1 : stride,
                b : b + (ow - 1) * stride + 1 : stride,
                :,
            ] += cols[:, :, :, a, b, :]
    return xp


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: str = "same") -> np.ndarray:
    """2-D cross-correlation with zero 'same' padding and no bias.

    Args:
        x: (H, W, Cin) or (N, H, W, Cin).
        kernel: (r1, r2, Cin, Cout).
        stride: positive stride applied to both spatial axes.
        padding: only "same" is supported.

    Returns:
        (ceil(H/stride), ceil(W/stride), Cout), batched if the input was.
    """
    if padding != "same":
        raise ValueError(f"unsupported padding {padding!r}; only 'same'")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    x4, squeeze = _ensure_batch(x, 3)
    r1, r2, cin, cout = kernel.shape
    if x4.shape[3] != cin:
        raise ShapeMismatchError("conv2d", (x4.shape[1], x4.shape[2], cin), x4.shape[1:])
    if kernel.dtype != x4.dtype:
        raise TypeError(f"conv2d: kernel dtype {kernel.dtype} != input dtype {x4.dtype}")
    h, w = x4.shape[1], x4.shape[2]
    oh, pt, pb = same_pads(h, r1, stride)
    ow, pl, pr = same_pads(w, r2, stride)
    xp = np.pad(x4, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = _im2col(xp, r1, r2, stride, oh, ow)
    y = cols @ kernel.reshape(r1 * r2 * cin, cout)
    y = y.reshape(x4.shape[0], oh, ow, cout)
    return y[0] if squeeze else y


def conv2d_input_grad(gy: np.ndarray, kernel: np.ndarray, in_hw, stride: int = 1) -> np.ndarray:
    """Adjoint of conv2d in its input: scatter cotangents back through the kernel.

    gy is (oh, ow, Cout) or batched; in_hw is the unpadded (H, W) of the input.
    """
    g4, squeeze = _ensure_batch(gy, 3)
    r1, r2, cin, cout = kernel.shape
    h, w = in_hw
    oh, pt, _ = same_pads(h, r1, stride)
    ow, pl, _ = same_pads(w, r2, stride)
    if g4.shape[1:] != (oh, ow, cout):
        raise ShapeMismatchError("conv2d_input_grad", (oh, ow, cout), g4.shape[1:])
    hp = pt + h + same_pads(h, r1, stride)[2]
    wp = pl + w + same_pads(w, r2, stride)[2]
    cols = g4.reshape(g4.shape[0], oh * ow, cout) @ kernel.reshape(r1 * r2 * cin, cout).T
    xp = _col2im(cols, hp, wp, cin, r1, r2, stride, oh, ow)
    gx = xp[:, pt : pt + h, pl : pl + w, :]
    return gx[0] if squeeze else gx


def conv2d_kernel_grad(x: np.ndarray, gy: np.ndarray, kernel_shape, stride: int = 1) -> np.ndarray:
    """Gradient of conv2d in its kernel, summed over any batch axis."""
    x4, _ = _ensure_batch(x, 3)
    g4, _ = _ensure_batch(gy, 3)
    r1, r2, cin, cout = kernel_shape
    h, w = x4.shape[1], x4.shape[2]
    oh, pt, pb = same_pads(h, r1, stride)
    ow, pl, pr = same_pads(w, r2, stride)
    xp = np.pad(x4, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = _im2col(xp, r1, r2, stride, oh, ow).reshape(-1, r1 * r2 * cin)
    gk = cols.T @ g4.reshape(-1, cout)
    return gk.reshape(r1, r2, cin, cout)


def avg_pool(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    """Windowed mean with zero 'same' padding.

    Every output element divides by window**2 regardless of how much of the
    window fell on padding, so pooling equals conv with a uniform kernel.
    """
    x4, squeeze = _ensure_batch(x, 3)
    h, w, c = x4.shape[1], x4.shape[2], x4.shape[3]
    oh, pt, pb = same_pads(h, window, stride)
    ow, pl, pr = same_pads(w, window, stride)
    xp = np.pad(x4, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    acc = np.zeros((x4.shape[0], oh, ow, c), dtype=x4.dtype)
    for a in range(window):
        for b in range(window):
            acc += xp[
                :,
                a : a + (oh - 1) * stride + 1 : stride,
                b : b + (ow - 1) * stride + 1 : stride,
                :,
            ]
    y = acc / x4.dtype.type(window * window)
    return y[0] if squeeze else y


def avg_pool_grad(gy: np.ndarray, in_hw, window: int, stride: int) -> np.ndarray:
    """Adjoint of avg_pool: scatter each cotangent/window**2 over its window."""
    g4, squeeze = _ensure_batch(gy, 3)
    h, w = in_hw
    c = g4.shape[3]
    oh, pt, pb = same_pads(h, window, stride)
    ow, pl, pr = same_pads(w, window, stride)
    if g4.shape[1:3] != (oh, ow):
        raise ShapeMismatchError("avg_pool_grad", (oh, ow, c), g4.shape[1:])
    share = g4 / g4.dtype.type(window * window)
    xp = np.zeros((g4.shape[0], pt + h + pb, pl + w + pr, c), dtype=g4.dtype)
    for a in range(window):
        for b in range(window):
            xp[
                :,
                a : a + (oh - 1) * stride + 1 : stride,
                b : b + (ow - 1) * stride + 1 : stride,
                :,
            ] += share
    gx = xp[:, pt : pt + h, pl : pl + w, :]
    return gx[0] if squeeze else gx


def global_pool(x: np.ndarray) -> np.ndarray:
    """Spatial mean per channel: (H, W, C) -> (C,), batched if the input was."""
    x4, squeeze = _ensure_batch(x, 3)
    y = x4.mean(axis=(1, 2))
    return y[0] if squeeze else y


def global_pool_grad(gy: np.ndarray, in_hw) -> np.ndarray:
    """Adjoint of global_pool: broadcast cotangent / (H*W) over the plane."""
    g2, squeeze = _ensure_batch(gy, 1)
    h, w = in_hw
    gx = np.broadcast_to(
        g2[:, None, None, :] / g2.dtype.type(h * w), (g2.shape[0], h, w, g2.shape[1])
    ).copy()
    return gx[0] if squeeze else gx


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "leaky_relu":
        return np.where(x > 0, x, x * x.dtype.type(LEAKY_SLOPE))
    if kind == "relu6":
        return np.minimum(np.maximum(x, 0), x.dtype.type(6))
    raise ValueError(f"unknown activation kind {kind!r}")


def activation_gate(x: np.ndarray, kind: str) -> np.ndarray:
    """Pointwise multiplier that reproduces the activation on its own input.

    A pre-activation of exactly zero gates to 0 for relu (and to the slope for
    leaky_relu, where the output is zero either way).
    """
    one = x.dtype.type(1)
    zero = x.dtype.type(0)
    if kind == "relu":
        return np.where(x > 0, one, zero)
    if kind == "leaky_relu":
        return np.where(x > 0, one, x.dtype.type(LEAKY_SLOPE))
    if kind == "relu6":
        return np.where((x > 0) & (x < 6), one, zero)
    raise ValueError(f"unknown activation kind {kind!r}")


def inner_product(a: np.ndarray, b: np.ndarray) -> float:
    """Flat dot product <a|b> of two identically shaped arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatchError("inner_product", a.shape, b.shape)
    return float(np.dot(a.ravel(), b.ravel()))
