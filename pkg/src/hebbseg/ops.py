"""Dense NCHW tensor kernels.

All public arrays are float32; reductions inside kernels run in float64 and
are cast back. Convolution follows the cross-correlation convention (no
kernel flip), zero padding only, no bias terms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FLOAT = np.float32


@dataclass(frozen=True)
class ConvGeometry:
    """Geometry shared by a conv layer and its transpose counterpart.

    Padding is symmetric zero fill. For a conv, ``in_channels`` is the channel
    count of the map being convolved; for a transpose conv it is the channel
    count of the (downsampled) input map.
    """

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.out_channels < 1:
            raise ValueError(f"out_channels must be >= 1, got {self.out_channels}")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError(
                f"kernel must be >= 1x1, got {self.kernel_h}x{self.kernel_w}"
            )
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    @property
    def patch_len(self) -> int:
        return self.in_channels * self.kernel_h * self.kernel_w


def as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=FLOAT)


def require_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")


def conv_output_hw(geom: ConvGeometry, h: int, w: int) -> tuple[int, int]:
    """Spatial size of a conv output; raises when no patch fits."""
    oh = (h + 2 * geom.padding - geom.kernel_h) // geom.stride + 1
    ow = (w + 2 * geom.padding - geom.kernel_w) // geom.stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"kernel {geom.kernel_h}x{geom.kernel_w} does not fit input "
            f"{h}x{w} with padding {geom.padding}"
        )
    return oh, ow


def tconv_output_hw(geom: ConvGeometry, h: int, w: int) -> tuple[int, int]:
    """Spatial size of a transpose-conv output."""
    oh = (h - 1) * geom.stride - 2 * geom.padding + geom.kernel_h
    ow = (w - 1) * geom.stride - 2 * geom.padding + geom.kernel_w
    if oh < 1 or ow < 1:
        raise ValueError(
            f"transpose conv of {h}x{w} input yields empty output "
            f"(kernel {geom.kernel_h}x{geom.kernel_w}, stride {geom.stride}, "
            f"padding {geom.padding})"
        )
    return oh, ow


def unfold(x: np.ndarray, geom: ConvGeometry, dtype=FLOAT) -> np.ndarray:
    """Extract sliding patches of ``x`` as rows.

    Input [N, C, H, W] yields [N, P, C*kh*kw] where P is the number of patch
    offsets (row-major over the conv output grid) and each row is the patch
    vectorized channel-major, then row-major within the kernel window. The
    gather is fused with the dtype conversion (a single copy).
    """
    if x.ndim != 4:
        raise ValueError(f"unfold expects a 4-d NCHW array, got shape {x.shape}")
    n, c, h, w = x.shape
    oh, ow = conv_output_hw(geom, h, w)
    p = geom.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    windows = np.lib.stride_tricks.sliding_window_view(
        xp, (geom.kernel_h, geom.kernel_w), axis=(2, 3)
    )
    windows = windows[:, :, :: geom.stride, :: geom.stride][:, :, :oh, :ow]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5), dtype=dtype)
    return cols.reshape(n, oh * ow, c * geom.kernel_h * geom.kernel_w)


def fold(cols: np.ndarray, geom: ConvGeometry, out_hw: tuple[int, int],
         channels: int, acc_dtype=np.float64) -> np.ndarray:
    """Scatter-add patch rows back into an image (adjoint of :func:`unfold`).

    ``cols`` is [N, P, channels*kh*kw]; overlapping patches accumulate in
    ``acc_dtype``. Returns [N, channels, out_h, out_w].
    """
    n, np_, d = cols.shape
    h, w = out_hw
    kh, kw, s, p = geom.kernel_h, geom.kernel_w, geom.stride, geom.padding
    oh = (h + 2 * p - kh) // s + 1
    ow = (w + 2 * p - kw) // s + 1
    if np_ != oh * ow or d != channels * kh * kw:
        raise ValueError(
            f"fold got cols of shape {cols.shape}, expected "
            f"({n}, {oh * ow}, {channels * kh * kw}) for output {h}x{w}"
        )
    patches = cols.reshape(n, oh, ow, channels, kh, kw).astype(acc_dtype, copy=False)
    out = np.zeros((n, channels, h + 2 * p, w + 2 * p), dtype=acc_dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + s * oh : s, j : j + s * ow : s] += (
                patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if p:
        out = out[:, :, p : p + h, p : p + w]
    return out


def _check_channels(x: np.ndarray, expected: int, what: str) -> None:
    if x.shape[1] != expected:
        raise ValueError(
            f"{what} has {x.shape[1]} channels, geometry expects {expected}"
        )


def conv2d_forward(x: np.ndarray, weights: np.ndarray,
                   geom: ConvGeometry) -> np.ndarray:
    """Cross-correlate ``x`` [N, Cin, H, W] with ``weights`` [Cout, Cin, kh, kw].

    Implemented as unfold followed by a float64 matmul, cast back to float32.
    """
    _check_channels(x, geom.in_channels, "conv input")
    expected_w = (geom.out_channels, geom.in_channels, geom.kernel_h, geom.kernel_w)
    if weights.shape != expected_w:
        raise ValueError(
            f"conv weights shape {weights.shape} does not match geometry "
            f"{expected_w}"
        )
    n = x.shape[0]
    oh, ow = conv_output_hw(geom, x.shape[2], x.shape[3])
    cols = unfold(x, geom, np.float64)
    w_mat = weights.reshape(geom.out_channels, -1).astype(np.float64)
    out = cols @ w_mat.T
    return out.transpose(0, 2, 1).reshape(n, geom.out_channels, oh, ow).astype(FLOAT)


def tconv2d_forward(x: np.ndarray, weights: np.ndarray,
                    geom: ConvGeometry) -> np.ndarray:
    """Fractionally-strided convolution of ``x`` [N, Cin, h, w].

    ``weights`` is [Cin, Cout, kh, kw]. The result is the adjoint of
    :func:`conv2d_forward` with the same weight array read as a conv kernel
    [Cin -> out, Cout -> in], so output size is (h-1)*stride - 2*pad + kernel.
    """
    _check_channels(x, geom.in_channels, "transpose-conv input")
    expected_w = (geom.in_channels, geom.out_channels, geom.kernel_h, geom.kernel_w)
    if weights.shape != expected_w:
        raise ValueError(
            f"transpose-conv weights shape {weights.shape} does not match "
            f"geometry {expected_w}"
        )
    n, ci, h, w = x.shape
    oh, ow = tconv_output_hw(geom, h, w)
    w_mat = weights.reshape(ci, -1).astype(np.float64)
    acts = x.reshape(n, ci, h * w).transpose(0, 2, 1).astype(np.float64)
    cols = acts @ w_mat
    scatter_geom = ConvGeometry(
        geom.out_channels, geom.in_channels, geom.kernel_h, geom.kernel_w,
        geom.stride, geom.padding,
    )
    out = fold(cols, scatter_geom, (oh, ow), geom.out_channels)
    return out.astype(FLOAT)


def softmax_t(v: np.ndarray, t: float, axis: int = -1) -> np.ndarray:
    """Temperature softmax with max subtraction for stability.

    out = exp(v/t) / sum exp(v/t) along ``axis``; t must be positive.
    """
    if not t > 0:
        raise ValueError(f"temperature must be > 0, got {t}")
    z = np.asarray(v, dtype=np.float64) / float(t)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=axis, keepdims=True)).astype(FLOAT)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, pre: np.ndarray) -> np.ndarray:
    return (dy * (pre > 0)).astype(FLOAT)


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling with stride 2; returns (pooled, argmax index cache)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = win.argmax(axis=-1)
    pooled = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(pooled), idx


def maxpool2x2_backward(dy: np.ndarray, idx: np.ndarray,
                        in_hw: tuple[int, int]) -> np.ndarray:
    """Route pooled gradients back to the argmax positions."""
    n, c, oh, ow = dy.shape
    h, w = in_hw
    dwin = np.zeros((n, c, oh, ow, 4), dtype=FLOAT)
    np.put_along_axis(dwin, idx[..., None], dy[..., None].astype(FLOAT), axis=-1)
    return np.ascontiguousarray(
        dwin.reshape(n, c, oh, ow, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )


# ---------------------------------------------------------------------------
# Reverse-mode helpers for the supervised stage. These mirror the forward
# kernels but accumulate in float32: gradient tolerances (1e-3 against finite
# differences) are far looser than the forward oracle tolerances, and the
# training loop is the runtime bottleneck.
# ---------------------------------------------------------------------------

def conv2d_input_grad(dy: np.ndarray, weights: np.ndarray, geom: ConvGeometry,
                      in_hw: tuple[int, int]) -> np.ndarray:
    """Gradient of conv output w.r.t. its input, for the original input size."""
    n, co = dy.shape[0], dy.shape[1]
    w_mat = weights.reshape(co, -1)
    g = np.ascontiguousarray(dy.reshape(n, co, -1).transpose(0, 2, 1), dtype=FLOAT)
    cols = g @ w_mat
    return fold(cols, geom, in_hw, geom.in_channels, acc_dtype=FLOAT)


def conv2d_weight_grad(x: np.ndarray, dy: np.ndarray,
                       geom: ConvGeometry) -> np.ndarray:
    """Gradient of conv output w.r.t. weights [Cout, Cin, kh, kw]."""
    n, co = dy.shape[0], dy.shape[1]
    cols = unfold(x, geom)
    g = np.ascontiguousarray(
        dy.reshape(n, co, -1).transpose(1, 0, 2), dtype=FLOAT
    ).reshape(co, -1)
    dw = g @ cols.reshape(-1, cols.shape[-1])
    return dw.reshape(co, geom.in_channels, geom.kernel_h, geom.kernel_w)


def tconv2d_input_grad(dy: np.ndarray, weights: np.ndarray,
                       geom: ConvGeometry) -> np.ndarray:
    """Gradient of transpose-conv output w.r.t. its input [N, Cin, h, w]."""
    n = dy.shape[0]
    up_geom = ConvGeometry(
        geom.out_channels, geom.in_channels, geom.kernel_h, geom.kernel_w,
        geom.stride, geom.padding,
    )
    cols = unfold(dy, up_geom)
    w_mat = weights.reshape(geom.in_channels, -1)
    out = cols @ w_mat.T
    oh, ow = conv_output_hw(up_geom, dy.shape[2], dy.shape[3])
    return np.ascontiguousarray(
        out.transpose(0, 2, 1), dtype=FLOAT
    ).reshape(n, geom.in_channels, oh, ow)


def tconv2d_weight_grad(x: np.ndarray, dy: np.ndarray,
                        geom: ConvGeometry) -> np.ndarray:
    """Gradient of transpose-conv output w.r.t. weights [Cin, Cout, kh, kw]."""
    n, ci, h, w = x.shape
    up_geom = ConvGeometry(
        geom.out_channels, geom.in_channels, geom.kernel_h, geom.kernel_w,
        geom.stride, geom.padding,
    )
    cols = unfold(dy, up_geom)
    acts = np.ascontiguousarray(
        x.reshape(n, ci, h * w).transpose(1, 0, 2), dtype=FLOAT
    ).reshape(ci, -1)
    dw = acts @ cols.reshape(-1, cols.shape[-1])
    return dw.reshape(
        geom.in_channels, geom.out_channels, geom.kernel_h, geom.kernel_w
    )
