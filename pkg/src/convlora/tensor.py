"""Dense-array layer primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` values in NCHW layout. Every function is
dtype-generic: training runs in float32, gradient checks in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import as_strided


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if self.kernel_size < 1:
            raise ValueError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    def output_size(self, size: int) -> int:
        out = (size + 2 * self.padding - self.kernel_size) // self.stride + 1
        if out < 1:
            raise ValueError(
                f"spatial size {size} too small for kernel {self.kernel_size} "
                f"with padding {self.padding}"
            )
        return out

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel_size
        return (self.out_channels, self.in_channels, k, k)


def _check_conv_shapes(x, kernel, spec: ConvSpec):
    if x.ndim != 4:
        raise ValueError(f"input must be 4-D [N,C,H,W], got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(
            f"input channel dimension is {x.shape[1]}, spec expects in_channels={spec.in_channels}"
        )
    if kernel.shape != spec.kernel_shape:
        raise ValueError(f"kernel shape {kernel.shape} does not match spec {spec.kernel_shape}")


def im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Unfold ``x`` into a ``[N*H'*W', k*k*C]`` patch matrix.

    Columns are ordered (kernel row, kernel col, channel); use
    :func:`kernel_matrix` to lay a kernel out in the same order.
    """
    n, c, h, w = x.shape
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    ho, wo = spec.output_size(h), spec.output_size(w)
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p : p + h, p : p + w, :] = x.transpose(0, 2, 3, 1)
    sn, sh, sw, sc = xp.strides
    win = as_strided(xp, (n, ho, wo, k, k, c), (sn, sh * s, sw * s, sh, sw, sc), writeable=False)
    return np.ascontiguousarray(win).reshape(n * ho * wo, k * k * c)


def col2im(cols: np.ndarray, x_shape, spec: ConvSpec) -> np.ndarray:
    """Adjoint of :func:`im2col`; overlapping patches are summed."""
    n, c, h, w = x_shape
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    ho, wo = spec.output_size(h), spec.output_size(w)
    cols = cols.reshape(n, ho, wo, k, k, c)
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + s * ho : s, j : j + s * wo : s, :] += cols[:, :, :, i, j, :]
    return np.ascontiguousarray(out[:, p : p + h, p : p + w, :].transpose(0, 3, 1, 2))


def kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    """``[C_out, C_in, k, k]`` -> ``[C_out, k*k*C_in]`` in :func:`im2col` column order."""
    return kernel.transpose(0, 2, 3, 1).reshape(kernel.shape[0], -1)


def kernel_from_matrix(mat: np.ndarray, kernel_shape) -> np.ndarray:
    o, c, k, _ = kernel_shape
    return np.ascontiguousarray(mat.reshape(o, k, k, c).transpose(0, 3, 1, 2))


def _to_nchw(flat: np.ndarray, n: int, ho: int, wo: int) -> np.ndarray:
    return np.ascontiguousarray(flat.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2))


def _to_flat(t: np.ndarray) -> np.ndarray:
    n, c, h, w = t.shape
    return np.ascontiguousarray(t.transpose(0, 2, 3, 1)).reshape(n * h * w, c)


def conv2d_forward(x, kernel, bias, spec: ConvSpec, cols=None):
    """Cross-correlation of ``x`` with ``kernel`` plus a per-channel bias.

    ``cols`` may carry a precomputed :func:`im2col` of ``x``.
    """
    _check_conv_shapes(x, kernel, spec)
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(f"bias shape {bias.shape} does not match out_channels={spec.out_channels}")
    n, _, h, w = x.shape
    if cols is None:
        cols = im2col(x, spec)
    out = cols @ kernel_matrix(kernel).T
    if bias is not None:
        out += bias
    return _to_nchw(out, n, spec.output_size(h), spec.output_size(w))


def conv_input_grad(grad_out, kernel, x_shape, spec: ConvSpec, g_flat=None):
    """Gradient of the convolution w.r.t. its input.

    Stride-1 layers use the equivalent full convolution of ``grad_out`` with
    the flipped, channel-swapped kernel; other strides scatter through
    :func:`col2im`.
    """
    k, p = spec.kernel_size, spec.padding
    if spec.stride == 1 and p <= k - 1:
        flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        tspec = ConvSpec(spec.out_channels, spec.in_channels, k, 1, k - 1 - p)
        return conv2d_forward(grad_out, flipped, None, tspec)
    if g_flat is None:
        g_flat = _to_flat(grad_out)
    return col2im(g_flat @ kernel_matrix(kernel), x_shape, spec)


def conv2d_backward(grad_out, x, kernel, spec: ConvSpec, cols=None, need_input=True, need_kernel=True):
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernel and bias.

    Entries that were not requested come back as ``None``.
    """
    _check_conv_shapes(x, kernel, spec)
    n, _, h, w = x.shape
    expected = (n, spec.out_channels, spec.output_size(h), spec.output_size(w))
    if grad_out.shape != expected:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output {expected}")
    g = _to_flat(grad_out)
    grad_bias = g.sum(axis=0)
    grad_kernel = grad_input = None
    if need_kernel:
        if cols is None:
            cols = im2col(x, spec)
        grad_kernel = kernel_from_matrix(g.T @ cols, kernel.shape)
    if need_input:
        grad_input = conv_input_grad(grad_out, kernel, x.shape, spec, g_flat=g)
    return grad_input, grad_kernel, grad_bias


def maxpool2d(x, window: int = 2):
    """Non-overlapping max pooling.

    Returns the pooled tensor and the within-window argmax (row-major, ties
    resolved to the lowest index).
    """
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ValueError(f"spatial dims {(h, w)} not divisible by pooling window {window}")
    blocks = x.reshape(n, c, h // window, window, w // window, window).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // window, w // window, window * window)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2d_backward(grad_out, argmax, window: int = 2):
    n, c, ho, wo = grad_out.shape
    blocks = np.zeros((n, c, ho, wo, window * window), dtype=grad_out.dtype)
    np.put_along_axis(blocks, argmax[..., None], grad_out[..., None], axis=-1)
    blocks = blocks.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(blocks.reshape(n, c, ho * window, wo * window))


def upsample_nearest(x, factor: int = 2):
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)


def upsample_nearest_backward(grad_out, factor: int = 2):
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out, y):
    """``y`` is the forward output."""
    return grad_out * y * (1 - y)


def softmax_channels(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(grad_out, y):
    """``y`` is the forward output."""
    return y * (grad_out - (grad_out * y).sum(axis=1, keepdims=True))


def cross_entropy_loss(logits, labels):
    """Mean per-pixel cross-entropy and its gradient w.r.t. ``logits``.

    ``labels`` is an integer map ``[N,H,W]`` with values in ``[0, C)``.
    """
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {(n, h, w)}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, labels[:, None].astype(np.intp), axis=1)
    loss = float(-picked.mean())
    if not np.isfinite(loss):
        raise NonFiniteError("cross-entropy loss is not finite")
    idx = labels[:, None].astype(np.intp)
    grad = np.exp(logp)
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1, axis=1)
    grad /= n * h * w
    return loss, grad.astype(logits.dtype, copy=False)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0)


def adam_step(param, grad, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns ``(new_param, new_state)``."""
    if not (param.shape == grad.shape == state.m.shape == state.v.shape):
        raise ValueError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * (grad * grad)
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    new = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new.astype(param.dtype, copy=False), AdamState(m, v, t)


@dataclass
class Adam:
    """Adam over a named set of tensors; state exists only for those names."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: dict[str, AdamState] = field(default_factory=dict)

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], names) -> dict[str, np.ndarray]:
        """Returns the updated tensors for ``names``; ``params`` is not modified."""
        updated = {}
        for name in names:
            if name not in self.state:
                self.state[name] = AdamState.zeros_like(params[name])
            updated[name], self.state[name] = adam_step(
                params[name], grads[name], self.state[name], self.lr, self.beta1, self.beta2, self.eps
            )
        return updated


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def gradcheck(
    forward_fn: Callable[[], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    step: float = 1e-5,
) -> dict[str, float]:
    """Compare analytic gradients of a scalar function against central differences.

    ``forward_fn`` re-evaluates the scalar with the current contents of
    ``params``, which are perturbed in place and restored. Returns the max
    relative error per tensor, normalised by the largest gradient magnitude.
    """
    report = {}
    for name, p in params.items():
        numeric = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = forward_fn()
            flat[i] = orig - step
            f_minus = forward_fn()
            flat[i] = orig
            num_flat[i] = (f_plus - f_minus) / (2 * step)
        report[name] = relative_error(analytic[name], numeric)
    return report


def _bilinear_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    n_out = n_in * factor
    src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m.astype(dtype)


def upsample_bilinear(x, factor: int = 2):
    """Separable bilinear upsampling with half-pixel centres and edge clamping."""
    if factor == 1:
        return x.copy()
    mh = _bilinear_matrix(x.shape[2], factor, x.dtype)
    mw = _bilinear_matrix(x.shape[3], factor, x.dtype)
    return np.ascontiguousarray(np.einsum("ph,nchw,qw->ncpq", mh, x, mw, optimize=True))


def upsample_bilinear_backward(grad_out, factor: int = 2):
    if factor == 1:
        return grad_out.copy()
    h, w = grad_out.shape[2] // factor, grad_out.shape[3] // factor
    mh = _bilinear_matrix(h, factor, grad_out.dtype)
    mw = _bilinear_matrix(w, factor, grad_out.dtype)
    return np.ascontiguousarray(np.einsum("ph,ncpq,qw->nchw", mh, grad_out, mw, optimize=True))
