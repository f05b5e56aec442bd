"""Low-rank adapters for convolution kernels.

A kernel ``W`` of shape ``[C_out, C_in, k, k]`` is viewed as an ``m x n``
matrix with ``m = C_out`` and ``n = C_in*k*k`` (row-major). The adapter keeps
``W`` frozen and learns ``X`` (``m x r``) and ``Y`` (``r x n``) so that the
effective kernel is ``W + reshape(X @ Y)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConvSpec, _to_flat, conv2d_forward, conv_input_grad, im2col, kernel_from_matrix


@dataclass
class ConvLoRAAdapter:
    frozen_kernel: np.ndarray
    frozen_bias: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    spec: ConvSpec
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.spec.out_channels

    @property
    def n(self) -> int:
        return self.spec.in_channels * self.spec.kernel_size**2

    def delta_kernel(self) -> np.ndarray:
        delta = self.X @ self.Y
        if self.scale != 1.0:
            delta = delta * self.scale
        return delta.reshape(self.spec.kernel_shape)


def _check_rank(r: int, m: int, n: int):
    if not 1 <= r < min(m, n):
        raise ValueError(f"rank must satisfy 1 <= r < min(m, n) = {min(m, n)}, got r={r}")


def init_adapter(frozen_kernel, frozen_bias, spec: ConvSpec, r: int, seed, scale: float = 1.0) -> ConvLoRAAdapter:
    """Wrap a pretrained kernel. ``X ~ N(0, 1/m)``, ``Y = 0``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if frozen_kernel.shape != spec.kernel_shape:
        raise ValueError(f"kernel shape {frozen_kernel.shape} does not match spec {spec.kernel_shape}")
    m = spec.out_channels
    n = spec.in_channels * spec.kernel_size**2
    _check_rank(r, m, n)
    rng = np.random.default_rng(seed)
    dtype = frozen_kernel.dtype
    X = (rng.standard_normal((m, r)) / np.sqrt(m)).astype(dtype)
    Y = np.zeros((r, n), dtype=dtype)
    return ConvLoRAAdapter(frozen_kernel.copy(), frozen_bias.copy(), X, Y, spec, scale)


def forward(adapter: ConvLoRAAdapter, x, cols=None):
    """Frozen branch plus low-rank branch, summed elementwise; bias added once."""
    if cols is None:
        cols = im2col(x, adapter.spec)
    base = conv2d_forward(x, adapter.frozen_kernel, adapter.frozen_bias, adapter.spec, cols=cols)
    delta = conv2d_forward(x, adapter.delta_kernel(), None, adapter.spec, cols=cols)
    return base + delta


def backward(adapter: ConvLoRAAdapter, x, grad_out, cols=None, need_input=True):
    """Returns ``(grad_X, grad_Y, grad_input)``.

    The frozen kernel and bias get no gradient. ``grad_input`` (``None`` if
    not requested) flows through both branches.
    """
    spec = adapter.spec
    n_, _, h, w = x.shape
    expected = (n_, spec.out_channels, spec.output_size(h), spec.output_size(w))
    if grad_out.shape != expected:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output {expected}")
    if cols is None:
        cols = im2col(x, spec)
    g = _to_flat(grad_out)
    # back to the row-major [C_out, C_in*k*k] matricization of X @ Y
    grad_delta = kernel_from_matrix(g.T @ cols, spec.kernel_shape).reshape(spec.out_channels, -1)
    if adapter.scale != 1.0:
        grad_delta = grad_delta * adapter.scale
    grad_X = grad_delta @ adapter.Y.T
    grad_Y = adapter.X.T @ grad_delta
    grad_input = None
    if need_input:
        effective = adapter.frozen_kernel + adapter.delta_kernel()
        grad_input = conv_input_grad(grad_out, effective, x.shape, spec, g_flat=g)
    return grad_X, grad_Y, grad_input


def merge(adapter: ConvLoRAAdapter):
    """Fold the low-rank delta into a plain kernel. Returns ``(kernel, bias)``."""
    return adapter.frozen_kernel + adapter.delta_kernel(), adapter.frozen_bias.copy()


def trainable_param_count(adapter: ConvLoRAAdapter) -> int:
    return adapter.m * adapter.rank + adapter.rank * adapter.n


def full_param_count(spec: ConvSpec, bias: bool = True) -> int:
    """Parameters a full fine-tune of the same layer would train."""
    return spec.out_channels * spec.in_channels * spec.kernel_size**2 + (spec.out_channels if bias else 0)
