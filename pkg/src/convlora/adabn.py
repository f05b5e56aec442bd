"""Batch normalization with source-training, target-adaptation and eval modes."""

from __future__ import annotations

import enum

import numpy as np


class BNMode(str, enum.Enum):
    TRAIN = "train"
    ADAPT = "adapt"
    EVAL = "eval"


class AdaBNLayer:
    """Per-channel batch norm over ``(N, H, W)``.

    TRAIN normalises by the batch and updates the running statistics by an
    exponential moving average; gamma/beta receive gradients. ADAPT does the
    same normalisation and statistics update on target batches but never
    yields affine gradients. EVAL is a fixed affine map using the running
    statistics.

    ``momentum=None`` switches the running update to a cumulative average of
    all batches seen since the last :meth:`start_pass`, which gives exact
    whole-set statistics for a single sweep.
    """

    def __init__(self, channels: int, momentum: float | None = 0.1, eps: float = 1e-5, dtype=np.float32):
        if momentum is not None and not 0.0 < momentum <= 1.0:
            raise ValueError(f"momentum must lie in (0, 1], got {momentum}")
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.mode = BNMode.TRAIN
        self._snapshot: tuple[np.ndarray, np.ndarray] | None = None
        self._passes = 0
        self._cache = None

    # -- statistics -----------------------------------------------------

    def snapshot_stats(self) -> None:
        """Remember the current running statistics as the source state."""
        self._snapshot = (self.running_mean.copy(), self.running_var.copy())

    def reset_stats(self) -> None:
        if self._snapshot is None:
            raise RuntimeError("no source statistics snapshot stored")
        self.running_mean = self._snapshot[0].copy()
        self.running_var = self._snapshot[1].copy()
        self._passes = 0

    @property
    def source_snapshot(self):
        return self._snapshot

    def start_pass(self) -> None:
        self._passes = 0

    def _update_running(self, mean, var) -> None:
        if self.momentum is None:
            self._passes += 1
            w = 1.0 / self._passes
        else:
            w = self.momentum
        dtype = self.running_mean.dtype
        self.running_mean = ((1 - w) * self.running_mean + w * mean).astype(dtype)
        self.running_var = ((1 - w) * self.running_var + w * var).astype(dtype)

    # -- forward / backward ---------------------------------------------

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected [N,{self.channels},H,W] input, got shape {x.shape}")

    def _batch_forward(self, x):
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        invstd = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean[None, :, None, None]) * invstd[None, :, None, None]
        self._update_running(mean, var)
        self._cache = ("batch", x_hat, invstd, self.mode is BNMode.TRAIN)
        return self.gamma[None, :, None, None] * x_hat + self.beta[None, :, None, None]

    def forward_train(self, x):
        self._check(x)
        return self._batch_forward(x)

    def forward_adapt(self, x):
        self._check(x)
        if x.shape[0] < 2:
            raise ValueError("adaptation needs a batch of at least 2 samples")
        return self._batch_forward(x)

    def forward_eval(self, x):
        self._check(x)
        invstd = 1.0 / np.sqrt(self.running_var + self.eps)
        scale = (self.gamma * invstd).astype(x.dtype)
        shift = (self.beta - self.running_mean * self.gamma * invstd).astype(x.dtype)
        self._cache = ("eval", scale)
        return x * scale[None, :, None, None] + shift[None, :, None, None]

    def forward(self, x):
        if self.mode is BNMode.TRAIN:
            return self.forward_train(x)
        if self.mode is BNMode.ADAPT:
            return self.forward_adapt(x)
        return self.forward_eval(x)

    def backward(self, grad_out):
        """Returns ``(grad_input, grad_gamma, grad_beta)``.

        Affine gradients are ``None`` unless the last forward was in TRAIN mode.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        if self._cache[0] == "eval":
            scale = self._cache[1]
            return grad_out * scale[None, :, None, None], None, None
        _, x_hat, invstd, affine = self._cache
        axes = (0, 2, 3)
        m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
        sum_g = grad_out.sum(axis=axes)
        sum_gx = (grad_out * x_hat).sum(axis=axes)
        coef = (self.gamma * invstd / m)[None, :, None, None]
        grad_in = coef * (m * grad_out - sum_g[None, :, None, None] - x_hat * sum_gx[None, :, None, None])
        if affine:
            return grad_in, sum_gx, sum_g
        return grad_in, None, None
