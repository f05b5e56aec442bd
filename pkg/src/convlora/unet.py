"""2D U-Net with an early segmentation head (ESH) and ConvLoRA injection sites.

Layout for ``depth`` encoder blocks with widths ``base * 2**(i-1)``::

    enc1 -> pool -> enc2 -> pool -> ... -> encD -> pool -> bottleneck
                                            |
                                            +-> esh (3 x conv/BN/ReLU, 1x1 conv,
                                                     bilinear upsampling to input size)

    bottleneck -> up -> [cat encD] -> decD -> up -> ... -> dec1 -> head (1x1)

The bottleneck widens to twice the last encoder width and projects back.
Backward passes are composed by hand; every unit caches what it needs from
its most recent forward call.
"""

from __future__ import annotations

import contextlib
import enum
from dataclasses import dataclass

import numpy as np

from . import adapter as lora
from .adabn import AdaBNLayer, BNMode
from .tensor import (
    ConvSpec,
    conv2d_backward,
    conv2d_forward,
    im2col,
    maxpool2d,
    maxpool2d_backward,
    relu,
    relu_backward,
    upsample_bilinear,
    upsample_bilinear_backward,
    upsample_nearest,
    upsample_nearest_backward,
)


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_channels: int = 16
    convs_per_block: int = 2
    num_classes: int = 2
    input_channels: int = 1

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1 or self.convs_per_block < 1 or self.num_classes < 2:
            raise ValueError(f"invalid UNetConfig {self}")

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.depth)]

    @classmethod
    def desk(cls) -> "UNetConfig":
        return cls(depth=4, base_channels=16)

    @classmethod
    def paper_scale(cls) -> "UNetConfig":
        return cls(depth=4, base_channels=64)


NAMED_CONFIGS = {"desk": UNetConfig.desk, "paper-scale": UNetConfig.paper_scale}


class Phase(str, enum.Enum):
    PRETRAIN = "pretrain"
    ESH = "esh"
    ADAPT = "adapt"
    EVAL = "eval"


class Conv2d:
    """Convolution that may carry a ConvLoRA adapter."""

    def __init__(self, spec: ConvSpec, rng, dtype):
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel_size**2
        self.kernel = (rng.standard_normal(spec.kernel_shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.bias = np.zeros(spec.out_channels, dtype=dtype)
        self.adapter: lora.ConvLoRAAdapter | None = None
        self.frozen = {"kernel": False, "bias": False}
        self._cache = None

    def param_names(self) -> list[str]:
        names = ["kernel", "bias"]
        if self.adapter is not None:
            names += ["lora_X", "lora_Y"]
        return names

    def get(self, name):
        if name == "lora_X":
            return self.adapter.X
        if name == "lora_Y":
            return self.adapter.Y
        return getattr(self, name)

    def set(self, name, value):
        if name == "lora_X":
            self.adapter.X = value
        elif name == "lora_Y":
            self.adapter.Y = value
        else:
            setattr(self, name, value)
            if self.adapter is not None:
                # the adapter shares the frozen tensors of the layer it wraps
                setattr(self.adapter, "frozen_" + name, value)

    def inject(self, r: int, seed, scale: float = 1.0):
        if self.adapter is not None:
            raise ValueError("layer already carries a ConvLoRA adapter")
        self.adapter = lora.init_adapter(self.kernel, self.bias, self.spec, r, seed, scale)
        # share, do not copy: the frozen kernel is the layer's kernel
        self.adapter.frozen_kernel = self.kernel
        self.adapter.frozen_bias = self.bias
        self.frozen["lora_X"] = False
        self.frozen["lora_Y"] = False

    @property
    def trainable(self) -> bool:
        return not all(self.frozen.values())

    def forward(self, x):
        cols = im2col(x, self.spec)
        if self.adapter is not None:
            out = lora.forward(self.adapter, x, cols=cols)
        else:
            out = conv2d_forward(x, self.kernel, self.bias, self.spec, cols=cols)
        self._cache = (x, cols if self.trainable else None)
        return out

    def backward(self, grad_out, need_input: bool, grads: dict, prefix: str):
        x, cols = self._cache
        grad_input = None
        if self.adapter is not None and not (self.frozen["lora_X"] and self.frozen["lora_Y"]):
            gx, gy, grad_input = lora.backward(self.adapter, x, grad_out, cols=cols, need_input=need_input)
            if not self.frozen["lora_X"]:
                grads[prefix + "lora_X"] = gx
            if not self.frozen["lora_Y"]:
                grads[prefix + "lora_Y"] = gy
            need_input = False
        kernel = self.kernel if self.adapter is None else lora.merge(self.adapter)[0]
        need_kernel = not self.frozen["kernel"]
        if need_input or need_kernel or not self.frozen["bias"]:
            gi, gk, gb = conv2d_backward(
                grad_out, x, kernel, self.spec, cols=cols, need_input=need_input, need_kernel=need_kernel
            )
            if need_input:
                grad_input = gi
            if need_kernel:
                grads[prefix + "kernel"] = gk
            if not self.frozen["bias"]:
                grads[prefix + "bias"] = gb
        return grad_input


class BatchNorm2d(AdaBNLayer):
    def __init__(self, channels, dtype, momentum=0.1):
        super().__init__(channels, momentum=momentum, dtype=dtype)
        self.frozen = {"gamma": False, "beta": False}

    def param_names(self) -> list[str]:
        return ["gamma", "beta"]

    def get(self, name):
        return getattr(self, name)

    def set(self, name, value):
        setattr(self, name, value)

    @property
    def trainable(self) -> bool:
        return not all(self.frozen.values())

    def backward_into(self, grad_out, grads: dict, prefix: str):
        gi, gg, gb = self.backward(grad_out)
        if gg is not None:
            if not self.frozen["gamma"]:
                grads[prefix + "gamma"] = gg
            if not self.frozen["beta"]:
                grads[prefix + "beta"] = gb
        return gi


class ConvUnit:
    """conv -> BN -> ReLU."""

    def __init__(self, name: str, c_in: int, c_out: int, rng, dtype):
        self.name = name
        self.conv = Conv2d(ConvSpec(c_in, c_out, 3, 1, 1), rng, dtype)
        self.bn = BatchNorm2d(c_out, dtype)
        self._pre_relu = None

    def layers(self):
        return [(f"{self.name}.conv", self.conv), (f"{self.name}.bn", self.bn)]

    def forward(self, x):
        z = self.bn.forward(self.conv.forward(x))
        self._pre_relu = z
        return relu(z)

    def backward(self, grad_out, need_input: bool, grads: dict):
        g = relu_backward(grad_out, self._pre_relu)
        g = self.bn.backward_into(g, grads, f"{self.name}.bn.")
        return self.conv.backward(g, need_input, grads, f"{self.name}.conv.")


def _stack_backward(units, grad, need_input, grads):
    for k in range(len(units) - 1, -1, -1):
        grad = units[k].backward(grad, need_input or k > 0, grads)
        if grad is None:
            return None
    return grad


@dataclass(frozen=True)
class InjectionSelector:
    """1-based encoder block indices to wrap with ConvLoRA."""

    blocks: frozenset

    @classmethod
    def parse(cls, text, depth: int) -> "InjectionSelector":
        if isinstance(text, InjectionSelector):
            blocks = set(text.blocks)
        elif isinstance(text, str):
            t = text.strip().lower()
            if t in ("all", "full"):
                blocks = set(range(1, depth + 1))
            elif "-" in t:
                lo, hi = (int(v) for v in t.split("-"))
                blocks = set(range(lo, hi + 1))
            else:
                blocks = {int(v) for v in t.split(",")}
        else:
            blocks = {int(v) for v in text}
        bad = [b for b in blocks if not 1 <= b <= depth]
        if not blocks or bad:
            raise ValueError(f"encoder block indices must lie in [1, {depth}], got {sorted(blocks)}")
        return cls(frozenset(blocks))

    def label(self, depth: int) -> str:
        b = sorted(self.blocks)
        if b == list(range(1, depth + 1)):
            return "all"
        if b == list(range(b[0], b[-1] + 1)) and len(b) > 1:
            return f"{b[0]}-{b[-1]}"
        return ",".join(map(str, b))


class UNetModel:
    def __init__(self, config: UNetConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        widths = config.widths()
        cpb = config.convs_per_block

        def block(name, c_in, c_out, n):
            return [ConvUnit(f"{name}.{j + 1}", c_in if j == 0 else c_out, c_out, rng, dtype) for j in range(n)]

        self.encoder = []
        c_prev = config.input_channels
        for i, c in enumerate(widths, start=1):
            self.encoder.append(block(f"enc{i}", c_prev, c, cpb))
            c_prev = c
        c_last = widths[-1]
        self.bottleneck = [
            ConvUnit("bottleneck.1", c_last, 2 * c_last, rng, dtype),
            ConvUnit("bottleneck.2", 2 * c_last, c_last, rng, dtype),
        ]
        self.decoder = {}
        c_prev = c_last
        for i in range(config.depth, 0, -1):
            c = widths[i - 1]
            self.decoder[i] = block(f"dec{i}", c_prev + c, c, cpb)
            c_prev = c
        self.head = Conv2d(ConvSpec(widths[0], config.num_classes, 1, 1, 0), rng, dtype)
        self.esh = [ConvUnit(f"esh.{j + 1}", c_last, c_last, rng, dtype) for j in range(3)]
        self.esh_head = Conv2d(ConvSpec(c_last, config.num_classes, 1, 1, 0), rng, dtype)
        self.injected: dict[int, int] = {}
        self._last = None

    # -- parameter bookkeeping ------------------------------------------

    def named_layers(self):
        """``(prefix, layer)`` pairs for every conv and BN layer, in a fixed order."""
        out = []
        for blk in self.encoder:
            for u in blk:
                out += u.layers()
        for u in self.bottleneck:
            out += u.layers()
        for i in sorted(self.decoder, reverse=True):
            for u in self.decoder[i]:
                out += u.layers()
        out.append(("head", self.head))
        for u in self.esh:
            out += u.layers()
        out.append(("esh.head", self.esh_head))
        return out

    def bn_layers(self):
        return [(p, l) for p, l in self.named_layers() if isinstance(l, BatchNorm2d)]

    def conv_layers(self):
        return [(p, l) for p, l in self.named_layers() if isinstance(l, Conv2d)]

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{p}.{n}": l.get(n) for p, l in self.named_layers() for n in l.param_names()}

    def freeze_flags(self) -> dict[str, bool]:
        return {f"{p}.{n}": l.frozen[n] for p, l in self.named_layers() for n in l.param_names()}

    def trainable_names(self) -> list[str]:
        return [k for k, frozen in self.freeze_flags().items() if not frozen]

    def _resolve(self, name):
        prefix, attr = name.rsplit(".", 1)
        for p, l in self.named_layers():
            if p == prefix:
                return l, attr
        raise KeyError(name)

    def set_parameter(self, name, value):
        layer, attr = self._resolve(name)
        layer.set(attr, value)

    def set_parameters(self, values: dict):
        lookup = dict(self.named_layers())
        for name, value in values.items():
            prefix, attr = name.rsplit(".", 1)
            lookup[prefix].set(attr, value)

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for p, l in self.bn_layers():
            out[f"{p}.running_mean"] = l.running_mean
            out[f"{p}.running_var"] = l.running_var
        return out

    def set_buffers(self, values: dict):
        for p, l in self.bn_layers():
            l.running_mean = np.asarray(values[f"{p}.running_mean"]).copy()
            l.running_var = np.asarray(values[f"{p}.running_var"]).copy()

    def snapshot_bn(self):
        for _, l in self.bn_layers():
            l.snapshot_stats()

    def reset_bn(self):
        for _, l in self.bn_layers():
            l.reset_stats()

    def set_bn_mode(self, mode: BNMode, which=None):
        for p, l in self.bn_layers():
            if which is None or which(p):
                l.mode = BNMode(mode)

    @contextlib.contextmanager
    def bn_mode(self, mode: BNMode):
        """Temporarily put every BN layer in ``mode``."""
        saved = [(l, l.mode) for _, l in self.bn_layers()]
        self.set_bn_mode(mode)
        try:
            yield self
        finally:
            for l, m in saved:
                l.mode = m

    def set_bn_momentum(self, momentum):
        for _, l in self.bn_layers():
            l.momentum = momentum
            l.start_pass()

    def start_bn_pass(self):
        for _, l in self.bn_layers():
            l.start_pass()

    def param_count(self, include_esh: bool = True) -> int:
        return sum(
            v.size for k, v in self.parameters().items() if include_esh or not k.startswith("esh")
        )

    # -- forward --------------------------------------------------------

    def _check_input(self, x):
        c = self.config
        if x.ndim != 4 or x.shape[1] != c.input_channels:
            raise ValueError(f"expected [N,{c.input_channels},H,W] input, got {x.shape}")
        f = 2 ** c.depth
        if x.shape[2] % f or x.shape[3] % f:
            raise ValueError(f"spatial dims {x.shape[2:]} must be divisible by 2**depth = {f}")

    def _encode(self, x):
        self._check_input(x)
        x = x.astype(self.dtype, copy=False)
        skips, argmaxes = [], []
        h = x
        for blk in self.encoder:
            for u in blk:
                h = u.forward(h)
            skips.append(h)
            h, idx = maxpool2d(h)
            argmaxes.append(idx)
        self._enc = (skips, argmaxes)
        return skips, h

    def _decode(self, skips, h):
        for u in self.bottleneck:
            h = u.forward(h)
        self._cat_split = {}
        for i in range(self.config.depth, 0, -1):
            up = upsample_nearest(h)
            self._cat_split[i] = up.shape[1]
            h = np.concatenate([up, skips[i - 1]], axis=1)
            for u in self.decoder[i]:
                h = u.forward(h)
        return self.head.forward(h)

    def _esh_forward(self, enc_out):
        h = enc_out
        for u in self.esh:
            h = u.forward(h)
        logits = self.esh_head.forward(h)
        return upsample_bilinear(logits, self.esh_factor)

    @property
    def esh_factor(self) -> int:
        return 2 ** (self.config.depth - 1)

    def forward_full(self, x):
        skips, h = self._encode(x)
        out = self._decode(skips, h)
        self._last = {"full"}
        return out

    def forward_esh(self, x):
        skips, _ = self._encode(x)
        out = self._esh_forward(skips[-1])
        self._last = {"esh"}
        return out

    def forward_both(self, x):
        """Full and ESH logits from a single encoder pass."""
        skips, h = self._encode(x)
        full = self._decode(skips, h)
        esh = self._esh_forward(skips[-1])
        self._last = {"full", "esh"}
        return full, esh

    # -- backward -------------------------------------------------------

    def _any_trainable(self, units):
        return any(l.trainable for u in units for _, l in u.layers())

    def backward(self, grad_full=None, grad_esh=None) -> dict[str, np.ndarray]:
        """Gradients of every trainable tensor, keyed by parameter name.

        Pass the loss gradient of whichever heads were used in the last
        forward call; gradients from both heads accumulate in the encoder.
        """
        if self._last is None:
            raise RuntimeError("backward called before forward")
        if grad_full is not None and "full" not in self._last:
            raise RuntimeError("last forward did not compute the full path")
        if grad_esh is not None and "esh" not in self._last:
            raise RuntimeError("last forward did not compute the ESH path")
        grads: dict[str, np.ndarray] = {}
        skips, argmaxes = self._enc
        depth = self.config.depth
        enc_trainable = any(self._any_trainable(b) for b in self.encoder)
        skip_grads = [None] * depth
        bottom_grad = None

        if grad_full is not None:
            dec_units = [u for i in self.decoder for u in self.decoder[i]] + self.bottleneck
            propagate = enc_trainable or self._any_trainable(dec_units) or self._any_trainable(self.bottleneck)
            g = self.head.backward(grad_full, propagate, grads, "head.")
            if g is not None:
                for i in range(1, depth + 1):
                    g = _stack_backward(self.decoder[i], g, True, grads)
                    n_up = self._cat_split[i]
                    skip_grads[i - 1] = g[:, n_up:]
                    g = upsample_nearest_backward(np.ascontiguousarray(g[:, :n_up]))
                g = _stack_backward(self.bottleneck, g, enc_trainable, grads)
                bottom_grad = g

        if grad_esh is not None:
            propagate = enc_trainable or self._any_trainable(self.esh)
            g = upsample_bilinear_backward(grad_esh, self.esh_factor)
            g = self.esh_head.backward(g, propagate, grads, "esh.head.")
            if g is not None:
                g = _stack_backward(self.esh, g, enc_trainable, grads)
                if g is not None:
                    skip_grads[-1] = g if skip_grads[-1] is None else skip_grads[-1] + g

        if not enc_trainable:
            return grads
        g = bottom_grad
        for i in range(depth, 0, -1):
            if g is not None:
                g = maxpool2d_backward(g, argmaxes[i - 1])
            if skip_grads[i - 1] is not None:
                g = skip_grads[i - 1] if g is None else g + skip_grads[i - 1]
            if g is None:
                continue
            needs_below = any(self._any_trainable(b) for b in self.encoder[: i - 1])
            g = _stack_backward(self.encoder[i - 1], g, needs_below, grads)
            if g is None:
                break
        return grads

    # -- adapters -------------------------------------------------------

    def adapters(self):
        return [(p, l.adapter) for p, l in self.conv_layers() if l.adapter is not None]


def build_model(config: UNetConfig, seed: int = 0, dtype=np.float32) -> UNetModel:
    """He-initialised model, all parameters trainable, BN in TRAIN mode, no adapters."""
    return UNetModel(config, seed, dtype)


def inject_convlora(model: UNetModel, selector, r: int = 2, seed: int = 0, scale: float = 1.0) -> UNetModel:
    """Wrap every conv of the selected encoder blocks with a ConvLoRA adapter (in place).

    Each adapter draws from its own seed stream keyed by (seed, block, conv),
    so a block's factors do not depend on which other blocks are selected.
    """
    sel = InjectionSelector.parse(selector, model.config.depth)
    for b in sel.blocks:
        if any(u.conv.adapter is not None for u in model.encoder[b - 1]):
            raise ValueError(f"encoder block {b} already carries ConvLoRA adapters")
    for b in sorted(sel.blocks):
        for j, u in enumerate(model.encoder[b - 1]):
            u.conv.inject(r, np.random.default_rng([seed, b, j]), scale)
        model.injected[b] = r
    return model


def apply_freeze_policy(model: UNetModel, phase, adabn: bool = True) -> None:
    """Set freeze flags and BN modes for a training phase.

    PRETRAIN trains everything outside the ESH. ESH trains only the head.
    ADAPT trains only adapter factors; with ``adabn`` every BN layer
    re-estimates its statistics on target batches, otherwise all BN layers
    stay in EVAL. EVAL freezes everything.
    """
    phase = Phase(phase)
    for prefix, layer in model.named_layers():
        is_esh = prefix.startswith("esh")
        for name in layer.param_names():
            if phase is Phase.PRETRAIN:
                frozen = is_esh
            elif phase is Phase.ESH:
                frozen = not is_esh
            elif phase is Phase.ADAPT:
                frozen = name not in ("lora_X", "lora_Y")
            else:
                frozen = True
            layer.frozen[name] = frozen
        if isinstance(layer, BatchNorm2d):
            if phase is Phase.PRETRAIN:
                layer.mode = BNMode.EVAL if is_esh else BNMode.TRAIN
            elif phase is Phase.ESH:
                layer.mode = BNMode.TRAIN if is_esh else BNMode.EVAL
            elif phase is Phase.ADAPT:
                layer.mode = BNMode.ADAPT if adabn else BNMode.EVAL
            else:
                layer.mode = BNMode.EVAL


def merge_adapters(model: UNetModel) -> None:
    """Fold every adapter into its kernel and drop it (in place)."""
    for _, layer in model.conv_layers():
        if layer.adapter is not None:
            kernel, _ = lora.merge(layer.adapter)
            layer.adapter = None
            layer.kernel = kernel.astype(model.dtype)
            layer.frozen.pop("lora_X", None)
            layer.frozen.pop("lora_Y", None)
    model.injected.clear()
