"""A single adapted convolution, end to end.

Wrap a frozen 3x3 kernel with a rank-2 adapter, check that nothing changes
until the factors move, take a few Adam steps toward a new target kernel,
then fold the delta back into an ordinary convolution.
"""

import numpy as np

from convlora import adapter as lora
from convlora.tensor import Adam, ConvSpec, conv2d_forward

rng = np.random.default_rng(0)
spec = ConvSpec(in_channels=8, out_channels=16, kernel_size=3)
kernel = rng.standard_normal(spec.kernel_shape) * 0.1
bias = np.zeros(spec.out_channels)

a = lora.init_adapter(kernel, bias, spec, r=2, seed=1)
x = rng.standard_normal((4, 8, 12, 12))

# Y starts at zero, so the adapted layer is the frozen layer
frozen_out = conv2d_forward(x, kernel, bias, spec)
print("identical at init:", np.array_equal(lora.forward(a, x), frozen_out))

full = lora.full_param_count(spec)
small = lora.trainable_param_count(a)
print(f"trainable: {small} of {full} ({100 * small / full:.1f}%)")

# regress onto a rank-2 perturbation of the frozen kernel
target_delta = (rng.standard_normal((16, 2)) @ rng.standard_normal((2, 72))).reshape(spec.kernel_shape) * 0.05
target = conv2d_forward(x, kernel + target_delta, bias, spec)

opt = Adam(lr=2e-2)
for step in range(301):
    out = lora.forward(a, x)
    diff = out - target
    loss = float((diff**2).mean())
    gx, gy, _ = lora.backward(a, x, 2 * diff / diff.size, need_input=False)
    new = opt.step({"X": a.X, "Y": a.Y}, {"X": gx, "Y": gy}, ["X", "Y"])
    a.X, a.Y = new["X"], new["Y"]
    if step % 100 == 0:
        print(f"step {step:3d}  mse {loss:.2e}")

print("frozen kernel untouched:", np.array_equal(a.frozen_kernel, kernel))

merged_kernel, merged_bias = lora.merge(a)
gap = np.abs(conv2d_forward(x, merged_kernel, merged_bias, spec) - lora.forward(a, x)).max()
print(f"merged vs adapted max |diff|: {gap:.1e}")
print("rank of learned delta:", np.linalg.matrix_rank(a.delta_kernel().reshape(16, -1)))
