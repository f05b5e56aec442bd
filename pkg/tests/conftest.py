import numpy as np
import pytest


def naive_conv2d(x, kernel, bias, stride, pad):
    """Six nested loops, no vectorisation. Used as an independent oracle."""
    n, c, h, w = x.shape
    o, _, k, _ = kernel.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if bias is None else float(bias[oc])
                    for ic in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[b, ic, i * stride + di, j * stride + dj] * kernel[oc, ic, di, dj]
                    out[b, oc, i, j] = acc
    return out


def finite_difference(fn, arr, step=1e-5):
    """Central differences of a scalar ``fn()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    grad = np.zeros(arr.shape)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn()
        flat[i] = orig - step
        fm = fn()
        flat[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return grad


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max())
    return 0.0 if scale == 0 else float(np.abs(a - b).max() / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
