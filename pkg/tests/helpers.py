"""Shared oracles for the test suite.

Everything here is deliberately independent of the library's fast paths:
finite differences for gradients, a direct 7-loop convolution, and plain
formula transcriptions.  These stay naive on purpose.
"""

import numpy as np

from zid.tensor import backward


def naive_conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """Direct nested-loop cross-correlation oracle."""
    B, Ci, H, W = x.shape
    Co, Cig, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, Co, Ho, Wo), dtype=np.float64)
    cig = Ci // groups
    cog = Co // groups
    for n in range(B):
        for co in range(Co):
            g = co // cog
            for oy in range(Ho):
                for ox in range(Wo):
                    acc = 0.0
                    for ci in range(cig):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (xp[n, g * cig + ci, oy * stride + ky, ox * stride + kx]
                                        * w[co, ci, ky, kx])
                    out[n, co, oy, ox] = acc
            if b is not None:
                out[n, co] += b[co]
    return out


def numeric_grad(loss_fn, tensor, index, h=1e-5):
    """Central finite difference of a scalar-valued rebuild at one element."""
    old = tensor.data[index]
    tensor.data[index] = old + h
    fp = loss_fn().item()
    tensor.data[index] = old - h
    fm = loss_fn().item()
    tensor.data[index] = old
    return (fp - fm) / (2.0 * h)


def fd_check(loss_fn, tensors, rel_tol=1e-3, h=1e-5, max_per_tensor=None, seed=0):
    """Assert analytic grads of loss_fn() match central differences.

    loss_fn rebuilds the graph from the given tensors on every call, so the
    check never reuses the path it is validating.  Relative error uses
    max(|analytic|, |numeric|, 1e-6) in the denominator.
    """
    loss = loss_fn()
    backward(loss)
    analytic = []
    for t in tensors:
        assert t.grad is not None, "tensor missing grad after backward"
        analytic.append(np.array(t.grad, copy=True))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ana in zip(tensors, analytic):
        flat = list(np.ndindex(t.data.shape))
        if max_per_tensor is not None and len(flat) > max_per_tensor:
            pick = rng.choice(len(flat), size=max_per_tensor, replace=False)
            flat = [flat[i] for i in pick]
        for idx in flat:
            num = numeric_grad(loss_fn, t, idx, h)
            a = ana[idx]
            rel = abs(a - num) / max(abs(a), abs(num), 1e-6)
            worst = max(worst, rel)
            assert rel < rel_tol, (
                f"grad mismatch at {idx}: analytic={a:.8g} numeric={num:.8g} rel={rel:.3g}")
    return worst
