"""Shared test utilities: independent oracles and gradient-check sweeps."""

from __future__ import annotations

import numpy as np

from ganfp import autodiff as ad
from ganfp.autodiff import Tensor


def conv2d_reference(x: np.ndarray, w: np.ndarray, stride: int = 1,
                     padding: int = 0) -> np.ndarray:
    """Direct sliding-window convolution, loops only."""
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    assert c == i
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for bi in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    patch = xp[bi, :, yi * stride:yi * stride + kh,
                               xi * stride:xi * stride + kw]
                    out[bi, oi, yi, xi] = np.sum(patch * w[oi])
    return out


def gradcheck_op(build, seed: int, h: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    ``build(rng)`` returns (forward_closure, params): the closure re-runs
    the op from current tensor contents and returns a Tensor; gradients
    are checked for every tensor in ``params``.  Everything runs in
    float64 so the difference quotient itself is trustworthy.
    """
    rng = np.random.default_rng(seed)
    forward, params = build(rng)
    proj = None

    def scalar():
        nonlocal proj
        out = forward()
        if proj is None:
            proj = Tensor(np.random.default_rng(seed + 1).normal(size=out.shape),
                          dtype=np.float64)
        return ad.tsum(ad.mul(out, proj))

    with ad.Tape() as tape:
        loss = scalar()
        ad.backward(loss, tape)
    worst = 0.0
    for p in params:
        assert p.grad is not None, "no gradient reached a checked parameter"
        fd = ad.finite_difference_grad(scalar, p, h=h)
        worst = max(worst, ad.max_rel_err(p.grad, fd))
        p.grad = None
    return worst


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True,
                  dtype=np.float64)


def op_gradcheck_builders():
    """One builder per differentiable op, tiny shapes."""

    def conv_s1(rng):
        x = _t(rng, 2, 3, 5, 5)
        w = _t(rng, 4, 3, 3, 3, scale=0.5)
        return (lambda: ad.conv2d(x, w, stride=1, padding=1)), [x, w]

    def conv_s2(rng):
        x = _t(rng, 2, 2, 6, 6)
        w = _t(rng, 3, 2, 3, 3, scale=0.5)
        return (lambda: ad.conv2d(x, w, stride=2, padding=0)), [x, w]

    def fc(rng):
        x = _t(rng, 3, 4)
        w = _t(rng, 5, 4)
        b = _t(rng, 5)
        return (lambda: ad.fully_connected(x, w, b)), [x, w, b]

    def mm(rng):
        a = _t(rng, 3, 4)
        b = _t(rng, 4, 2)
        return (lambda: ad.matmul(a, b)), [a, b]

    def add_broadcast(rng):
        a = _t(rng, 2, 3, 4, 4)
        b = _t(rng, 3, 1, 1)
        return (lambda: ad.add(a, b)), [a, b]

    def mul_broadcast(rng):
        a = _t(rng, 2, 3, 4, 4)
        b = _t(rng, 2, 3, 1, 1)
        return (lambda: ad.mul(a, b)), [a, b]

    def lrelu(rng):
        x = _t(rng, 4, 7)
        return (lambda: ad.leaky_relu(x, 0.2)), [x]

    def sig(rng):
        x = _t(rng, 4, 7)
        return (lambda: ad.sigmoid(x)), [x]

    def sp(rng):
        x = _t(rng, 4, 7)
        return (lambda: ad.softplus(x)), [x]

    def th(rng):
        x = _t(rng, 4, 7)
        return (lambda: ad.tanh(x)), [x]

    def pool(rng):
        x = _t(rng, 2, 3, 4, 4)
        return (lambda: ad.avg_pool2(x)), [x]

    def upsample(rng):
        x = _t(rng, 2, 3, 3, 3)
        return (lambda: ad.upsample_nearest2(x)), [x]

    def slice_op(rng):
        x = _t(rng, 3, 8)
        return (lambda: ad.narrow(x, 1, 2, 4)), [x]

    def reshape_op(rng):
        x = _t(rng, 2, 6)
        return (lambda: ad.reshape(x, (3, 4))), [x]

    def clamp_op(rng):
        # keep samples away from the clamp knees where the subgradient jumps
        x = Tensor(rng.uniform(-0.8, 0.8, size=(4, 5)), requires_grad=True,
                   dtype=np.float64)
        return (lambda: ad.clamp(x, -1.0, 1.0)), [x]

    def sep_op(rng):
        x = _t(rng, 2, 2, 5, 5)
        left = rng.normal(size=(4, 5))
        right = rng.normal(size=(3, 5))
        return (lambda: ad.sep_image_op(x, left, right)), [x]

    def mean_op(rng):
        x = _t(rng, 3, 5)
        return (lambda: ad.tmean(x)), [x]

    return {
        "conv2d_s1p1": conv_s1,
        "conv2d_s2p0": conv_s2,
        "fully_connected": fc,
        "matmul": mm,
        "add_broadcast": add_broadcast,
        "mul_broadcast": mul_broadcast,
        "leaky_relu": lrelu,
        "sigmoid": sig,
        "softplus": sp,
        "tanh": th,
        "avg_pool2": pool,
        "upsample_nearest2": upsample,
        "narrow": slice_op,
        "reshape": reshape_op,
        "clamp": clamp_op,
        "sep_image_op": sep_op,
        "tmean": mean_op,
    }
