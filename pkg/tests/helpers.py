"""Shared test oracles: finite differences and scalar reference routines."""

from __future__ import annotations

import math

import numpy as np

from satbev import tensor as T


def finite_diff_grad(scalar_fn, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar_fn w.r.t. every entry of arr."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = scalar_fn()
        flat[i] = orig - eps
        f_minus = scalar_fn()
        flat[i] = orig
        gf[i] = (f_plus - f_minus) / (2.0 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max deviation, relative to the gradient magnitude (absolute below 1).

    Parameters with analytically zero gradients then compare at absolute
    tolerance instead of dividing finite-difference noise by itself.
    """
    denom = max(np.max(np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b)) / denom)


def check_grads(build_loss, params: dict[str, T.Tensor], tol: float = 1e-4,
                eps: float = 1e-5, sample: int | None = None,
                rng: np.random.Generator | None = None) -> float:
    """Compare tape gradients against central differences for every tensor in params.

    build_loss() must run a fresh forward pass reading params and return a
    scalar loss value as float (it is re-invoked for each perturbation).
    With sample=n, only n random coordinates per tensor are probed.
    """
    for p in params.values():
        p.zero_grad()
    with T.Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    worst = 0.0
    for name, p in params.items():
        assert p.grad is not None, f"no gradient accumulated for {name}"

        def forward_value() -> float:
            return build_loss().item()

        if sample is None or p.data.size <= sample:
            fd = finite_diff_grad(forward_value, p.data, eps=eps)
            err = rel_err(p.grad, fd)
        else:
            assert rng is not None
            idx = rng.choice(p.data.size, size=sample, replace=False)
            flat = p.data.reshape(-1)
            gflat = p.grad.reshape(-1)
            fd = np.zeros(sample)
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = forward_value()
                flat[i] = orig - eps
                f_minus = forward_value()
                flat[i] = orig
                fd[k] = (f_plus - f_minus) / (2.0 * eps)
            err = rel_err(gflat[idx], fd)
        assert err <= tol, f"gradient mismatch for {name}: rel err {err:.3e} > {tol}"
        worst = max(worst, err)
    return worst


def conv2d_loop_oracle(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                       stride: int, padding: int) -> np.ndarray:
    """Nested-loop cross-correlation over the zero-padded window."""
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    xp = np.zeros((cin, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    out = np.zeros((cout, oh, ow))
    for o in range(cout):
        for i in range(oh):
            for j in range(ow):
                acc = b[o]
                for c in range(cin):
                    for ki in range(k):
                        for kj in range(k):
                            acc += w[o, c, ki, kj] * xp[c, i * stride + ki, j * stride + kj]
                out[o, i, j] = acc
    return out


def bilinear_point_oracle(x: np.ndarray, out_h: int, out_w: int,
                          c: int, i: int, j: int) -> float:
    """Scalar align-corners=false sample of channel c at output pixel (i, j)."""
    _, h, w = x.shape
    sy = min(max((i + 0.5) * (h / out_h) - 0.5, 0.0), h - 1.0)
    sx = min(max((j + 0.5) * (w / out_w) - 0.5, 0.0), w - 1.0)
    i0, j0 = int(math.floor(sy)), int(math.floor(sx))
    i1, j1 = min(i0 + 1, h - 1), min(j0 + 1, w - 1)
    wy, wx = sy - i0, sx - j0
    return (
        x[c, i0, j0] * (1 - wy) * (1 - wx)
        + x[c, i0, j1] * (1 - wy) * wx
        + x[c, i1, j0] * wy * (1 - wx)
        + x[c, i1, j1] * wy * wx
    )


def gelu_scalar_oracle(v: float) -> float:
    return v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0)))
