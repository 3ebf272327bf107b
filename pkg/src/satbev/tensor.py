"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every array is a C-contiguous float64 ndarray. Ops executed inside a
``Tape`` context record a backward rule; outside a tape they run
forward-only (used for evaluation). A tape supports exactly one backward
pass, after which gradients live only in leaf tensors.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_active_tape: "Tape | None" = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_leaf", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._leaf = bool(requires_grad)
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise RuntimeError("backward: tensor was not recorded on a tape")
        self._tape.backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered op record; inputs of an entry always precede it."""

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("nested tapes are not supported")
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = None

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        out._tape = self
        self._entries.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Reverse traversal; accumulates gradients additively into leaves."""
        if self._consumed:
            raise RuntimeError("backward on a consumed tape")
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise RuntimeError("loss tensor does not belong to this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self._entries):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            for tensor, g in backward_fn(g_out):
                if not tensor.requires_grad:
                    continue
                if tensor._leaf:
                    if tensor.grad is None:
                        tensor.grad = np.zeros_like(tensor.data)
                    tensor.grad += g
                else:
                    acc = grads.get(id(tensor))
                    if acc is None:
                        grads[id(tensor)] = np.array(g, dtype=np.float64, copy=True)
                    else:
                        acc += g
        self._entries.clear()


def _tape() -> Tape | None:
    return _active_tape


def _finite_or_die(op: str, arr: np.ndarray) -> None:
    # a non-finite value poisons the sum, so one reduction checks the whole array
    if not np.isfinite(np.sum(arr)):
        raise FloatingPointError(f"{op}: non-finite value in forward output")


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    _finite_or_die(op, data)
    out = Tensor(data)
    tape = _tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        tape._record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# elementwise and shape ops

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        return [(a, g), (b, g)]

    return _result("add", a.data + b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        return [(a, g * b.data), (b, g * a.data)]

    return _result("mul", a.data * b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        return [(x, g * c)]

    return _result("scale", x.data * c, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU x*Phi(x) with Phi the standard normal CDF (erf form)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return [(x, g * (cdf + x.data * pdf))]

    return _result("gelu", x.data * cdf, (x,), bw)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)

    def bw(g):
        return [(x, g / x.data)]

    return _result("log", data, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        return [(x, np.full_like(x.data, float(g.reshape(-1)[0])))]

    return _result("sum_all", np.array(np.sum(x.data)), (x,), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.shape[1:] != b.shape[1:]:
        raise ValueError(f"concat_channels: spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[0]

    def bw(g):
        return [(a, g[:ca]), (b, g[ca:])]

    return _result("concat_channels", np.concatenate([a.data, b.data], axis=0), (a, b), bw)


def split_channels(x: Tensor, sizes: list[int]) -> tuple[Tensor, ...]:
    if sum(sizes) != x.shape[0]:
        raise ValueError(f"split_channels: sizes {sizes} do not sum to {x.shape[0]} channels")
    outs = []
    offset = 0
    for s in sizes:
        lo, hi = offset, offset + s

        def bw(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[lo:hi] = g
            return [(x, full)]

        outs.append(_result("split_channels", x.data[lo:hi].copy(), (x,), bw))
        offset = hi
    return tuple(outs)


# ---------------------------------------------------------------------------
# linear algebra

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map over the trailing extent: y[..., o] = sum_i x[..., i] w[o, i] + b[o]."""
    d_in = x.shape[-1]
    if w.data.ndim != 2 or w.shape[1] != d_in or b.shape != (w.shape[0],):
        raise ValueError(f"linear: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
    flat = x.data.reshape(-1, d_in)
    out = flat @ w.data.T + b.data

    def bw(g):
        gf = g.reshape(-1, w.shape[0])
        return [
            (x, (gf @ w.data).reshape(x.shape)),
            (w, gf.T @ flat),
            (b, gf.sum(axis=0)),
        ]

    return _result("linear", out.reshape(x.shape[:-1] + (w.shape[0],)), (x, w, b), bw)


def channel_project(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-cell linear map on a [C,H,W] map (a 1x1 convolution)."""
    c, h, wd = x.shape
    if w.data.ndim != 2 or w.shape[1] != c or b.shape != (w.shape[0],):
        raise ValueError(f"channel_project: incompatible shapes x{x.shape} w{w.shape}")
    flat = x.data.reshape(c, h * wd)
    out = (w.data @ flat + b.data[:, None]).reshape(w.shape[0], h, wd)

    def bw(g):
        gf = g.reshape(w.shape[0], h * wd)
        return [
            (x, (w.data.T @ gf).reshape(x.shape)),
            (w, gf @ flat.T),
            (b, gf.sum(axis=1)),
        ]

    return _result("channel_project", out, (x, w, b), bw)


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul: expects 2-D tensors")
    bd = b.data.T if transpose_b else b.data
    if a.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul: inner extents differ {a.shape} vs {b.shape}")
    out = a.data @ bd

    def bw(g):
        ga = g @ bd.T
        gb = a.data.T @ g
        return [(a, ga), (b, gb.T if transpose_b else gb)]

    return _result("matmul", out, (a, b), bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return [(x, (g - dot) * y)]

    return _result("softmax_lastdim", y, (x,), bw)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 0 of a [K,H,W] map (per-cell class distribution)."""
    shifted = x.data - np.max(x.data, axis=0, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=0, keepdims=True)

    def bw(g):
        dot = np.sum(g * y, axis=0, keepdims=True)
        return [(x, (g - dot) * y)]

    return _result("softmax_channels", y, (x,), bw)


def log_softmax_channels(x: Tensor) -> Tensor:
    """Numerically stable log-softmax over axis 0 of a [K,H,W] map."""
    shifted = x.data - np.max(x.data, axis=0, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=0, keepdims=True))
    y = shifted - lse

    def bw(g):
        soft = np.exp(y)
        return [(x, g - soft * np.sum(g, axis=0, keepdims=True))]

    return _result("log_softmax_channels", y, (x,), bw)


# ---------------------------------------------------------------------------
# spatial ops

def _conv_out_extent(n: int, k: int, stride: int, padding: int, op: str) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ValueError(f"{op}: non-integral output extent for n={n} k={k} stride={stride} pad={padding}")
    return span // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(c, k, k, oh, ow), strides=(s0, s1, s2, s1 * stride, s2 * stride)
    )
    return np.ascontiguousarray(win).reshape(c * k * k, oh * ow)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding; x[Cin,H,W], w[Cout,Cin,k,k], b[Cout]."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ValueError(f"conv2d: expects x[C,H,W] and w[O,C,k,k], got {x.shape}, {w.shape}")
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin_w != cin or kh != kw:
        raise ValueError(f"conv2d: weight {w.shape} incompatible with input {x.shape}")
    if kh % 2 != 1:
        raise ValueError(f"conv2d: kernel extent must be odd, got {kh}")
    if b.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({cout},)")
    k = kh
    oh = _conv_out_extent(h, k, stride, padding, "conv2d")
    ow = _conv_out_extent(wd, k, stride, padding, "conv2d")

    if k == 1 and stride == 1 and padding == 0:
        flat = x.data.reshape(cin, h * wd)
        w2 = w.data.reshape(cout, cin)
        out = (w2 @ flat + b.data[:, None]).reshape(cout, h, wd)

        def bw1(g):
            gf = g.reshape(cout, h * wd)
            return [
                (x, (w2.T @ gf).reshape(x.shape)),
                (w, (gf @ flat.T).reshape(w.shape)),
                (b, gf.sum(axis=1)),
            ]

        return _result("conv2d", out, (x, w, b), bw1)

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride, oh, ow)
    w2 = w.data.reshape(cout, cin * k * k)
    out = (w2 @ cols + b.data[:, None]).reshape(cout, oh, ow)

    def bw(g):
        gf = g.reshape(cout, oh * ow)
        gw = (gf @ cols.T).reshape(w.shape)
        gcols = (w2.T @ gf).reshape(cin, k, k, oh, ow)
        gxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                gxp[:, ki : ki + oh * stride : stride, kj : kj + ow * stride : stride] += gcols[:, ki, kj]
        gx = gxp[:, padding : padding + h, padding : padding + wd] if padding else gxp
        return [(x, gx), (w, gw), (b, gf.sum(axis=1))]

    return _result("conv2d", out, (x, w, b), bw)


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Per-window max; gradient routes to the lowest row-major argmax cell."""
    if x.data.ndim != 3:
        raise ValueError(f"maxpool2d: expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if h < k or w < k:
        raise ValueError(f"maxpool2d: window {k} larger than input {h}x{w}")
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    s0, s1, s2 = x.data.strides
    win = np.lib.stride_tricks.as_strided(
        x.data, shape=(c, oh, ow, k, k), strides=(s0, s1 * stride, s2 * stride, s1, s2)
    )
    flat = np.ascontiguousarray(win).reshape(c, oh, ow, k * k)
    arg = np.argmax(flat, axis=3)  # first occurrence = lowest row-major index
    out = np.take_along_axis(flat, arg[..., None], axis=3)[..., 0]

    def bw(g):
        gx = np.zeros(c * h * w)
        # flat source index of each window's argmax cell
        ii = arg // k
        jj = arg % k
        rows = (np.arange(oh) * stride)[None, :, None] + ii
        cols = (np.arange(ow) * stride)[None, None, :] + jj
        src = (np.arange(c)[:, None, None] * (h * w) + rows * w + cols).reshape(-1)
        np.add.at(gx, src, g.reshape(-1))
        return [(x, gx.reshape(c, h, w))]

    return _result("maxpool2d", out, (x,), bw)


def bilinear_interp(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize with the align-corners=false convention and edge clamping."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"bilinear_interp: output extents must be positive, got {out_h}x{out_w}")
    c, h, w = x.shape
    sy = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    sx = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    i0 = np.floor(sy).astype(np.int64)
    j0 = np.floor(sx).astype(np.int64)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    wy = (sy - i0)[:, None]
    wx = (sx - j0)[None, :]

    g00 = x.data[:, i0[:, None], j0[None, :]]
    g01 = x.data[:, i0[:, None], j1[None, :]]
    g10 = x.data[:, i1[:, None], j0[None, :]]
    g11 = x.data[:, i1[:, None], j1[None, :]]
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    out = g00 * w00 + g01 * w01 + g10 * w10 + g11 * w11

    def bw(g):
        gx = np.zeros((c, h * w))
        for ii, jj, wgt in ((i0, j0, w00), (i0, j1, w01), (i1, j0, w10), (i1, j1, w11)):
            idx = (ii[:, None] * w + jj[None, :]).reshape(-1)
            contrib = (g * wgt).reshape(c, -1)
            for ch in range(c):
                gx[ch] += np.bincount(idx, weights=contrib[ch], minlength=h * w)
        return [(x, gx.reshape(c, h, w))]

    return _result("bilinear_interp", out, (x,), bw)


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the spatial extents of a [C,H,W] tensor."""
    if min(top, bottom, left, right) < 0:
        raise ValueError("pad2d: negative padding")
    c, h, w = x.shape
    data = np.pad(x.data, ((0, 0), (top, bottom), (left, right)))

    def bw(g):
        return [(x, g[:, top : top + h, left : left + w])]

    return _result("pad2d", data, (x,), bw)


def extract_patches(x: Tensor, p: int) -> Tensor:
    """Tile a [C,H,W] map into non-overlapping p x p patch tokens [N, C*p*p]."""
    c, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"extract_patches: patch size {p} does not divide {h}x{w}")
    gh, gw = h // p, w // p
    tok = x.data.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * p * p)

    def bw(g):
        gx = g.reshape(gh, gw, c, p, p).transpose(2, 0, 3, 1, 4).reshape(c, h, w)
        return [(x, gx)]

    return _result("extract_patches", tok, (x,), bw)


def fold_patches(tok: Tensor, c: int, h: int, w: int, p: int) -> Tensor:
    """Inverse of extract_patches."""
    gh, gw = h // p, w // p
    if tok.shape != (gh * gw, c * p * p):
        raise ValueError(f"fold_patches: token shape {tok.shape} incompatible with [{c},{h},{w}] p={p}")
    out = tok.data.reshape(gh, gw, c, p, p).transpose(2, 0, 3, 1, 4).reshape(c, h, w)

    def bw(g):
        gt = g.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4).reshape(tok.shape)
        return [(tok, gt)]

    return _result("fold_patches", out, (tok,), bw)
