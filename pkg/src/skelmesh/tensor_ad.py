"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Covers exactly the op set the three networks need: affine layers, elementwise
activations, 3D (cross-)correlation and its adjoint, graph convolution,
bilinear image sampling, the training losses, and structural ops (concat,
slicing, reshape, tiling, replication upsampling). A Tape records applied ops
in order; backward replays them in exact reverse order and accumulates
gradients additively at fan-outs.

A tape is single-writer: one training step builds and consumes it. Forward
passes without an active tape skip all recording and are freely shareable
across threads.

2D image convolutions are realized as conv3d with a singleton depth axis.
"""

from __future__ import annotations

import struct

import numpy as np
from scipy import sparse
from scipy.special import expit

from .geom_core import NeighborGraph

_ACTIVE_TAPES: list["Tape"] = []


class NumericalAbort(FloatingPointError):
    """Training diverged (NaN/inf loss); carries a phase diagnostic."""


class Tensor:
    """Dense n-d array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim:  # ascontiguousarray would promote 0-d scalars to 1-d
            data = np.ascontiguousarray(data)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class Tape:
    """Ordered record of applied ops; backward walks it in reverse."""

    def __init__(self):
        self._records = []   # (fn, out) pairs; fn consumes out.grad
        self._involved = set()

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self
        return False

    def record(self, out: Tensor, fn, *inputs: Tensor):
        self._records.append((fn, out))
        self._involved.add(out)
        self._involved.update(inputs)

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ValueError("backward expects a scalar loss")
        for t in self._involved:
            t.grad = None
        loss.grad = np.ones_like(loss.data)
        for fn, out in reversed(self._records):
            if out.grad is None:
                continue  # branch not reached from the loss
            fn(out.grad)


def _tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _unary(x: Tensor, out_data: np.ndarray, grad_fn) -> Tensor:
    out = Tensor(out_data, requires_grad=x.requires_grad)
    t = _tape()
    if t is not None and x.requires_grad:
        t.record(out, lambda g: _accum(x, grad_fn(g)), x)
    return out


# ---------------------------------------------------------------------------
# arithmetic / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, g)
        t.record(out, bwd, a, b)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, -g)
        t.record(out, bwd, a, b)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)
    t = _tape()
    if t is not None and out.requires_grad:
        ad, bd = a.data, b.data
        def bwd(g):
            if a.requires_grad:
                _accum(a, g * bd)
            if b.requires_grad:
                _accum(b, g * ad)
        t.record(out, bwd, a, b)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _unary(x, x.data * c, lambda g: g * c)


def add_n(xs: list[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("add_n of nothing")
    out = xs[0]
    for x in xs[1:]:
        out = add(out, x)
    return out


def sum_all(x: Tensor) -> Tensor:
    return _unary(x, np.array(x.data.sum()), lambda g: np.full_like(x.data, float(g)))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _unary(x, np.array(x.data.mean()), lambda g: np.full_like(x.data, float(g) / n))


def reshape(x: Tensor, shape) -> Tensor:
    return _unary(x, x.data.reshape(shape), lambda g: g.reshape(x.data.shape))


def concat(xs: list[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([x.data for x in xs], axis=axis)
    req = any(x.requires_grad for x in xs)
    out = Tensor(data, requires_grad=req)
    t = _tape()
    if t is not None and req:
        sizes = [x.data.shape[axis] for x in xs]
        offsets = np.cumsum([0] + sizes)
        def bwd(g):
            for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
                if x.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    _accum(x, g[tuple(sl)])
        t.record(out, bwd, *xs)
    return out


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    def bwd_make(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return full
    return _unary(x, x.data[start:stop].copy(), bwd_make)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    def bwd_make(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return full
    return _unary(x, x.data[idx].copy(), bwd_make)


def tile_rows(x: Tensor, n: int) -> Tensor:
    """Repeat a (d,) or (1,d) tensor into n rows."""
    row = x.data.reshape(1, -1)
    return _unary(x, np.repeat(row, n, axis=0),
                  lambda g: g.sum(axis=0).reshape(x.data.shape))


def rows_dot(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise dot product of two (n,d) tensors -> (n,1)."""
    if a.shape != b.shape:
        raise ValueError("rows_dot shape mismatch")
    out_data = np.einsum("ij,ij->i", a.data, b.data)[:, None]
    out = Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad)
    t = _tape()
    if t is not None and out.requires_grad:
        ad, bd = a.data, b.data
        def bwd(g):
            if a.requires_grad:
                _accum(a, g * bd)
            if b.requires_grad:
                _accum(b, g * ad)
        t.record(out, bwd, a, b)
    return out


def rows_scale(a: Tensor, s: Tensor) -> Tensor:
    """Scale each row of (n,d) a by the scalar in row i of (n,1) s."""
    if s.shape != (a.shape[0], 1):
        raise ValueError("rows_scale expects (n,1) scales")
    out = Tensor(a.data * s.data, requires_grad=a.requires_grad or s.requires_grad)
    t = _tape()
    if t is not None and out.requires_grad:
        ad, sd = a.data, s.data
        def bwd(g):
            if a.requires_grad:
                _accum(a, g * sd)
            if s.requires_grad:
                _accum(s, (g * ad).sum(axis=1, keepdims=True))
        t.record(out, bwd, a, s)
    return out


def power(x: Tensor, p: float) -> Tensor:
    out_data = np.power(x.data, p)
    return _unary(x, out_data, lambda g: g * p * np.power(x.data, p - 1.0))


def crop3d(x: Tensor, origin, size) -> Tensor:
    """Crop a 4D (c,D,H,W) tensor: backward scatters into a zero tensor."""
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    def bwd_make(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return full
    return _unary(x, x.data[sl].copy(), bwd_make)


def upsample_repeat(x: Tensor, factor: int) -> Tensor:
    """Replication upsampling of the spatial axes of a (c,D,H,W) tensor."""
    data = x.data
    for ax in (1, 2, 3):
        data = np.repeat(data, factor, axis=ax)
    c, D, H, W = x.shape
    def bwd(g):
        return g.reshape(c, D, factor, H, factor, W, factor).sum(axis=(2, 4, 6))
    return _unary(x, data, bwd)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _unary(x, x.data * mask, lambda g: g * mask)


_ONE_BELOW = np.nextafter(1.0, 0.0)


def tanh(x: Tensor) -> Tensor:
    # clamp saturation so outputs stay strictly inside (-1, 1); the true
    # derivative there is ~0 anyway
    y = np.clip(np.tanh(x.data), -_ONE_BELOW, _ONE_BELOW)
    return _unary(x, y, lambda g: g * (1.0 - y * y))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _unary(x, y, lambda g: g * y * (1.0 - y))


# ---------------------------------------------------------------------------
# linear


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-wise affine map: (n,i) @ (i,o) + (o,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear shapes {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise ValueError(f"bias shape {b.shape} != ({w.shape[1]},)")
    out = Tensor(x.data @ w.data + b.data,
                 requires_grad=x.requires_grad or w.requires_grad or b.requires_grad)
    t = _tape()
    if t is not None and out.requires_grad:
        xd, wd = x.data, w.data
        def bwd(g):
            if x.requires_grad:
                _accum(x, g @ wd.T)
            if w.requires_grad:
                _accum(w, xd.T @ g)
            if b.requires_grad:
                _accum(b, g.sum(axis=0))
        t.record(out, bwd, x, w, b)
    return out


# ---------------------------------------------------------------------------
# 3D convolution (cross-correlation semantics) and its adjoint


def _conv_out_dim(d: int, k: int, stride: int, pad: int) -> int:
    return (d + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """(ci,D,H,W) -> column matrix (ci*k^3, Do*Ho*Wo).

    Built from k^3 strided block copies (one per kernel offset), which is far
    cheaper than gathering overlapping windows element-wise; the layout lines
    up with kernel.reshape(co, ci*k^3) so the conv is a single matmul.
    """
    ci = x.shape[0]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    dims_out = tuple(_conv_out_dim(d, k, stride, pad) for d in x.shape[1:])
    do, ho, wo = dims_out
    n = do * ho * wo
    buf = np.empty((ci, k ** 3, n), dtype=x.dtype)
    i = 0
    for a in range(k):
        for b in range(k):
            for c in range(k):
                view = xp[:,
                          a:a + (do - 1) * stride + 1:stride,
                          b:b + (ho - 1) * stride + 1:stride,
                          c:c + (wo - 1) * stride + 1:stride]
                buf[:, i, :] = view.reshape(ci, n)
                i += 1
    return buf.reshape(ci * k ** 3, n), dims_out


def _conv3d_forward(x: np.ndarray, k: np.ndarray, stride: int, pad: int):
    co, ci, kk = k.shape[0], k.shape[1], k.shape[2]
    if x.shape[0] != ci:
        raise ValueError(f"conv3d channel mismatch: x has {x.shape[0]}, kernel wants {ci}")
    for d in x.shape[1:]:
        if _conv_out_dim(d, kk, stride, pad) < 1:
            raise ValueError(f"conv3d spatial dims {x.shape[1:]} too small for k={kk}, "
                             f"stride={stride}, pad={pad}")
    cols, (do, ho, wo) = _im2col(x, kk, stride, pad)
    out = k.reshape(co, -1) @ cols
    return out.reshape(co, do, ho, wo), cols


def _zero_stuff(y: np.ndarray, stride: int, extra) -> np.ndarray:
    """Insert stride-1 zeros between spatial elements, plus trailing zeros."""
    c, d, h, w = y.shape
    out = np.zeros((c, (d - 1) * stride + 1 + extra[0],
                    (h - 1) * stride + 1 + extra[1],
                    (w - 1) * stride + 1 + extra[2]))
    out[:, ::stride, ::stride, ::stride][:, :d, :h, :w] = y
    return out


def _conv_transpose_forward(y: np.ndarray, k: np.ndarray, stride: int, pad: int,
                            out_dims=None):
    """Adjoint of _conv3d_forward wrt x: maps (co,...) -> (ci,...)."""
    co, ci, kk = k.shape[0], k.shape[1], k.shape[2]
    if y.shape[0] != co:
        raise ValueError(f"conv3d_transpose channel mismatch: input has {y.shape[0]}, "
                         f"kernel wants {co}")
    default = tuple((d - 1) * stride - 2 * pad + kk for d in y.shape[1:])
    if out_dims is None:
        out_dims = default
    out_dims = tuple(int(d) for d in out_dims)
    for got, want in zip(out_dims, y.shape[1:]):
        if _conv_out_dim(got, kk, stride, pad) != want:
            raise ValueError(f"out_dims {out_dims} inconsistent with input {y.shape[1:]}")
    extra = [od - dd for od, dd in zip(out_dims, default)]
    ys = _zero_stuff(y, stride, extra)
    kf = k[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)  # (ci, co, k,k,k) flipped
    out, _ = _conv3d_forward(ys, np.ascontiguousarray(kf), 1, kk - 1 - pad)
    return out


def conv3d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """Cross-correlation of (ci,D,H,W) with (co,ci,k,k,k); output dims are
    floor((d + 2*pad - k)/stride) + 1 per axis."""
    out_data, _ = _conv3d_forward(x.data, k.data, stride, pad)
    out = Tensor(out_data, requires_grad=x.requires_grad or k.requires_grad)
    t = _tape()
    if t is not None and out.requires_grad:
        kd, xd = k.data, x.data
        kk = kd.shape[2]
        def bwd(g):
            co = g.shape[0]
            if k.requires_grad:
                # im2col recomputed here: cheaper than holding it on the tape
                cols, _ = _im2col(xd, kk, stride, pad)
                _accum(k, (g.reshape(co, -1) @ cols.T).reshape(kd.shape))
            if x.requires_grad:
                _accum(x, _conv_transpose_forward(g, kd, stride, pad,
                                                  out_dims=xd.shape[1:]))
        t.record(out, bwd, x, k)
    return out


def conv3d_transpose(x: Tensor, k: Tensor, stride: int = 1, pad: int = 1,
                     out_dims=None) -> Tensor:
    """Adjoint of conv3d with the same kernel layout: (co,...) -> (ci,...).

    out_dims selects among the stride-ambiguous output sizes; defaults to
    (d-1)*stride - 2*pad + k.
    """
    out_data = _conv_transpose_forward(x.data, k.data, stride, pad, out_dims)
    out = Tensor(out_data, requires_grad=x.requires_grad or k.requires_grad)
    t = _tape()
    if t is not None and out.requires_grad:
        kd = k.data
        xd = x.data
        def bwd(g):
            # <convT(x,k), g> = <x, conv(g,k)>, so dx = conv(g,k) and dk is
            # conv's kernel-gradient rule with x standing in for the output grad
            if x.requires_grad:
                gx, _ = _conv3d_forward(g, kd, stride, pad)
                _accum(x, gx)
            if k.requires_grad:
                cols, _ = _im2col(g, kd.shape[2], stride, pad)
                _accum(k, (xd.reshape(xd.shape[0], -1) @ cols.T).reshape(kd.shape))
        t.record(out, bwd, x, k)
    return out


# ---------------------------------------------------------------------------
# graph convolution


def _graph_csr(graph: NeighborGraph) -> sparse.csr_matrix:
    cached = getattr(graph, "_csr_cache", None)
    if cached is None:
        n = len(graph)
        data = np.ones(graph.indices.size)
        cached = sparse.csr_matrix((data, graph.indices, graph.indptr), shape=(n, n))
        graph._csr_cache = cached
    return cached


def graph_conv(h: Tensor, graph: NeighborGraph, w0: Tensor, w1: Tensor,
               bias: Tensor | None = None) -> Tensor:
    """Per vertex p: h'_p = w0^T h_p + sum_{q in N(p)} w1^T h_q.

    No degree normalization. Optional bias is flag-gated by passing it.
    """
    if len(graph) != h.shape[0]:
        raise IndexError(f"graph covers {len(graph)} vertices, features have {h.shape[0]}")
    A = _graph_csr(graph)
    nh = A @ h.data
    out_data = h.data @ w0.data + nh @ w1.data
    if bias is not None:
        out_data = out_data + bias.data
    req = h.requires_grad or w0.requires_grad or w1.requires_grad or (
        bias is not None and bias.requires_grad)
    out = Tensor(out_data, requires_grad=req)
    t = _tape()
    if t is not None and req:
        hd = h.data
        w0d, w1d = w0.data, w1.data
        def bwd(g):
            if w0.requires_grad:
                _accum(w0, hd.T @ g)
            if w1.requires_grad:
                _accum(w1, nh.T @ g)
            if h.requires_grad:
                _accum(h, g @ w0d.T + A.T @ (g @ w1d.T))
            if bias is not None and bias.requires_grad:
                _accum(bias, g.sum(axis=0))
        t.record(out, bwd, h, w0, w1, *([bias] if bias is not None else []))
    return out


# ---------------------------------------------------------------------------
# bilinear image sampling (for pixel-feature projection)


def bilinear_sample(fm: Tensor, pos: Tensor):
    """Sample a (c,H,W) feature map at continuous (u,v) pixel positions.

    pos is (n,2) with u along width and v along height; positions outside
    [0, W-1] x [0, H-1] yield zero features. Returns the (n,c) samples and a
    boolean in-frame mask.
    """
    c, H, W = fm.shape
    if H < 2 or W < 2:
        raise ValueError("bilinear_sample needs a feature map of at least 2x2")
    u = pos.data[:, 0]
    v = pos.data[:, 1]
    inside = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uc = np.clip(u, 0, W - 1)
    vc = np.clip(v, 0, H - 1)
    u0 = np.minimum(np.floor(uc).astype(np.int64), W - 2) if W > 1 else np.zeros(len(u), np.int64)
    v0 = np.minimum(np.floor(vc).astype(np.int64), H - 2) if H > 1 else np.zeros(len(v), np.int64)
    fu = uc - u0
    fv = vc - v0
    f00 = fm.data[:, v0, u0]          # (c, n)
    f01 = fm.data[:, v0, u0 + 1]
    f10 = fm.data[:, v0 + 1, u0]
    f11 = fm.data[:, v0 + 1, u0 + 1]
    w00 = (1 - fu) * (1 - fv)
    w01 = fu * (1 - fv)
    w10 = (1 - fu) * fv
    w11 = fu * fv
    samples = (f00 * w00 + f01 * w01 + f10 * w10 + f11 * w11).T * inside[:, None]
    out = Tensor(samples, requires_grad=fm.requires_grad or pos.requires_grad)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(g):
            gi = g * inside[:, None]          # (n, c)
            if fm.requires_grad:
                acc = np.zeros_like(fm.data)
                np.add.at(acc, (slice(None), v0, u0), (gi * w00[:, None]).T)
                np.add.at(acc, (slice(None), v0, u0 + 1), (gi * w01[:, None]).T)
                np.add.at(acc, (slice(None), v0 + 1, u0), (gi * w10[:, None]).T)
                np.add.at(acc, (slice(None), v0 + 1, u0 + 1), (gi * w11[:, None]).T)
                _accum(fm, acc)
            if pos.requires_grad:
                du = ((f01 - f00) * (1 - fv) + (f11 - f10) * fv).T
                dv = ((f10 - f00) * (1 - fu) + (f11 - f01) * fu).T
                gp = np.zeros_like(pos.data)
                gp[:, 0] = (gi * du).sum(axis=1) * inside
                gp[:, 1] = (gi * dv).sum(axis=1) * inside
                _accum(pos, gp)
        t.record(out, bwd, fm, pos)
    return out, inside


# ---------------------------------------------------------------------------
# losses


def bce(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of predictions in (0,1) against {0,1}-ish
    targets."""
    tgt = np.asarray(target, dtype=np.float64)
    if tgt.shape != pred.shape:
        raise ValueError(f"bce shape mismatch {pred.shape} vs {tgt.shape}")
    if np.any(np.isnan(pred.data)) or np.any(np.isnan(tgt)):
        raise FloatingPointError("NaN in bce inputs")
    eps = 1e-12
    p = np.clip(pred.data, eps, 1 - eps)
    loss = -(tgt * np.log(p) + (1 - tgt) * np.log(1 - p)).mean()
    n = p.size
    def bwd(g):
        return float(g) * (p - tgt) / (p * (1 - p)) / n
    return _unary(pred, np.array(loss), bwd)


def chamfer_loss(pred: Tensor, target: np.ndarray,
                 target_weights: np.ndarray | None = None) -> Tensor:
    """Differentiable Chamfer distance (sum form) between predicted points
    (n,3) and a fixed target set (m,3).

    Each point routes its gradient to its current nearest counterpart;
    exact ties resolve to the lowest index. Optional per-target-point weights
    scale both terms through the matched target point.
    """
    tgt = np.asarray(target, dtype=np.float64)
    if np.any(np.isnan(pred.data)) or np.any(np.isnan(tgt)):
        raise FloatingPointError("NaN in chamfer inputs")
    if len(tgt) == 0 or pred.shape[0] == 0:
        raise ValueError("chamfer_loss requires non-empty point sets")
    w = np.ones(len(tgt)) if target_weights is None else np.asarray(target_weights, np.float64)
    p = pred.data
    d2 = np.sum((p[:, None, :] - tgt[None, :, :]) ** 2, axis=2)
    j_star = np.argmin(d2, axis=1)   # nearest target per prediction
    i_star = np.argmin(d2, axis=0)   # nearest prediction per target
    term1 = float((w[j_star] * d2[np.arange(len(p)), j_star]).sum())
    term2 = float((w * d2[i_star, np.arange(len(tgt))]).sum())
    def bwd(g):
        gp = 2.0 * w[j_star, None] * (p - tgt[j_star])
        np.add.at(gp, i_star, 2.0 * w[:, None] * (p[i_star] - tgt))
        return float(g) * gp
    return _unary(pred, np.array(term1 + term2), bwd)


def laplacian_smoothness(points: Tensor, graph: NeighborGraph) -> Tensor:
    """Differentiable Eq.-style Laplacian term: sum over points of the
    unsquared distance to the mean of their neighbors."""
    deg = graph.degree().astype(np.float64)
    mask = deg > 0
    A = _graph_csr(graph)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=mask)
    M = sparse.diags(inv) @ A  # row i = mean over N(i)
    p = points.data
    r = p - M @ p
    norms = np.linalg.norm(r, axis=1)
    loss = float(norms[mask].sum())
    def bwd(g):
        safe = norms.copy()
        safe[~mask] = 1.0
        safe[safe < 1e-30] = 1.0
        u = r / safe[:, None]
        u[~mask] = 0.0
        u[norms < 1e-30] = 0.0   # subgradient 0 at the centroid
        return float(g) * (u - M.T @ u)
    return _unary(points, np.array(loss), bwd)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Per-parameter moment accumulators for bias-corrected Adam."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, in place; deterministic given inputs."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1 ** t)
        v_hat = state.v[i] / (1 - b2 ** t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def zero_grads(params: list[Tensor]):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# initialization


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-limit, limit, size=shape))


def zeros(shape) -> Tensor:
    return parameter(np.zeros(shape))


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(loss_fn, inputs: list[Tensor], eps: float = 1e-4) -> float:
    """Max relative error between tape gradients and central finite
    differences of `loss_fn(inputs)` over every element of every input.

    Relative error uses a 1e-8 floor on the denominator.
    """
    with Tape() as tape:
        loss = loss_fn(*inputs)
        tape.backward(loss)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    worst = 0.0
    for x, g_ad in zip(inputs, analytic):
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn(*inputs).item()
            flat[i] = orig - eps
            dn = loss_fn(*inputs).item()
            flat[i] = orig
            g_fd = (up - dn) / (2 * eps)
            g_a = g_ad.reshape(-1)[i]
            denom = max(abs(g_a), abs(g_fd), 1e-8)
            worst = max(worst, abs(g_a - g_fd) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoint format: magic "TNSR", u32 version, u32 count; per tensor
# u16 name length, name bytes, u8 rank, u32 dims[rank], f32 payload (C order).

_TNSR_MAGIC = b"TNSR"


def save_tnsr(path, tensors: dict):
    with open(path, "wb") as fh:
        fh.write(_TNSR_MAGIC)
        fh.write(struct.pack("<II", 1, len(tensors)))
        for name, t in tensors.items():
            data = t.data if isinstance(t, Tensor) else np.asarray(t)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f4").tobytes())


def load_tnsr(path) -> dict:
    out = {}
    with open(path, "rb") as fh:
        if fh.read(4) != _TNSR_MAGIC:
            raise ValueError(f"{path}: not a TNSR file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != 1:
            raise ValueError(f"{path}: unsupported TNSR version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(np.float64)
            out[name] = data.reshape(dims)
    return out
