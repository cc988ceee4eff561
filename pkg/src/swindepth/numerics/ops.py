"""Differentiable operators.

Every function takes and returns :class:`Tensor` objects; plain numbers and
arrays are promoted as constants.  Each forward computes with numpy and
registers a closure that maps the output cotangent to input cotangents.

Interpolation convention: pixel ``i`` of an axis of length ``n`` covers the
normalized interval ``[i/n, (i+1)/n)`` with its center at ``(i+0.5)/n``
(half-pixel centers, i.e. align-corners false).
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .tensor import ContractError, Tensor, as_tensor, grad_enabled, make_result


def _const(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return as_tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_result(out, (a, b), back, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def pow(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return make_result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def sin(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


def cos(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def elu(a: Tensor) -> Tensor:
    ad = a.data
    pos = ad > 0
    ex = np.exp(np.minimum(ad, 0.0))
    out = np.where(pos, ad, ex - 1.0)
    return make_result(out, (a,), lambda g: (g * np.where(pos, 1.0, ex),), "elu")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via erf."""
    ad = a.data
    cdf = 0.5 * (1.0 + special.erf(ad / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * ad * ad) / math.sqrt(2.0 * math.pi)
    return make_result(ad * cdf, (a,), lambda g: (g * (cdf + ad * pdf),), "gelu")


def minimum(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    take_a = a.data <= b.data
    return make_result(np.where(take_a, a.data, b.data), (a, b),
                       lambda g: (_unbroadcast(g * take_a, a.shape),
                                  _unbroadcast(g * ~take_a, b.shape)), "minimum")


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad >= lo
    if hi is not None:
        inside &= ad <= hi
    return make_result(out, (a,), lambda g: (g * inside,), "clamp")


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant mask."""
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    return make_result(np.where(cond, a.data, b.data), (a, b),
                       lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                                  _unbroadcast(np.where(cond, 0.0, g), b.shape)), "where")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_result(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axes, keepdims), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                       lambda g: (g.transpose(inv),), "transpose")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype
    fancy = _is_fancy(index)

    def back(g):
        z = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(z, index, g)
        else:
            z[index] += g
        return (z,)

    return make_result(np.array(a.data[index], copy=True), (a,), back, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_const(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_const(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    axis = axis % out.ndim

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(out, tensors, back, "stack")


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    back_shifts = tuple(-s for s in shifts)
    return make_result(np.roll(a.data, shifts, axes), (a,),
                       lambda g: (np.roll(g, back_shifts, axes),), "roll")


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``table[index]`` along the first axis."""
    index = np.asarray(index, dtype=np.intp)
    shape, dtype = table.shape, table.dtype

    def back(g):
        z = np.zeros(shape, dtype=dtype)
        np.add.at(z, index, g)
        return (z,)

    return make_result(table.data[index], (table,), back, "take")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ContractError(f"linear expects {weight.shape[1]} input features, got {x.shape[-1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd if x.requires_grad else None
        gw = g2.T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, back, "linear")


def _fold_reflect(gp: np.ndarray, p: int, H: int, W: int) -> np.ndarray:
    """Adjoint of reflection padding by ``p`` on the last two axes."""
    g = gp[..., p:p + H, :].copy()
    for k in range(1, p + 1):
        g[..., k, :] += gp[..., p - k, :]
        g[..., H - 1 - k, :] += gp[..., p + H - 1 + k, :]
    out = g[..., p:p + W].copy()
    for k in range(1, p + 1):
        out[..., k] += g[..., p - k]
        out[..., W - 1 - k] += g[..., p + W - 1 + k]
    return out


_IM2COL_BYTES = 64 * 2 ** 20


def _unpad(gxp: np.ndarray, p: int, pad_mode: str, H: int, W: int) -> np.ndarray:
    if not p:
        return gxp
    if pad_mode == "reflect":
        return _fold_reflect(gxp, p, H, W)
    return gxp[:, :, p:p + H, p:p + W]


def _conv2d_taps(x: Tensor, weight: Tensor, bias: Optional[Tensor], xp: np.ndarray, p: int,
                 pad_mode: str, Ho: int, Wo: int) -> Tensor:
    """Stride-1 convolution as one GEMM of all kernel taps against the padded input.

    Each tap's response is a shifted slice of the product, so the intermediate
    holds kh*kw*cout rows rather than the kh*kw*cin rows of im2col.
    """
    B, cin, H, W = x.shape
    cout, _, kh, kw = weight.shape
    Hp, Wp = xp.shape[2:]
    taps = weight.data.transpose(2, 3, 0, 1).reshape(kh * kw * cout, cin)
    xf = xp.reshape(B, cin, Hp * Wp)
    out = np.zeros((B, cout, Ho, Wo), dtype=x.dtype)
    for b in range(B):
        z = (taps @ xf[b]).reshape(kh, kw, cout, Hp, Wp)
        for i in range(kh):
            for j in range(kw):
                out[b] += z[i, j, :, i:i + Ho, j:j + Wo]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        gw = np.zeros_like(taps) if weight.requires_grad else None
        gxp = np.empty_like(xp) if x.requires_grad else None
        gz = np.zeros((kh, kw, cout, Hp, Wp), dtype=g.dtype)
        for b in range(B):
            for i in range(kh):
                for j in range(kw):
                    gz[i, j, :, i:i + Ho, j:j + Wo] = g[b]
            gzf = gz.reshape(kh * kw * cout, Hp * Wp)
            if gw is not None:
                gw += gzf @ xf[b].T
            if gxp is not None:
                gxp[b] = (taps.T @ gzf).reshape(cin, Hp, Wp)
        grads = [None if gxp is None else _unpad(gxp, p, pad_mode, H, W),
                 None if gw is None else gw.reshape(kh, kw, cout, cin).transpose(2, 3, 0, 1).copy()]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, back, "conv2d")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, pad_mode: str = "zeros") -> Tensor:
    """2-D cross-correlation over NCHW input with an (out, in, kh, kw) kernel.

    ``pad_mode`` is ``"zeros"`` or ``"reflect"`` (edge sample not repeated).
    Computed as im2col + one GEMM per chunk of the batch.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ContractError("conv2d expects 4-D input and weight")
    B, cin, H, W = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ContractError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if pad_mode not in ("zeros", "reflect"):
        raise ContractError(f"unknown pad mode {pad_mode!r}")
    p, s = padding, stride
    if p and pad_mode == "reflect" and (H <= p or W <= p):
        raise ContractError(f"reflection padding {p} needs spatial size > {p}, got {H}x{W}")
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho < 1 or Wo < 1:
        raise ContractError("conv2d output would be empty")
    mode = "constant" if pad_mode == "zeros" else "reflect"
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode=mode) if p else x.data
    if s == 1 and kh * kw > 1 and cout <= cin:
        return _conv2d_taps(x, weight, bias, xp, p, pad_mode, Ho, Wo)
    w2 = weight.data.reshape(cout, cin * kh * kw)
    pointwise = kh == 1 and kw == 1 and s == 1
    K = cin * kh * kw
    chunk = max(1, min(B, _IM2COL_BYTES // max(1, K * Ho * Wo * xp.itemsize)))

    def cols(b0, b1):
        if pointwise:
            return xp[b0:b1].reshape(b1 - b0, cin, Ho * Wo)
        win = np.lib.stride_tricks.sliding_window_view(xp[b0:b1], (kh, kw), axis=(2, 3))
        win = win[:, :, ::s, ::s][:, :, :Ho, :Wo]
        # (b, cin, Ho, Wo, kh, kw) -> (b, cin, kh, kw, Ho, Wo)
        return win.transpose(0, 1, 4, 5, 2, 3).reshape(b1 - b0, K, Ho * Wo)

    out = np.empty((B, cout, Ho * Wo), dtype=x.dtype)
    # a single-chunk im2col is kept for the weight gradient instead of being rebuilt
    keep = chunk >= B and weight.requires_grad and grad_enabled()
    cached = None
    for b0 in range(0, B, chunk):
        b1 = min(B, b0 + chunk)
        c = cols(b0, b1)
        out[b0:b1] = w2 @ c
        if keep:
            cached = c
    out = out.reshape(B, cout, Ho, Wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        g3 = g.reshape(B, cout, Ho * Wo)
        gw = np.zeros_like(w2) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for b0 in range(0, B, chunk):
            b1 = min(B, b0 + chunk)
            gb = g3[b0:b1]
            if gw is not None:
                c = cached if cached is not None else cols(b0, b1)
                gw += np.tensordot(gb, c, axes=([0, 2], [0, 2]))
            if gxp is not None:
                gc = (w2.T @ gb).reshape(b1 - b0, cin, kh, kw, Ho, Wo)
                for i in range(kh):
                    for j in range(kw):
                        gxp[b0:b1, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += gc[:, :, i, j]
        gx = None
        if gxp is not None:
            if not p:
                gx = gxp
            elif pad_mode == "reflect":
                gx = _fold_reflect(gxp, p, H, W)
            else:
                gx = gxp[:, :, p:p + H, p:p + W]
        grads = [gx, None if gw is None else gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, back, "conv2d")


# ---------------------------------------------------------------------------
# normalization and attention primitives


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ContractError(f"layer_norm over {C} channels got gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, gamma, beta), back, "layer_norm")


def softmax_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)
    return make_result(out, (x,),
                       lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),), "softmax")


# ---------------------------------------------------------------------------
# resampling


def separable(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply fixed linear maps along the last two axes: ``rows @ x @ cols.T``."""
    if x.shape[-2] != rows.shape[1] or x.shape[-1] != cols.shape[1]:
        raise ContractError(f"separable maps {rows.shape}/{cols.shape} do not fit {x.shape}")
    rows = rows.astype(x.dtype, copy=False)
    cols = cols.astype(x.dtype, copy=False)
    out = (rows @ x.data) @ cols.T
    return make_result(out, (x,), lambda g: ((rows.T @ g) @ cols,), "separable")


def interp_matrix(n_in: int, n_out: int, edge: str = "extrapolate") -> np.ndarray:
    """Linear interpolation weights from ``n_in`` samples to ``n_out`` samples.

    Half-pixel centers.  With ``edge="extrapolate"`` output centers that fall
    outside the outermost input centers continue the edge segment linearly,
    so affine signals are reproduced exactly; ``edge="clamp"`` holds the edge
    value instead.
    """
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    if edge == "clamp":
        src = np.clip(src, 0.0, n_in - 1)
    elif edge != "extrapolate":
        raise ContractError(f"unknown edge mode {edge!r}")
    i0 = np.clip(np.floor(src), 0, n_in - 2).astype(int)
    f = src - i0
    r = np.arange(n_out)
    m[r, i0] += 1.0 - f
    m[r, i0 + 1] += f
    return m


def pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Adaptive average-pooling weights: output bin i averages [floor(i n/m), ceil((i+1) n/m))."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def box3_reflect_matrix(n: int) -> np.ndarray:
    """3-tap mean filter with reflection padding (edge sample not repeated)."""
    if n < 2:
        raise ContractError("reflection padding needs at least two samples")
    m = np.zeros((n, n))
    for i in range(n):
        for j in (i - 1, i, i + 1):
            if j < 0:
                j = -j
            elif j >= n:
                j = 2 * (n - 1) - j
            m[i, j] += 1.0 / 3.0
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int, edge: str = "extrapolate") -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ContractError("resize target must be at least 1x1")
    H, W = x.shape[-2:]
    if (H, W) == (out_h, out_w):
        return x
    return separable(x, interp_matrix(H, out_h, edge), interp_matrix(W, out_w, edge))


def avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    H, W = x.shape[-2:]
    return separable(x, pool_matrix(H, out_h), pool_matrix(W, out_w))


def grid_sample(image: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of ``image`` (B,C,H,W) at normalized ``grid`` (B,h,w,2) = (x, y).

    Coordinates -1 and +1 are the outer edges of the border pixels.  Samples
    outside the image are clamped to the border.
    """
    B, C, H, W = image.shape
    if grid.ndim != 4 or grid.shape[0] != B or grid.shape[-1] != 2:
        raise ContractError(f"grid of shape {grid.shape} does not match image {image.shape}")
    _, h, w, _ = grid.shape
    P = h * w
    gd = grid.data.reshape(B, P, 2)
    px = ((gd[..., 0] + 1.0) * W - 1.0) * 0.5
    py = ((gd[..., 1] + 1.0) * H - 1.0) * 0.5
    in_x = (px >= 0) & (px <= W - 1)
    in_y = (py >= 0) & (py <= H - 1)
    px = np.clip(px, 0, W - 1)
    py = np.clip(py, 0, H - 1)
    x0 = np.clip(np.floor(px), 0, max(W - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(py), 0, max(H - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (px - x0).astype(image.dtype)
    fy = (py - y0).astype(image.dtype)

    flat = image.data.reshape(B, C, H * W)
    bi = np.arange(B)[:, None, None]
    ci = np.arange(C)[None, :, None]
    idx = (y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1)
    v00, v01, v10, v11 = (flat[bi, ci, k[:, None, :]] for k in idx)
    wts = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    out = (v00 * wts[0][:, None] + v01 * wts[1][:, None]
           + v10 * wts[2][:, None] + v11 * wts[3][:, None])

    def back(g):
        g3 = g.reshape(B, C, P)
        gimg = None
        if image.requires_grad:
            base = (np.arange(B)[:, None, None] * C + np.arange(C)[None, :, None]) * (H * W)
            lin = np.concatenate([(base + k[:, None, :]).ravel() for k in idx])
            vals = np.concatenate([(g3 * wk[:, None]).ravel() for wk in wts])
            gimg = np.bincount(lin, weights=vals, minlength=B * C * H * W)
            gimg = gimg.astype(image.dtype).reshape(B, C, H, W)
        ggrid = None
        if grid.requires_grad:
            dx = ((1 - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10))
            dy = ((1 - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01))
            gx = (g3 * dx).sum(axis=1) * in_x * (W * 0.5)
            gy = (g3 * dy).sum(axis=1) * in_y * (H * 0.5)
            ggrid = np.stack([gx, gy], axis=-1).reshape(B, h, w, 2).astype(grid.dtype)
        return gimg, ggrid

    return make_result(out.reshape(B, C, h, w), (image, grid), back, "grid_sample")
