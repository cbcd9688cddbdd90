"""Dense rank-5 float32 tensors with reverse-mode automatic differentiation.

All layer math used by the network lives here: 3-D cross-correlation with
zero padding, instance normalization, ReLU, channel softmax, trilinear
resizing, channel concatenation, elementwise sum and reductions.  Gradients
are recorded on an explicit :class:`Tape` and replayed in exact reverse
order by :func:`backward`.

Numerical conventions, fixed project-wide:

* values and gradients are float32;
* convolution accumulates in float32, summing contributions in
  (in-channel, kd, kh, kw) order per output element, so the result is
  bit-identical to a naive nested-loop evaluation;
* statistics (means, variances, loss reductions) accumulate in float64
  before the single rounding back to float32;
* no threaded kernels are used, so repeated runs are bitwise reproducible.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

_f32 = np.float32


class Tensor:
    """A float32 array plus optional gradient buffer.

    Network feature maps use shape (N, C, D, H, W); scalar losses use
    shape ().  ``grad`` is lazily allocated by :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of differentiable operations.

    Entries are appended in execution order, which is automatically a
    topological order of the compute graph; the backward sweep visits them
    in exact reverse order.  Use as a context manager to activate recording.
    """

    def __init__(self):
        self.entries = []  # (out, inputs, vjp)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


_TAPE_STACK: list[Tape] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(out: Tensor, inputs, vjp) -> Tensor:
    """Attach a tape entry for ``out`` if recording is active.

    ``vjp`` maps the adjoint of ``out`` to a tuple of adjoints aligned with
    ``inputs`` (None for non-differentiable arguments).  Extension modules
    (losses, precision casts) register their primitives through this hook.
    """
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.entries.append((out, tuple(inputs), vjp))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into ``.grad`` of every requires_grad leaf.

    The loss must be a scalar produced under an active-at-the-time tape.
    Calling backward again without clearing gradients adds a second copy.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None:
        raise ShapeError("backward root was not produced under an active tape")
    adjoints = {id(loss): np.ones_like(loss.data)}
    produced = {id(out) for out, _, _ in tape.entries}
    for out, inputs, vjp in reversed(tape.entries):
        g = adjoints.pop(id(out), None)
        if g is None:
            continue
        grads = vjp(g)
        for t, gt in zip(inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            if id(t) in produced:
                key = id(t)
                if key in adjoints:
                    adjoints[key] += gt
                else:
                    # Copy: vjps may alias their outputs (e.g. add returns
                    # the upstream adjoint for both inputs).
                    adjoints[key] = np.array(gt, dtype=np.float32)
            else:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gt


# ---------------------------------------------------------------------------
# convolution


def conv_output_extent(extent, kernel, stride, padding) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3-D cross-correlation with zero padding (no kernel flip).

    ``x``: (N, Cin, D, H, W); ``w``: (Cout, Cin, k, k, k) with odd k;
    optional ``b``: (Cout,), added after the spatial accumulation.
    Output extent per axis is floor((extent + 2p - k)/s) + 1.
    """
    n, cin, d, h, wd_ = x.data.shape
    cout, cin_w, k, k2, k3 = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv3d: input has {cin} channels, weights expect {cin_w}")
    if not (k == k2 == k3):
        raise ShapeError(f"conv3d: kernel must be cubic, got {(k, k2, k3)}")
    if k % 2 != 1:
        raise ShapeError(f"conv3d: kernel size must be odd, got {k}")
    stride = int(stride)
    padding = int(padding)
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv3d: invalid stride/padding ({stride}, {padding})")
    od = conv_output_extent(d, k, stride, padding)
    oh = conv_output_extent(h, k, stride, padding)
    ow = conv_output_extent(wd_, k, stride, padding)
    if od < 1 or oh < 1 or ow < 1:
        raise ShapeError(
            f"conv3d: output extent {(od, oh, ow)} < 1 for input {(d, h, wd_)}, "
            f"k={k}, stride={stride}, padding={padding}"
        )
    if padding:
        xp = np.pad(
            x.data,
            ((0, 0), (0, 0), (padding, padding), (padding, padding), (padding, padding)),
        )
    else:
        xp = x.data

    out = np.zeros((n, cout, od, oh, ow), dtype=_f32)
    wdat = w.data
    tmp = np.empty_like(out)
    # Fixed accumulation order (cin, kd, kh, kw); float32 throughout.  This
    # makes the result bit-identical to a naive per-element loop.
    for ci in range(cin):
        for kd in range(k):
            ds = xp[:, ci, kd : kd + (od - 1) * stride + 1 : stride]
            for kh in range(k):
                hs = ds[:, :, kh : kh + (oh - 1) * stride + 1 : stride]
                for kw in range(k):
                    win = hs[:, :, :, kw : kw + (ow - 1) * stride + 1 : stride]
                    np.multiply(
                        wdat[None, :, ci, kd, kh, kw, None, None, None],
                        win[:, None],
                        out=tmp,
                    )
                    out += tmp
    if b is not None:
        if b.data.shape != (cout,):
            raise ShapeError(f"conv3d: bias shape {b.data.shape} != ({cout},)")
        out += b.data[None, :, None, None, None]

    result = Tensor(out)

    def vjp(g):
        gx = gw = gb = None
        gflat = g.reshape(n, cout, od * oh * ow)
        if w.requires_grad:
            windows = np.lib.stride_tricks.as_strided(
                xp,
                shape=(n, cin, k, k, k, od, oh, ow),
                strides=(
                    xp.strides[0],
                    xp.strides[1],
                    xp.strides[2],
                    xp.strides[3],
                    xp.strides[4],
                    xp.strides[2] * stride,
                    xp.strides[3] * stride,
                    xp.strides[4] * stride,
                ),
            )
            cols = np.ascontiguousarray(windows).reshape(n, cin * k**3, od * oh * ow)
            gw = np.einsum("nop,nkp->ok", gflat, cols, optimize=False).reshape(wdat.shape)
        if x.requires_grad:
            contrib = np.einsum(
                "ok,nop->nkp", wdat.reshape(cout, -1), gflat, optimize=False
            ).reshape(n, cin, k, k, k, od, oh, ow)
            gxp = np.zeros_like(xp)
            for kd in range(k):
                for kh in range(k):
                    for kw in range(k):
                        gxp[
                            :,
                            :,
                            kd : kd + (od - 1) * stride + 1 : stride,
                            kh : kh + (oh - 1) * stride + 1 : stride,
                            kw : kw + (ow - 1) * stride + 1 : stride,
                        ] += contrib[:, :, kd, kh, kw]
            if padding:
                gx = gxp[
                    :, :, padding : padding + d, padding : padding + h, padding : padding + wd_
                ].copy()
            else:
                gx = gxp
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record_op(result, inputs, vjp)


# ---------------------------------------------------------------------------
# normalization and activations


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5) -> Tensor:
    """Per-(sample, channel) normalization over spatial voxels with affine."""
    n, c, d, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"instance_norm: affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match {c} channels"
        )
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=(2, 3, 4), keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=(2, 3, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu) * inv).astype(_f32)
    out = gamma.data[None, :, None, None, None] * xhat + beta.data[None, :, None, None, None]
    result = Tensor(out)
    inv32 = inv.astype(_f32)

    def vjp(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = np.einsum("ncdhw,ncdhw->c", g, xhat, optimize=False)
        if beta.requires_grad:
            gbeta = g.sum(axis=(0, 2, 3, 4))
        if x.requires_grad:
            gxh = g * gamma.data[None, :, None, None, None]
            m1 = gxh.mean(axis=(2, 3, 4), keepdims=True, dtype=np.float64).astype(_f32)
            m2 = (gxh * xhat).mean(axis=(2, 3, 4), keepdims=True, dtype=np.float64).astype(
                _f32
            )
            gx = inv32 * (gxh - m1 - xhat * m2)
        return gx, ggamma, gbeta

    return record_op(result, (x, gamma, beta), vjp)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    out = np.maximum(x.data, 0.0)
    result = Tensor(out)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return record_op(result, (x,), vjp)


def softmax_channels(x: Tensor) -> Tensor:
    """Per-voxel exp-normalization over the channel axis (max-subtracted)."""
    if x.data.shape[1] < 1:
        raise ShapeError("softmax_channels needs at least one channel")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    result = Tensor(p)

    def vjp(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return record_op(result, (x,), vjp)


# ---------------------------------------------------------------------------
# resizing and structural ops


def _axis_resize_plan(in_len, out_len):
    """Linear resize sampling plan (align-corners-false, clamped)."""
    scale = in_len / out_len
    src = (np.arange(out_len, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_len - 1)
    lo = np.floor(src).astype(np.int64)
    lo = np.minimum(lo, in_len - 1)
    hi = np.minimum(lo + 1, in_len - 1)
    frac = (src - lo).astype(_f32)
    return lo, hi, frac


def trilinear_resize(x: Tensor, dims) -> Tensor:
    """Resize spatial dims by separable linear interpolation.

    Uses the align-corners-false convention: source coordinate of output
    index t is (t + 0.5) * in/out - 0.5, clamped to the valid range.
    Axes whose extent already matches are passed through untouched, so
    resizing to the same dims is the identity map.
    """
    dims = tuple(int(t) for t in dims)
    if len(dims) != 3 or any(t < 1 for t in dims):
        raise ShapeError(f"trilinear_resize: bad target dims {dims}")
    data = x.data
    plans = []  # (axis, in_len, lo, hi, frac)
    for axis_off, target in enumerate(dims):
        axis = 2 + axis_off
        in_len = data.shape[axis]
        if in_len == target:
            continue
        lo, hi, frac = _axis_resize_plan(in_len, target)
        moved = np.moveaxis(data, axis, 0)
        wshape = (target,) + (1,) * (moved.ndim - 1)
        fr = frac.reshape(wshape)
        resized = moved[lo] * (1.0 - fr) + moved[hi] * fr
        data = np.moveaxis(resized, 0, axis)
        plans.append((axis, in_len, lo, hi, frac))
    result = Tensor(np.ascontiguousarray(data))

    def vjp(g):
        if not x.requires_grad:
            return (None,)
        for axis, in_len, lo, hi, frac in reversed(plans):
            moved = np.moveaxis(g, axis, 0)
            wshape = (len(lo),) + (1,) * (moved.ndim - 1)
            fr = frac.reshape(wshape)
            acc = np.zeros((in_len,) + moved.shape[1:], dtype=_f32)
            np.add.at(acc, lo, moved * (1.0 - fr))
            np.add.at(acc, hi, moved * fr)
            g = np.moveaxis(acc, 0, axis)
        return (np.ascontiguousarray(g),)

    return record_op(result, (x,), vjp)


def concat_channels(xs) -> Tensor:
    """Concatenate along the channel axis; batch and spatial dims must agree."""
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    ref = xs[0].data.shape
    for t in xs[1:]:
        s = t.data.shape
        if s[0] != ref[0] or s[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: shape {s} incompatible with {ref}")
    out = np.concatenate([t.data for t in xs], axis=1)
    result = Tensor(out)
    sizes = [t.data.shape[1] for t in xs]

    def vjp(g):
        grads = []
        start = 0
        for t, c in zip(xs, sizes):
            grads.append(g[:, start : start + c].copy() if t.requires_grad else None)
            start += c
        return tuple(grads)

    return record_op(result, tuple(xs), vjp)


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum of two equal-shape tensors (residual connection)."""
    if x.data.shape != y.data.shape:
        raise ShapeError(f"add: shape mismatch {x.data.shape} vs {y.data.shape}")
    result = Tensor(x.data + y.data)

    def vjp(g):
        return g, g

    return record_op(result, (x, y), vjp)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor (float64 accumulation)."""
    result = Tensor(np.float32(x.data.sum(dtype=np.float64)))

    def vjp(g):
        return (np.full_like(x.data, float(g)),)

    return record_op(result, (x,), vjp)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar (used for loss scaling)."""
    f = _f32(factor)
    result = Tensor(x.data * f)

    def vjp(g):
        return (g * f,)

    return record_op(result, (x,), vjp)
