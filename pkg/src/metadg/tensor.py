"""Tape-based reverse-mode autodiff with gradients of gradients.

Every operator's vector-Jacobian product is itself written with taped
operators, so when ``backward_grad(..., create_graph=True)`` runs, the
returned gradients are ordinary tape nodes and can be differentiated again.
With ``create_graph=False`` the same code runs with recording paused and
only numpy values are produced.

A :class:`Tape` and the tensors on it belong to one thread.
"""

from collections import OrderedDict

import numpy as np

from . import kernels

__all__ = [
    "Tensor", "Tape", "ParamSet", "ShapeError", "TapeError", "apply", "constant",
    "backward_grad", "finite_diff_grad", "OPS",
]


class ShapeError(ValueError):
    """Operator inputs have incompatible shapes."""

    def __init__(self, op, detail):
        super().__init__(f"{op}: {detail}")
        self.op = op
        self.detail = detail


class TapeError(RuntimeError):
    pass


class Tensor:
    """An n-d float64 array, optionally bound to a node of a :class:`Tape`.

    Tensors with ``tape is None`` are constants.
    """

    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 100

    def __init__(self, data, tape=None, node_id=None):
        self.data = data
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        where = "const" if self.tape is None else f"node={self.node_id}"
        return f"Tensor(shape={self.data.shape}, {where})"

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return affine(self, 1.0, other)
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return affine(self, 1.0, -other)
        return sub(self, other)

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return affine(self, -1.0, other)
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return affine(self, other, 0.0)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return affine(self, 1.0 / other, 0.0)
        return div(self, other)

    def __neg__(self):
        return affine(self, -1.0, 0.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value):
    return Tensor(np.asarray(value, dtype=np.float64))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else constant(x)


class _Node:
    __slots__ = ("op", "in_data", "in_ids", "attrs", "saved", "out")

    def __init__(self, op, in_data, in_ids, attrs, saved, out):
        self.op = op
        self.in_data = in_data
        self.in_ids = in_ids
        self.attrs = attrs
        self.saved = saved
        self.out = out


class Tape:
    """Append-only record of operations; node ids are positions in ``nodes``."""

    def __init__(self):
        self.nodes = []
        self.recording = True

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value):
        data = np.array(value, dtype=np.float64)
        data.flags.writeable = False
        self.nodes.append(_Node(None, (), (), None, None, data))
        return Tensor(data, self, len(self.nodes) - 1)

    def tensor(self, node_id):
        return Tensor(self.nodes[node_id].out, self, node_id)

    def replay(self, leaf_values=None):
        """Recompute every node from its recorded inputs.

        ``leaf_values`` maps leaf node ids to replacement arrays; returns the
        list of recomputed outputs (used to check that the tape is a pure
        function of its leaves).
        """
        vals = []
        for i, node in enumerate(self.nodes):
            if node.op is None:
                v = node.out if leaf_values is None or i not in leaf_values else np.asarray(leaf_values[i], float)
            else:
                datas = tuple(node.in_data[k] if j is None else vals[j] for k, j in enumerate(node.in_ids))
                v, _ = node.op.forward(datas, node.attrs)
            vals.append(v)
        return vals


class Op:
    """Operator: ``forward`` on ndarrays, ``vjp`` on Tensors (differentiable)."""

    name = "op"
    arity = None

    @staticmethod
    def forward(xs, attrs):
        raise NotImplementedError

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        raise NotImplementedError

    # optional ndarray-only adjoint with the same signature as ``vjp``
    vjp_np = None


def apply(op, inputs, **attrs):
    """Evaluate ``op`` on ``inputs`` and record it on their tape."""
    if isinstance(op, str):
        try:
            op = OPS[op]
        except KeyError:
            raise ValueError(f"unknown op kind {op!r}") from None
    tape = None
    for t in inputs:
        tt = t.tape
        if tt is not None and tt.recording:
            if tape is None:
                tape = tt
            elif tt is not tape:
                raise TapeError(f"{op.name}: inputs live on different tapes")
    datas = tuple(t.data for t in inputs)
    out, saved = op.forward(datas, attrs)
    if type(out) is not np.ndarray:
        out = np.asarray(out, dtype=np.float64)
    if tape is None:
        return Tensor(out)
    ids = tuple(t.node_id if t.tape is tape else None for t in inputs)
    out.flags.writeable = False
    tape.nodes.append(_Node(op, datas, ids, attrs, saved, out))
    return Tensor(out, tape, len(tape.nodes) - 1)


# ---------------------------------------------------------------------------
# operators


def _check_broadcast(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, f"cannot broadcast {a.shape} with {b.shape}") from None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return sum_to(g, shape)


class Add(Op):
    name = "add"

    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        if a.shape != b.shape:
            _check_broadcast("add", a, b)
        return a + b, None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        a, b = ins
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)


class Sub(Op):
    name = "sub"

    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        if a.shape != b.shape:
            _check_broadcast("sub", a, b)
        return a - b, None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        a, b = ins
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)


class Mul(Op):
    name = "mul"

    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        if a.shape != b.shape:
            _check_broadcast("mul", a, b)
        return a * b, None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        a, b = ins
        return (_unbroadcast(mul(g, b), a.shape) if needs[0] else None,
                _unbroadcast(mul(g, a), b.shape) if needs[1] else None)


class Div(Op):
    name = "div"

    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        if a.shape != b.shape:
            _check_broadcast("div", a, b)
        return a / b, None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        a, b = ins
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(div(g, b), a.shape)
        if needs[1]:
            gb = _unbroadcast(-div(mul(g, a), mul(b, b)), b.shape)
        return ga, gb


class Affine(Op):
    """``scale * x + shift`` with python-float scale and shift."""

    name = "affine"

    @staticmethod
    def forward(xs, attrs):
        x, = xs
        s, c = attrs["scale"], attrs["shift"]
        if c == 0.0:
            return x * s, None
        return x * s + c, None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        return (affine(g, attrs["scale"], 0.0),)


class MatMul(Op):
    name = "matmul"

    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")
        return a @ b, None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        a, b = ins
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)


class Transpose(Op):
    name = "transpose"

    @staticmethod
    def forward(xs, attrs):
        x, = xs
        if x.ndim != 2:
            raise ShapeError("transpose", f"expected a matrix, got shape {x.shape}")
        return np.ascontiguousarray(x.T), None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        return (transpose(g),)


class Reshape(Op):
    name = "reshape"

    @staticmethod
    def forward(xs, attrs):
        x, = xs
        try:
            return x.reshape(attrs["shape"]), None
        except ValueError:
            raise ShapeError("reshape", f"cannot reshape {x.shape} to {attrs['shape']}") from None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        return (reshape(g, ins[0].shape),)


class Sum(Op):
    """Sum over ``axes`` times ``factor`` (factor 1/count gives a mean)."""

    name = "sum"

    @staticmethod
    def forward(xs, attrs):
        x, = xs
        axes = attrs["axes"]
        if axes is not None:
            for ax in axes:
                if not -x.ndim <= ax < x.ndim:
                    raise ShapeError("sum", f"axis {ax} out of range for shape {x.shape}")
        out = x.sum(axis=axes, keepdims=attrs["keepdims"])
        f = attrs["factor"]
        if f != 1.0:
            out = out * f
        return np.asarray(out, dtype=np.float64), None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        shape = ins[0].shape
        axes = attrs["axes"]
        if not attrs["keepdims"]:
            if axes is None:
                kshape = (1,) * len(shape)
            else:
                norm = {a % len(shape) for a in axes}
                kshape = tuple(1 if i in norm else n for i, n in enumerate(shape))
            g = reshape(g, kshape)
        f = attrs["factor"]
        if f != 1.0:
            g = affine(g, f, 0.0)
        return (broadcast_to(g, shape),)


class BroadcastTo(Op):
    name = "broadcast_to"

    @staticmethod
    def forward(xs, attrs):
        x, = xs
        try:
            return np.ascontiguousarray(np.broadcast_to(x, attrs["shape"])), None
        except ValueError:
            raise ShapeError("broadcast_to", f"cannot broadcast {x.shape} to {attrs['shape']}") from None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        return (sum_to(g, ins[0].shape),)


class SumTo(Op):
    """Reduce a broadcast result back to ``shape`` (adjoint of broadcast_to)."""

    name = "sum_to"

    @staticmethod
    def forward(xs, attrs):
        x, = xs
        shape = tuple(attrs["shape"])
        lead = x.ndim - len(shape)
        if lead < 0:
            raise ShapeError("sum_to", f"cannot reduce {x.shape} to {shape}")
        axes = list(range(lead))
        for i, n in enumerate(shape):
            if n == 1 and x.shape[lead + i] != 1:
                axes.append(lead + i)
            elif n != x.shape[lead + i]:
                raise ShapeError("sum_to", f"cannot reduce {x.shape} to {shape}")
        out = x.sum(axis=tuple(axes), keepdims=True) if axes else x
        return out.reshape(shape), None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        return (broadcast_to(g, ins[0].shape),)


class Relu(Op):
    name = "relu"

    @staticmethod
    def forward(xs, attrs):
        x, = xs
        mask = x > 0
        return x * mask, mask

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        return (mask_mul(g, saved),)


class Clamp(Op):
    name = "clamp"

    @staticmethod
    def forward(xs, attrs):
        x, = xs
        lo, hi = attrs["lo"], attrs["hi"]
        mask = (x >= lo) & (x <= hi)
        return np.clip(x, lo, hi), mask

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        return (mask_mul(g, saved),)


class MaskMul(Op):
    """Multiply by a constant 0/1 mask (the mask is not differentiated)."""

    name = "mask_mul"

    @staticmethod
    def forward(xs, attrs):
        x, = xs
        return x * attrs["mask"], None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        return (mask_mul(g, attrs["mask"]),)


class Sigmoid(Op):
    name = "sigmoid"

    @staticmethod
    def forward(xs, attrs):
        x, = xs
        # split by sign so exp never overflows
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)), None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        return (mul(g, mul(out, affine(out, -1.0, 1.0))),)


class Log(Op):
    name = "log"

    @staticmethod
    def forward(xs, attrs):
        x, = xs
        if np.any(x <= 0):
            raise ValueError("log: input has non-positive entries (clamp probabilities first)")
        return np.log(x), None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        return (div(g, ins[0]),)


class Square(Op):
    name = "square"

    @staticmethod
    def forward(xs, attrs):
        x, = xs
        return x * x, None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        return (mul(g, affine(ins[0], 2.0, 0.0)),)


class Power(Op):
    name = "power"

    @staticmethod
    def forward(xs, attrs):
        x, = xs
        return np.power(x, attrs["p"]), None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        p = attrs["p"]
        return (mul(g, affine(power(ins[0], p - 1.0), p, 0.0)),)


def _check_conv(x, w, stride):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", f"input has {x.shape[1]} channels but kernel expects {w.shape[1]}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError("conv2d", f"kernel must be square, got {w.shape[2]}x{w.shape[3]}")
    if stride not in (1, 2):
        raise ShapeError("conv2d", f"stride must be 1 or 2, got {stride}")


class Conv2d(Op):
    """Cross-correlation, NCHW input, OIkk kernel, zero padding ``pad``."""

    name = "conv2d"

    @staticmethod
    def forward(xs, attrs):
        x, w = xs
        _check_conv(x, w, attrs["stride"])
        return kernels.conv2d_forward(x, w, attrs["stride"], attrs["pad"]), None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        x, w = ins
        s, p = attrs["stride"], attrs["pad"]
        gx = apply(CONV_IN, (g, w), stride=s, pad=p, x_shape=x.shape) if needs[0] else None
        gw = apply(CONV_W, (x, g), stride=s, pad=p, w_shape=w.shape) if needs[1] else None
        return gx, gw


class Conv2dInputGrad(Op):
    """Adjoint of conv2d in its input argument; bilinear in (g, w)."""

    name = "conv2d_input_grad"

    @staticmethod
    def forward(xs, attrs):
        g, w = xs
        return kernels.conv2d_backward_input(g, w, attrs["x_shape"], attrs["stride"], attrs["pad"]), None

    @staticmethod
    def vjp(h, ins, out, attrs, saved, needs):
        g, w = ins
        s, p = attrs["stride"], attrs["pad"]
        gg = apply(CONV, (h, w), stride=s, pad=p) if needs[0] else None
        gw = apply(CONV_W, (h, g), stride=s, pad=p, w_shape=w.shape) if needs[1] else None
        return gg, gw


class Conv2dWeightGrad(Op):
    """Adjoint of conv2d in its kernel argument; bilinear in (x, g)."""

    name = "conv2d_weight_grad"

    @staticmethod
    def forward(xs, attrs):
        x, g = xs
        return kernels.conv2d_backward_weight(x, g, attrs["w_shape"], attrs["stride"], attrs["pad"]), None

    @staticmethod
    def vjp(h, ins, out, attrs, saved, needs):
        x, g = ins
        s, p = attrs["stride"], attrs["pad"]
        gx = apply(CONV_IN, (g, h), stride=s, pad=p, x_shape=x.shape) if needs[0] else None
        gg = apply(CONV, (x, h), stride=s, pad=p) if needs[1] else None
        return gx, gg


class MaxPool2(Op):
    name = "maxpool2"

    @staticmethod
    def forward(xs, attrs):
        x, = xs
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError("maxpool2", f"expected NCHW with even H and W, got {x.shape}")
        return kernels.maxpool2_forward(x)

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        return (apply(POOL_SCATTER, (g,), idx=saved, in_shape=ins[0].shape),)


class PoolScatter(Op):
    name = "pool_scatter"

    @staticmethod
    def forward(xs, attrs):
        g, = xs
        return kernels.pool_scatter(g, attrs["idx"], attrs["in_shape"]), None

    @staticmethod
    def vjp(h, ins, out, attrs, saved, needs):
        return (apply(POOL_GATHER, (h,), idx=attrs["idx"]),)


class PoolGather(Op):
    name = "pool_gather"

    @staticmethod
    def forward(xs, attrs):
        x, = xs
        return kernels.pool_gather(x, attrs["idx"]), None

    @staticmethod
    def vjp(h, ins, out, attrs, saved, needs):
        return (apply(POOL_SCATTER, (h,), idx=attrs["idx"], in_shape=ins[0].shape),)


class Concat(Op):
    name = "concat"
    arity = -1

    @staticmethod
    def forward(xs, attrs):
        axis = attrs["axis"]
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis):
                raise ShapeError("concat", f"shapes {ref} and {x.shape} differ off axis {axis}")
        return np.concatenate(xs, axis=axis), None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        axis = attrs["axis"]
        grads = []
        lo = 0
        for x, need in zip(ins, needs):
            hi = lo + x.shape[axis]
            grads.append(apply(SLICE, (g,), axis=axis, lo=lo, hi=hi) if need else None)
            lo = hi
        return tuple(grads)


class Slice(Op):
    name = "slice"

    @staticmethod
    def forward(xs, attrs):
        x, = xs
        idx = [slice(None)] * x.ndim
        idx[attrs["axis"]] = slice(attrs["lo"], attrs["hi"])
        return np.ascontiguousarray(x[tuple(idx)]), None

    @staticmethod
    def vjp(g, ins, out, attrs, saved, needs):
        return (apply(EMBED, (g,), axis=attrs["axis"], lo=attrs["lo"], shape=ins[0].shape),)


class Embed(Op):
    """Place ``x`` into a zero tensor of ``shape`` at offset ``lo`` on ``axis``."""

    name = "embed"

    @staticmethod
    def forward(xs, attrs):
        x, = xs
        out = np.zeros(attrs["shape"])
        idx = [slice(None)] * x.ndim
        axis, lo = attrs["axis"], attrs["lo"]
        idx[axis] = slice(lo, lo + x.shape[axis])
        out[tuple(idx)] = x
        return out, None

    @staticmethod
    def vjp(h, ins, out, attrs, saved, needs):
        axis, lo = attrs["axis"], attrs["lo"]
        return (apply(SLICE, (h,), axis=axis, lo=lo, hi=lo + ins[0].shape[axis]),)


class FusedOp(Op):
    """Operator with a fast numpy VJP and a recorded VJP built from primitives.

    Outside ``create_graph`` mode ``fast_vjp`` runs on raw arrays. When the
    backward pass is being recorded, ``taped_vjp`` expresses the same
    formula with taped operators so it can be differentiated again.
    """

    @staticmethod
    def fast_vjp(g, in_data, out, attrs, saved, needs):
        raise NotImplementedError

    @staticmethod
    def taped_vjp(g, ins, attrs, needs):
        raise NotImplementedError

    @classmethod
    def vjp(cls, g, ins, out, attrs, saved, needs):
        tape = g.tape if g.tape is not None else next((t.tape for t in ins if t.tape is not None), None)
        if tape is not None and tape.recording:
            return cls.taped_vjp(g, ins, attrs, needs)
        grads = cls.fast_vjp(g.data, tuple(t.data for t in ins), out.data, attrs, saved, needs)
        return tuple(None if d is None else Tensor(d) for d in grads)


def _std_axes(x):
    return (0, 2, 3) if x.ndim == 4 else (0,)


class Standardize(FusedOp):
    """Per-batch channel standardization with learnable scale and shift."""

    name = "standardize"

    @staticmethod
    def forward(xs, attrs):
        x, scale, shift = xs
        if x.ndim not in (2, 4):
            raise ShapeError("standardize", f"expected NC or NCHW input, got {x.shape}")
        C = x.shape[1]
        if scale.shape != (C,) or shift.shape != (C,):
            raise ShapeError("standardize", f"scale/shift must have shape ({C},), got {scale.shape}, {shift.shape}")
        out, xhat, inv = kernels.standardize_forward(x, scale, shift, attrs["eps"])
        return out, (xhat, inv)

    @staticmethod
    def taped_vjp(g, ins, attrs, needs):
        x, scale, shift = ins
        axes = _std_axes(x.data)
        C = x.shape[1]
        bshape = (1, C, 1, 1) if x.ndim == 4 else (1, C)
        xc = sub(x, mean(x, axes=axes, keepdims=True))
        inv = power(affine(mean(square(xc), axes=axes, keepdims=True), 1.0, attrs["eps"]), -0.5)
        xhat = mul(xc, inv)
        gx = gs = gb = None
        if needs[0]:
            inner = sub(sub(g, mean(g, axes=axes, keepdims=True)),
                        mul(xhat, mean(mul(g, xhat), axes=axes, keepdims=True)))
            gx = mul(mul(reshape(scale, bshape), inv), inner)
        if needs[1]:
            gs = reduce_sum(mul(g, xhat), axes=axes)
        if needs[2]:
            gb = reduce_sum(g, axes=axes)
        return gx, gs, gb

    @staticmethod
    def fast_vjp(g, in_data, out, attrs, saved, needs):
        xhat, inv = saved
        return kernels.standardize_backward(g, xhat, inv, in_data[1])


class BinaryCrossEntropy(FusedOp):
    """Mean of -[y log p + (1 - y) log(1 - p)] with p clamped to [eps, 1 - eps]."""

    name = "bce"

    @staticmethod
    def forward(xs, attrs):
        p, = xs
        y = attrs["y"]
        if p.shape != y.shape:
            raise ShapeError("bce", f"probabilities {p.shape} vs labels {y.shape}")
        eps = attrs["eps"]
        mask = (p >= eps) & (p <= 1.0 - eps)
        pc = np.clip(p, eps, 1.0 - eps)
        val = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
        return np.asarray(val), (pc, mask)

    @staticmethod
    def taped_vjp(g, ins, attrs, needs):
        p, = ins
        y, eps = attrs["y"], attrs["eps"]
        pc = clamp(p, eps, 1.0 - eps)
        # d/dp = (p - y) / (p (1 - p)) / n on the unclamped region
        num = sub(pc, Tensor(y))
        den = mul(pc, affine(pc, -1.0, 1.0))
        d = mask_mul(div(num, den), ((p.data >= eps) & (p.data <= 1.0 - eps)) / y.size)
        return (mul(g, d),)

    @staticmethod
    def fast_vjp(g, in_data, out, attrs, saved, needs):
        pc, mask = saved
        y = attrs["y"]
        d = (-(y / pc) + (1.0 - y) / (1.0 - pc)) * mask / y.size
        return (g * d,)


# ---------------------------------------------------------------------------
# numpy adjoints used by first-order backward passes (nothing is recorded)


def _np_sum_to(g, shape):
    if g.shape == shape:
        return g
    return SumTo.forward((g,), {"shape": shape})[0]


def _np_sum_vjp(g, xd, out, attrs, saved, needs):
    shape = xd[0].shape
    axes = attrs["axes"]
    if not attrs["keepdims"]:
        if axes is None:
            kshape = (1,) * len(shape)
        else:
            norm = {a % len(shape) for a in axes}
            kshape = tuple(1 if i in norm else n for i, n in enumerate(shape))
        g = g.reshape(kshape)
    f = attrs["factor"]
    if f != 1.0:
        g = g * f
    return (np.ascontiguousarray(np.broadcast_to(g, shape)),)


def _np_div_vjp(g, xd, out, attrs, saved, needs):
    a, b = xd
    ga = _np_sum_to(g / b, a.shape) if needs[0] else None
    gb = _np_sum_to(-g * a / (b * b), b.shape) if needs[1] else None
    return ga, gb


def _np_concat_vjp(g, xd, out, attrs, saved, needs):
    axis = attrs["axis"]
    grads, lo = [], 0
    for x, need in zip(xd, needs):
        hi = lo + x.shape[axis]
        grads.append(Slice.forward((g,), {"axis": axis, "lo": lo, "hi": hi})[0] if need else None)
        lo = hi
    return tuple(grads)


def _np_conv_vjp(g, xd, out, a, saved, needs):
    x, w = xd
    s, p = a["stride"], a["pad"]
    return (kernels.conv2d_backward_input(g, w, x.shape, s, p) if needs[0] else None,
            kernels.conv2d_backward_weight(x, g, w.shape, s, p) if needs[1] else None)


def _np_conv_in_vjp(h, xd, out, a, saved, needs):
    g, w = xd
    s, p = a["stride"], a["pad"]
    return (kernels.conv2d_forward(h, w, s, p) if needs[0] else None,
            kernels.conv2d_backward_weight(h, g, w.shape, s, p) if needs[1] else None)


def _np_conv_w_vjp(h, xd, out, a, saved, needs):
    x, g = xd
    s, p = a["stride"], a["pad"]
    return (kernels.conv2d_backward_input(g, h, x.shape, s, p) if needs[0] else None,
            kernels.conv2d_forward(x, h, s, p) if needs[1] else None)


_NP_VJPS = {
    Add: lambda g, xd, o, a, s, n: (_np_sum_to(g, xd[0].shape) if n[0] else None,
                                    _np_sum_to(g, xd[1].shape) if n[1] else None),
    Sub: lambda g, xd, o, a, s, n: (_np_sum_to(g, xd[0].shape) if n[0] else None,
                                    _np_sum_to(-g, xd[1].shape) if n[1] else None),
    Mul: lambda g, xd, o, a, s, n: (_np_sum_to(g * xd[1], xd[0].shape) if n[0] else None,
                                    _np_sum_to(g * xd[0], xd[1].shape) if n[1] else None),
    Div: _np_div_vjp,
    Affine: lambda g, xd, o, a, s, n: (g * a["scale"],),
    MatMul: lambda g, xd, o, a, s, n: (g @ xd[1].T if n[0] else None, xd[0].T @ g if n[1] else None),
    Transpose: lambda g, xd, o, a, s, n: (np.ascontiguousarray(g.T),),
    Reshape: lambda g, xd, o, a, s, n: (g.reshape(xd[0].shape),),
    Sum: _np_sum_vjp,
    BroadcastTo: lambda g, xd, o, a, s, n: (_np_sum_to(g, xd[0].shape),),
    SumTo: lambda g, xd, o, a, s, n: (np.ascontiguousarray(np.broadcast_to(g, xd[0].shape)),),
    Relu: lambda g, xd, o, a, s, n: (g * s,),
    Clamp: lambda g, xd, o, a, s, n: (g * s,),
    MaskMul: lambda g, xd, o, a, s, n: (g * a["mask"],),
    Sigmoid: lambda g, xd, o, a, s, n: (g * (o * (1.0 - o)),),
    Log: lambda g, xd, o, a, s, n: (g / xd[0],),
    Square: lambda g, xd, o, a, s, n: (g * (2.0 * xd[0]),),
    Power: lambda g, xd, o, a, s, n: (g * (a["p"] * np.power(xd[0], a["p"] - 1.0)),),
    Conv2d: _np_conv_vjp,
    Conv2dInputGrad: _np_conv_in_vjp,
    Conv2dWeightGrad: _np_conv_w_vjp,
    MaxPool2: lambda g, xd, o, a, s, n: (kernels.pool_scatter(g, s, xd[0].shape),),
    PoolScatter: lambda h, xd, o, a, s, n: (kernels.pool_gather(h, a["idx"]),),
    PoolGather: lambda h, xd, o, a, s, n: (kernels.pool_scatter(h, a["idx"], xd[0].shape),),
    Concat: _np_concat_vjp,
    Slice: lambda g, xd, o, a, s, n: (Embed.forward((g,), {"axis": a["axis"], "lo": a["lo"],
                                                          "shape": xd[0].shape})[0],),
    Embed: lambda h, xd, o, a, s, n: (Slice.forward((h,), {"axis": a["axis"], "lo": a["lo"],
                                                          "hi": a["lo"] + xd[0].shape[a["axis"]]})[0],),
    Standardize: Standardize.fast_vjp,
    BinaryCrossEntropy: BinaryCrossEntropy.fast_vjp,
}
for _cls, _fn in _NP_VJPS.items():
    _cls.vjp_np = staticmethod(_fn)


OPS = {cls.name: cls for cls in (
    Add, Sub, Mul, Div, Affine, MatMul, Transpose, Reshape, Sum, BroadcastTo, SumTo,
    Relu, Clamp, MaskMul, Sigmoid, Log, Square, Power, Conv2d, Conv2dInputGrad,
    Conv2dWeightGrad, MaxPool2, PoolScatter, PoolGather, Concat, Slice, Embed,
    Standardize, BinaryCrossEntropy,
)}
CONV, CONV_IN, CONV_W = Conv2d, Conv2dInputGrad, Conv2dWeightGrad
POOL_SCATTER, POOL_GATHER = PoolScatter, PoolGather
SLICE, EMBED = Slice, Embed


# ---------------------------------------------------------------------------
# functional front end


def add(a, b):
    return apply(Add, (a, b))


def sub(a, b):
    return apply(Sub, (a, b))


def mul(a, b):
    return apply(Mul, (a, b))


def div(a, b):
    return apply(Div, (a, b))


def affine(x, scale, shift=0.0):
    return apply(Affine, (x,), scale=float(scale), shift=float(shift))


def scalar_mul(x, c):
    return affine(x, c, 0.0)


def matmul(a, b):
    return apply(MatMul, (a, b))


def transpose(x):
    return apply(Transpose, (x,))


def reshape(x, shape):
    return apply(Reshape, (x,), shape=tuple(shape))


def broadcast_to(x, shape):
    return apply(BroadcastTo, (x,), shape=tuple(shape))


def sum_to(x, shape):
    return apply(SumTo, (x,), shape=tuple(shape))


def _norm_axes(axes):
    if axes is None:
        return None
    if isinstance(axes, int):
        return (axes,)
    return tuple(axes)


def reduce_sum(x, axes=None, keepdims=False):
    return apply(Sum, (x,), axes=_norm_axes(axes), keepdims=keepdims, factor=1.0)


def mean(x, axes=None, keepdims=False):
    axes = _norm_axes(axes)
    if axes is None:
        count = x.size
    else:
        count = int(np.prod([x.shape[a] for a in axes]))
    return apply(Sum, (x,), axes=axes, keepdims=keepdims, factor=1.0 / count)


def relu(x):
    return apply(Relu, (x,))


def clamp(x, lo, hi):
    return apply(Clamp, (x,), lo=float(lo), hi=float(hi))


def mask_mul(x, mask):
    return apply(MaskMul, (x,), mask=mask)


def sigmoid(x):
    return apply(Sigmoid, (x,))


def log(x):
    return apply(Log, (x,))


def square(x):
    return apply(Square, (x,))


def power(x, p):
    return apply(Power, (x,), p=float(p))


def conv2d(x, w, stride=1, pad=None):
    """3x3 (or kxk) convolution with "same" zero padding by default."""
    if pad is None:
        pad = w.shape[2] // 2
    return apply(Conv2d, (x, w), stride=int(stride), pad=int(pad))


def maxpool2(x):
    return apply(MaxPool2, (x,))


def concat(xs, axis=1):
    return apply(Concat, tuple(xs), axis=axis)


def global_avg_pool(x):
    """NCHW -> NC mean over the spatial axes."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", f"expected NCHW, got {x.shape}")
    return mean(x, axes=(2, 3))


def standardize(x, scale, shift, eps=1e-5):
    """Per-batch channel standardization with learnable affine (NCHW or NC)."""
    return apply(Standardize, (x, scale, shift), eps=float(eps))


def binary_cross_entropy(prob, y, eps=1e-12):
    """Mean BCE of probabilities (clamped to [eps, 1 - eps]) against 0/1 labels."""
    return apply(BinaryCrossEntropy, (prob,), y=np.asarray(y, dtype=np.float64), eps=float(eps))


# ---------------------------------------------------------------------------
# parameter collections


class ParamSet:
    """Immutable name -> Tensor mapping iterated in lexicographic name order."""

    __slots__ = ("_entries",)

    def __init__(self, entries=None):
        items = dict(entries or {})
        self._entries = OrderedDict((k, items[k]) for k in sorted(items))

    @classmethod
    def from_arrays(cls, arrays):
        return cls({k: Tensor(np.array(v, dtype=np.float64)) for k, v in arrays.items()})

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def keys(self):
        return list(self._entries.keys())

    def values(self):
        return list(self._entries.values())

    def items(self):
        return list(self._entries.items())

    def __repr__(self):
        return f"ParamSet({', '.join(f'{k}{tuple(v.shape)}' for k, v in self._entries.items())})"

    def arrays(self):
        return OrderedDict((k, v.data) for k, v in self._entries.items())

    def attach(self, tape):
        """Copy every entry onto ``tape`` as a fresh leaf."""
        return ParamSet({k: tape.leaf(v.data) for k, v in self._entries.items()})

    def detach(self):
        return ParamSet({k: Tensor(v.data) for k, v in self._entries.items()})

    def subset(self, prefix):
        return ParamSet({k: v for k, v in self._entries.items() if k.startswith(prefix)})

    def merge(self, *others):
        out = dict(self._entries)
        for o in others:
            for k, v in o.items():
                if k in out:
                    raise KeyError(f"duplicate parameter name {k!r}")
                out[k] = v
        return ParamSet(out)

    def map(self, fn):
        return ParamSet({k: fn(v) for k, v in self._entries.items()})

    def num_values(self):
        return int(np.sum([v.size for v in self._entries.values()]))

    def flat(self):
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([v.data.ravel() for v in self._entries.values()])

    def allclose(self, other, rtol=0.0, atol=0.0):
        if self.keys() != other.keys():
            return False
        return all(np.allclose(self[k].data, other[k].data, rtol=rtol, atol=atol) for k in self)

    def equal(self, other):
        if self.keys() != other.keys():
            return False
        return all(np.array_equal(self[k].data, other[k].data) for k in self)


# ---------------------------------------------------------------------------
# differentiation


def backward_grad(loss, wrt, create_graph=False):
    """Gradients of scalar ``loss`` with respect to every tensor in ``wrt``.

    Entries of ``wrt`` that do not influence ``loss`` receive exact zeros.
    With ``create_graph`` the results are tape nodes and can be
    differentiated again.
    """
    if loss.size != 1:
        raise ValueError(f"backward_grad: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    names = list(wrt)
    for k in names:
        t = wrt[k]
        if t.tape is None or (tape is not None and t.tape is not tape):
            raise TapeError(f"backward_grad: {k!r} is not on the loss's tape")
    if tape is None:
        return ParamSet({k: Tensor(np.zeros_like(wrt[k].data)) for k in names})

    nodes = tape.nodes
    end = loss.node_id
    targets = {}
    for k in names:
        targets.setdefault(wrt[k].node_id, []).append(k)
    start = min(targets)

    # nodes in [start, end] that depend on some target
    live = {i for i in targets if i <= end}
    for i in range(start, end + 1):
        if i in live:
            continue
        for j in nodes[i].in_ids:
            if j is not None and j in live:
                live.add(i)
                break

    result = {}
    grads = {}
    fast = not create_graph
    if end in live:
        one = np.ones_like(nodes[end].out)
        grads[end] = one if fast else Tensor(one)
    prev_recording = tape.recording
    tape.recording = bool(create_graph)
    try:
        for i in range(end, start - 1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            if i in targets:
                result[i] = g
                if i == start:
                    break
            node = nodes[i]
            if node.op is None:
                continue
            needs = tuple(j is not None and j in live for j in node.in_ids)
            if not any(needs):
                continue
            if fast and node.op.vjp_np is not None:
                in_grads = node.op.vjp_np(g, node.in_data, node.out, node.attrs, node.saved, needs)
            else:
                ins = tuple(Tensor(d, tape, j) if j is not None else Tensor(d)
                            for d, j in zip(node.in_data, node.in_ids))
                out = Tensor(node.out, tape, i)
                gt = g if isinstance(g, Tensor) else Tensor(g)
                in_grads = node.op.vjp(gt, ins, out, node.attrs, node.saved, needs)
                if fast:
                    in_grads = tuple(None if t is None else t.data for t in in_grads)
            for j, need, gj in zip(node.in_ids, needs, in_grads):
                if not need or gj is None:
                    continue
                prev = grads.get(j)
                if prev is None:
                    grads[j] = gj
                else:
                    grads[j] = prev + gj if fast else add(prev, gj)
    finally:
        tape.recording = prev_recording

    out = {}
    for nid, ks in targets.items():
        g = result.get(nid)
        for k in ks:
            if g is None:
                out[k] = Tensor(np.zeros_like(wrt[k].data))
            else:
                out[k] = g if create_graph else Tensor(np.asarray(g, dtype=np.float64))
    return ParamSet(out)


def finite_diff_grad(f, params, eps=1e-5):
    """Central-difference gradient of scalar ``f(ParamSet)`` at ``params``."""
    if eps <= 0:
        raise ValueError("finite_diff_grad: eps must be positive")
    base = {k: np.array(v.data, dtype=np.float64) for k, v in params.items()}

    def evaluate(arrays):
        val = f(ParamSet.from_arrays(arrays))
        val = float(val.data if isinstance(val, Tensor) else val)
        if not np.isfinite(val):
            raise FloatingPointError("finite_diff_grad: f returned a non-finite value")
        return val

    grads = {}
    for k, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            fp = evaluate(base)
            flat[idx] = orig - eps
            fm = evaluate(base)
            flat[idx] = orig
            gflat[idx] = (fp - fm) / (2.0 * eps)
        grads[k] = Tensor(g)
    return ParamSet(grads)
