"""Static computation graphs with reverse-mode differentiation.

A :class:`Graph` is built once per architecture and input signature: inputs
are declared with fixed shapes, parameters are bound as :class:`Tensor`
leaves, and every operation appended records its parents.  Construction order
is therefore a valid topological order.  ``forward`` evaluates all nodes and
caches what each op needs for its backward rule; ``backward`` walks the nodes
once in reverse.

Feature maps use a channels-last layout: ``(N, H, W, C)`` for images and
``(N, T, H, W, C)`` for clips.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Shape inference or input validation failed at a named node."""


class GraphError(RuntimeError):
    """Graph used out of protocol (backward before forward, bad loss, ...)."""


class Tensor:
    """Concrete array with an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else np.result_type(np.asarray(data).dtype, np.float32))
        if arr.size == 0 or any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor {name!r}: extents must be positive, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def astype(self, dtype) -> "Tensor":
        self.data = np.ascontiguousarray(self.data, dtype=dtype)
        if self.grad is not None:
            self.grad = self.grad.astype(dtype)
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(name={self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# operations


class Op:
    """Forward/backward rule.  Subclasses override the three hooks."""

    name = "op"

    @staticmethod
    def infer(shapes, **attrs):
        raise NotImplementedError

    @staticmethod
    def forward(vals, **attrs):
        """Return ``(out, cache)``."""
        raise NotImplementedError

    @staticmethod
    def backward(g, vals, out, cache, needs, **attrs):
        """Return one gradient (or None) per parent."""
        raise NotImplementedError


class Add(Op):
    name = "add"

    @staticmethod
    def infer(shapes):
        return np.broadcast_shapes(*shapes)

    @staticmethod
    def forward(vals):
        return vals[0] + vals[1], None

    @staticmethod
    def backward(g, vals, out, cache, needs):
        return [_unbroadcast(g, vals[0].shape) if needs[0] else None,
                _unbroadcast(g, vals[1].shape) if needs[1] else None]


class Sub(Op):
    name = "sub"
    infer = Add.infer

    @staticmethod
    def forward(vals):
        return vals[0] - vals[1], None

    @staticmethod
    def backward(g, vals, out, cache, needs):
        return [_unbroadcast(g, vals[0].shape) if needs[0] else None,
                _unbroadcast(-g, vals[1].shape) if needs[1] else None]


class Mul(Op):
    name = "mul"
    infer = Add.infer

    @staticmethod
    def forward(vals):
        return vals[0] * vals[1], None

    @staticmethod
    def backward(g, vals, out, cache, needs):
        a, b = vals
        return [_unbroadcast(g * b, a.shape) if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None]


class Affine(Op):
    """``scale * x + offset`` with python scalars."""

    name = "affine"

    @staticmethod
    def infer(shapes, scale, offset):
        return shapes[0]

    @staticmethod
    def forward(vals, scale, offset):
        out = vals[0] * vals[0].dtype.type(scale) if scale != 1.0 else vals[0]
        if offset != 0.0:
            out = out + vals[0].dtype.type(offset)
        return out, None

    @staticmethod
    def backward(g, vals, out, cache, needs, scale, offset):
        return [g * g.dtype.type(scale) if scale != 1.0 else g]


class Square(Op):
    name = "square"

    @staticmethod
    def infer(shapes):
        return shapes[0]

    @staticmethod
    def forward(vals):
        return vals[0] * vals[0], None

    @staticmethod
    def backward(g, vals, out, cache, needs):
        return [2 * g * vals[0]]


class Exp(Op):
    name = "exp"
    infer = Square.infer

    @staticmethod
    def forward(vals):
        return np.exp(vals[0]), None

    @staticmethod
    def backward(g, vals, out, cache, needs):
        return [g * out]


class SiLU(Op):
    name = "silu"
    infer = Square.infer

    @staticmethod
    def forward(vals):
        x = vals[0]
        sig = 1.0 / (1.0 + np.exp(-x))
        return x * sig, sig

    @staticmethod
    def backward(g, vals, out, sig, needs):
        x = vals[0]
        return [g * (sig * (1.0 + x * (1.0 - sig)))]


class Sum(Op):
    name = "sum"

    @staticmethod
    def infer(shapes, axes, keepdims):
        if axes is None:
            return ()
        axes = tuple(a % len(shapes[0]) for a in axes)
        return tuple(1 if i in axes else n for i, n in enumerate(shapes[0]) if keepdims or i not in axes)

    @staticmethod
    def forward(vals, axes, keepdims):
        return np.asarray(vals[0].sum(axis=axes, keepdims=keepdims)), None

    @staticmethod
    def backward(g, vals, out, cache, needs, axes, keepdims):
        shape = vals[0].shape
        if axes is not None and not keepdims:
            g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
        elif axes is None:
            g = np.reshape(g, (1,) * len(shape))
        return [np.broadcast_to(g, shape).copy()]


class Mean(Op):
    name = "mean"
    infer = Sum.infer

    @staticmethod
    def forward(vals, axes, keepdims):
        return np.asarray(vals[0].mean(axis=axes, keepdims=keepdims)), None

    @staticmethod
    def backward(g, vals, out, cache, needs, axes, keepdims):
        shape = vals[0].shape
        count = math.prod(shape) if axes is None else math.prod(shape[a] for a in axes)
        (gs,) = Sum.backward(g, vals, out, cache, needs, axes=axes, keepdims=keepdims)
        return [gs / g.dtype.type(count)]


class Reshape(Op):
    name = "reshape"

    @staticmethod
    def infer(shapes, shape):
        if math.prod(shapes[0]) != math.prod(shape):
            raise ShapeError(f"cannot reshape {shapes[0]} to {shape}")
        return tuple(shape)

    @staticmethod
    def forward(vals, shape):
        return vals[0].reshape(shape), None

    @staticmethod
    def backward(g, vals, out, cache, needs, shape):
        return [g.reshape(vals[0].shape)]


class Transpose(Op):
    name = "transpose"

    @staticmethod
    def infer(shapes, perm):
        if sorted(perm) != list(range(len(shapes[0]))):
            raise ShapeError(f"bad permutation {perm} for rank {len(shapes[0])}")
        return tuple(shapes[0][p] for p in perm)

    @staticmethod
    def forward(vals, perm):
        return np.ascontiguousarray(vals[0].transpose(perm)), None

    @staticmethod
    def backward(g, vals, out, cache, needs, perm):
        return [np.ascontiguousarray(g.transpose(np.argsort(perm)))]


class Slice(Op):
    name = "slice"

    @staticmethod
    def infer(shapes, axis, start, stop):
        shape = list(shapes[0])
        if not 0 <= start < stop <= shape[axis]:
            raise ShapeError(f"slice [{start}:{stop}] out of range for axis of extent {shape[axis]}")
        shape[axis] = stop - start
        return tuple(shape)

    @staticmethod
    def forward(vals, axis, start, stop):
        idx = [slice(None)] * vals[0].ndim
        idx[axis] = slice(start, stop)
        return np.ascontiguousarray(vals[0][tuple(idx)]), None

    @staticmethod
    def backward(g, vals, out, cache, needs, axis, start, stop):
        full = np.zeros_like(vals[0])
        idx = [slice(None)] * full.ndim
        idx[axis] = slice(start, stop)
        full[tuple(idx)] = g
        return [full]


class Concat(Op):
    name = "concat"

    @staticmethod
    def infer(shapes, axis):
        ref = list(shapes[0])
        for s in shapes[1:]:
            if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref)) if i != axis % len(ref)):
                raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}")
        ref[axis] = sum(s[axis] for s in shapes)
        return tuple(ref)

    @staticmethod
    def forward(vals, axis):
        return np.concatenate(vals, axis=axis), None

    @staticmethod
    def backward(g, vals, out, cache, needs, axis):
        bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
        return [np.ascontiguousarray(p) if n else None for p, n in zip(np.split(g, bounds, axis=axis), needs)]


class MatMul(Op):
    name = "matmul"

    @staticmethod
    def infer(shapes):
        a, b = shapes
        if len(a) < 2 or len(b) < 2 or a[-1] != b[-2]:
            raise ShapeError(f"matmul: {a} @ {b}")
        return np.broadcast_shapes(a[:-2], b[:-2]) + (a[-2], b[-1])

    @staticmethod
    def forward(vals):
        return np.matmul(vals[0], vals[1]), None

    @staticmethod
    def backward(g, vals, out, cache, needs):
        a, b = vals
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
        if needs[1]:
            if a.ndim > 2 and b.ndim == 2:
                # weight shared across the batch: one big GEMM
                gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
        return [ga, gb]


class Softmax(Op):
    name = "softmax"

    @staticmethod
    def infer(shapes, axis):
        return shapes[0]

    @staticmethod
    def forward(vals, axis):
        x = vals[0]
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True), None

    @staticmethod
    def backward(g, vals, out, cache, needs, axis):
        return [out * (g - (g * out).sum(axis=axis, keepdims=True))]


class Conv(Op):
    """N-d convolution, channels-last input ``(N, *S, C)``, weight ``(*K, C, O)``."""

    name = "conv"

    @staticmethod
    def infer(shapes, stride, pad):
        x, w = shapes
        d = len(w) - 2
        if len(x) != d + 2 or x[-1] != w[-2]:
            raise ShapeError(f"conv{d}d: input {x} incompatible with weight {w}")
        out = []
        for n, k, s, p in zip(x[1:-1], w[:d], stride, pad):
            o = (n + 2 * p - k) // s + 1
            if o <= 0:
                raise ShapeError(f"conv{d}d: kernel {w[:d]} larger than padded input {x}")
            out.append(o)
        return (x[0], *out, w[-1])

    @staticmethod
    def _cols(x, ksize, stride, pad):
        d = len(ksize)
        if any(pad):
            x = np.pad(x, [(0, 0)] + [(p, p) for p in pad] + [(0, 0)])
        if all(k == 1 for k in ksize) and all(s == 1 for s in stride):
            return x.reshape(-1, x.shape[-1]), x.shape
        win = sliding_window_view(x, ksize, axis=tuple(range(1, d + 1)))
        win = win[(slice(None),) + tuple(slice(None, None, s) for s in stride)]
        # (N, *O, C, *K) -> (N, *O, *K, C)
        perm = tuple(range(d + 1)) + tuple(range(d + 2, 2 * d + 2)) + (d + 1,)
        win = win.transpose(perm)
        return win.reshape(-1, math.prod(ksize) * x.shape[-1]), x.shape

    @staticmethod
    def forward(vals, stride, pad):
        x, w = vals
        d = w.ndim - 2
        ksize = w.shape[:d]
        cols, padded_shape = Conv._cols(x, ksize, stride, pad)
        out = cols @ w.reshape(-1, w.shape[-1])
        oshape = Conv.infer((x.shape, w.shape), stride=stride, pad=pad)
        return out.reshape(oshape), (cols, padded_shape)

    @staticmethod
    def backward(g, vals, out, cache, needs, stride, pad):
        x, w = vals
        cols, padded_shape = cache
        d = w.ndim - 2
        ksize = w.shape[:d]
        gm = g.reshape(-1, g.shape[-1])
        gx = gw = None
        if needs[1]:
            gw = (cols.T @ gm).reshape(w.shape)
        if needs[0]:
            gcols = gm @ w.reshape(-1, w.shape[-1]).T
            if all(k == 1 for k in ksize) and all(s == 1 for s in stride):
                gxp = gcols.reshape(padded_shape)
            else:
                osz = g.shape[1:-1]
                gcols = gcols.reshape(g.shape[:-1] + tuple(ksize) + (x.shape[-1],))
                gxp = np.zeros(padded_shape, dtype=g.dtype)
                for k in np.ndindex(*ksize):
                    dst = (slice(None),) + tuple(
                        slice(ki, ki + s * (o - 1) + 1, s) for ki, s, o in zip(k, stride, osz)
                    )
                    gxp[dst] += gcols[(slice(None),) * (d + 1) + k]
            if any(pad):
                gxp = gxp[(slice(None),) + tuple(slice(p, p + n) for p, n in zip(pad, x.shape[1:-1]))]
            gx = np.ascontiguousarray(gxp)
        return [gx, gw]


class GroupNorm(Op):
    """Group normalization over channels-last input, per sample."""

    name = "group_norm"

    @staticmethod
    def infer(shapes, groups, eps):
        x, gamma, beta = shapes
        c = x[-1]
        if c % groups or gamma != (c,) or beta != (c,):
            raise ShapeError(f"group_norm: channels {c}, groups {groups}, affine {gamma}/{beta}")
        return x

    @staticmethod
    def forward(vals, groups, eps):
        x, gamma, beta = vals
        n, c = x.shape[0], x.shape[-1]
        xg = x.reshape(n, -1, groups, c // groups)
        mu = xg.mean(axis=(1, 3), keepdims=True)
        xc = xg - mu
        var = (xc * xc).mean(axis=(1, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
        xhat = (xc * inv).reshape(x.shape)
        return xhat * gamma + beta, (xhat, inv)

    @staticmethod
    def backward(g, vals, out, cache, needs, groups, eps):
        x, gamma, beta = vals
        xhat, inv = cache
        n, c = x.shape[0], x.shape[-1]
        red = tuple(range(x.ndim - 1))
        ggamma = (g * xhat).sum(axis=red) if needs[1] else None
        gbeta = g.sum(axis=red) if needs[2] else None
        gx = None
        if needs[0]:
            gxh = (g * gamma).reshape(n, -1, groups, c // groups)
            xh = xhat.reshape(gxh.shape)
            gx = inv * (gxh - gxh.mean(axis=(1, 3), keepdims=True)
                        - xh * (gxh * xh).mean(axis=(1, 3), keepdims=True))
            gx = gx.reshape(x.shape)
        return [gx, ggamma, gbeta]


class Upsample2x(Op):
    """Nearest-neighbour 2x upsampling of the two axes before channels."""

    name = "upsample2x"

    @staticmethod
    def infer(shapes):
        s = shapes[0]
        return s[:-3] + (2 * s[-3], 2 * s[-2], s[-1])

    @staticmethod
    def forward(vals):
        return vals[0].repeat(2, axis=-3).repeat(2, axis=-2), None

    @staticmethod
    def backward(g, vals, out, cache, needs):
        s = vals[0].shape
        return [g.reshape(s[:-3] + (s[-3], 2, s[-2], 2, s[-1])).sum(axis=(-4, -2))]


# --------------------------------------------------------------------------
# graph


class Node:
    """Symbolic value in a :class:`Graph`."""

    __slots__ = ("graph", "op", "parents", "shape", "name", "index", "attrs", "tensor", "needs_grad", "kind")

    def __init__(self, graph, op, parents, shape, name, attrs=None, tensor=None, kind="op", needs_grad=False):
        self.graph = graph
        self.op = op
        self.parents = parents
        self.shape = tuple(int(s) for s in shape)
        self.name = name
        self.attrs = attrs or {}
        self.tensor = tensor
        self.kind = kind
        self.needs_grad = needs_grad
        self.index = -1

    def __repr__(self):
        return f"Node({self.name!r}, {self.kind}, shape={self.shape})"

    def _lift(self, other):
        if isinstance(other, Node):
            return other
        return self.graph.const(np.asarray(other))

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.apply(Affine, self, scale=1.0, offset=float(other))
        return self.graph.apply(Add, self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.apply(Affine, self, scale=1.0, offset=-float(other))
        return self.graph.apply(Sub, self, self._lift(other))

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.apply(Affine, self, scale=-1.0, offset=float(other))
        return self.graph.apply(Sub, self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.apply(Affine, self, scale=float(other), offset=0.0)
        return self.graph.apply(Mul, self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by python scalars is supported")
        return self * (1.0 / other)

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        return self.graph.apply(MatMul, self, self._lift(other))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        if -1 in shape:
            known = math.prod(s for s in shape if s != -1)
            shape = tuple(math.prod(self.shape) // known if s == -1 else s for s in shape)
        return self.graph.apply(Reshape, self, shape=tuple(shape))

    def transpose(self, *perm):
        return self.graph.apply(Transpose, self, perm=tuple(perm))

    def sum(self, axes=None, keepdims=False):
        return self.graph.apply(Sum, self, axes=None if axes is None else tuple(axes), keepdims=keepdims)

    def mean(self, axes=None, keepdims=False):
        return self.graph.apply(Mean, self, axes=None if axes is None else tuple(axes), keepdims=keepdims)

    def square(self):
        return self.graph.apply(Square, self)

    def exp(self):
        return self.graph.apply(Exp, self)

    def silu(self):
        return self.graph.apply(SiLU, self)

    def softmax(self, axis=-1):
        return self.graph.apply(Softmax, self, axis=axis)

    def slice(self, axis, start, stop):
        return self.graph.apply(Slice, self, axis=axis % len(self.shape), start=start, stop=stop)


def concat(nodes, axis=-1):
    g = nodes[0].graph
    return g.apply(Concat, *nodes, axis=axis % len(nodes[0].shape))


def conv(x: Node, w: Node, stride=1, pad=0) -> Node:
    d = len(w.shape) - 2
    stride = (stride,) * d if isinstance(stride, int) else tuple(stride)
    pad = (pad,) * d if isinstance(pad, int) else tuple(pad)
    return x.graph.apply(Conv, x, w, stride=stride, pad=pad)


def group_norm(x: Node, gamma: Node, beta: Node, groups: int, eps: float = 1e-5) -> Node:
    return x.graph.apply(GroupNorm, x, gamma, beta, groups=groups, eps=eps)


def upsample2x(x: Node) -> Node:
    return x.graph.apply(Upsample2x, x)


class Graph:
    """A static computation graph.

    Parameters
    ----------
    name : str
        Label used in error messages.
    dtype : numpy dtype
        Evaluation precision; inputs and parameters are cast on entry
        (float32 for training, float64 for gradient checks).
    """

    def __init__(self, name: str = "graph", dtype=np.float32):
        self.name = name
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self._params: dict[int, Node] = {}
        self._values: list | None = None
        self._caches: list | None = None
        self._counter = 0

    def __repr__(self):
        return f"Graph({self.name!r}, nodes={len(self.nodes)}, dtype={self.dtype})"

    def _add(self, node: Node) -> Node:
        node.index = len(self.nodes)
        self.nodes.append(node)
        self._values = None
        return node

    def input(self, name: str, shape, requires_grad: bool = False) -> Node:
        if name in self.inputs:
            raise GraphError(f"{self.name}: duplicate input {name!r}")
        if any(int(s) <= 0 for s in shape):
            raise ShapeError(f"{self.name}: input {name!r} has non-positive extent {tuple(shape)}")
        node = self._add(Node(self, None, (), shape, name, kind="input", needs_grad=requires_grad))
        self.inputs[name] = node
        return node

    def param(self, tensor: Tensor) -> Node:
        key = id(tensor)
        if key not in self._params:
            name = tensor.name or f"param{len(self._params)}"
            self._params[key] = self._add(
                Node(self, None, (), tensor.shape, name, tensor=tensor, kind="param",
                     needs_grad=tensor.requires_grad)
            )
        return self._params[key]

    def const(self, value, name: str | None = None) -> Node:
        arr = np.asarray(value)
        self._counter += 1
        return self._add(Node(self, None, (), arr.shape, name or f"const{self._counter}",
                              tensor=Tensor(arr, dtype=arr.dtype) if arr.size else None, kind="const"))

    def apply(self, op, *parents, name: str | None = None, **attrs) -> Node:
        for p in parents:
            if p.graph is not self:
                raise GraphError(f"{self.name}: node {p.name!r} belongs to another graph")
        self._counter += 1
        label = name or f"{op.name}{self._counter}"
        try:
            shape = op.infer([p.shape for p in parents], **attrs)
        except ShapeError as exc:
            raise ShapeError(f"{self.name}: node {label!r} ({op.name}): {exc}") from None
        needs = any(p.needs_grad for p in parents)
        return self._add(Node(self, op, tuple(parents), shape, label, attrs=attrs, needs_grad=needs))

    # ---------------------------------------------------------------- eval

    def forward(self, inputs: dict | None = None, keep: bool = True):
        """Evaluate every node.

        ``inputs`` maps declared input names to arrays of exactly the declared
        shape.  With ``keep=False`` intermediates are dropped as soon as their
        last consumer has run (inference mode; ``backward`` is then invalid).
        Returns the value of the last node.
        """
        inputs = dict(inputs or {})
        missing = set(self.inputs) - set(inputs)
        if missing:
            raise GraphError(f"{self.name}: missing inputs {sorted(missing)}")
        extra = set(inputs) - set(self.inputs)
        if extra:
            raise GraphError(f"{self.name}: unknown inputs {sorted(extra)}")
        nodes = self.nodes
        values: list = [None] * len(nodes)
        caches: list = [None] * len(nodes)
        last_use = None
        if not keep:
            last_use = [-1] * len(nodes)
            for node in nodes:
                for p in node.parents:
                    last_use[p.index] = node.index
        for node in nodes:
            if node.kind == "input":
                arr = np.asarray(inputs[node.name])
                if arr.shape != node.shape:
                    raise ShapeError(
                        f"{self.name}: input {node.name!r} expects shape {node.shape}, got {arr.shape}"
                    )
                values[node.index] = np.ascontiguousarray(arr, dtype=self.dtype)
            elif node.kind in ("param", "const"):
                data = node.tensor.data if node.tensor is not None else np.zeros(node.shape)
                if node.kind == "param" and data.shape != node.shape:
                    raise ShapeError(f"{self.name}: parameter {node.name!r} changed shape to {data.shape}")
                values[node.index] = np.asarray(data, dtype=self.dtype)
            else:
                vals = [values[p.index] for p in node.parents]
                out, cache = node.op.forward(vals, **node.attrs)
                if out.dtype != self.dtype:
                    out = out.astype(self.dtype)
                values[node.index] = out
                if keep:
                    caches[node.index] = cache
                else:
                    for p in node.parents:
                        if last_use[p.index] == node.index and p.index != len(nodes) - 1:
                            values[p.index] = None
        if keep:
            self._values, self._caches = values, caches
        else:
            self._values = self._caches = None
        return values[-1]

    def value(self, node: Node) -> np.ndarray:
        if self._values is None:
            raise GraphError(f"{self.name}: no cached values; run forward(keep=True) first")
        return self._values[node.index]

    def backward(self, loss: Node | None = None, scale: float = 1.0) -> dict[str, np.ndarray]:
        """Reverse sweep from scalar ``loss`` (default: last node).

        Parameter gradients are stored on ``Tensor.grad``; the returned dict
        maps parameter and differentiable-input names to their gradients.
        """
        if self._values is None:
            raise GraphError(f"{self.name}: backward called before forward")
        loss = loss if loss is not None else self.nodes[-1]
        if math.prod(loss.shape) != 1:
            raise GraphError(f"{self.name}: loss {loss.name!r} must be scalar, has shape {loss.shape}")
        values, caches = self._values, self._caches
        grads: list = [None] * len(self.nodes)
        grads[loss.index] = np.full(loss.shape, scale, dtype=self.dtype)
        result: dict[str, np.ndarray] = {}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads[node.index]
            if g is None or not node.needs_grad:
                continue
            if node.kind == "param":
                node.tensor.grad = g.astype(node.tensor.dtype, copy=False)
                result[node.name] = g
                continue
            if node.kind == "input":
                result[node.name] = g
                continue
            if node.kind == "const":
                continue
            needs = [p.needs_grad for p in node.parents]
            pgrads = node.op.backward(g, [values[p.index] for p in node.parents], values[node.index],
                                      caches[node.index], needs, **node.attrs)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.needs_grad:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"{self.name}: gradient for {p.name!r} has shape {pg.shape}, expected {p.shape}")
                grads[p.index] = pg if grads[p.index] is None else grads[p.index] + pg
        return result


def forward(graph: Graph, **inputs):
    return graph.forward(inputs)


def backward(graph: Graph, loss: Node | None = None):
    return graph.backward(loss)
