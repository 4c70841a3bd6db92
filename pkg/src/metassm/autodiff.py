"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every :class:`Tensor` is a node on a :class:`Tape`. Operations that touch at
least one tensor are recorded on that tensor's tape; operations on plain
arrays execute eagerly and behave as constants. Vector-Jacobian products are
written against the same operator vocabulary, so a backward pass can either
run on raw arrays (fast, first order) or be recorded as new tape nodes
(``create_graph=True``), which is what makes gradients of gradients work.

>>> tape = Tape()
>>> x = tape.variable(3.0)
>>> float(tape.grad(x * x, x))
6.0
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape", "Tensor", "ShapeError", "GradientError", "NotTwiceDifferentiableError",
    "forward", "grad", "grad_nested", "elementwise_second_derivative", "jacobian",
    "value_of", "is_tensor",
    "add", "sub", "mul", "div", "neg", "power", "matmul", "linear", "transpose", "reshape",
    "sum", "mean", "broadcast_to", "sum_to", "getitem", "concat", "stack",
    "exp", "log", "sqrt", "tanh", "sigmoid", "swish", "relu", "elu", "sin", "cos",
    "square", "identity",
]


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


class NotTwiceDifferentiableError(GradientError):
    """A second derivative was requested through a non-smooth primitive."""

    def __init__(self, primitive: str):
        super().__init__(
            f"primitive '{primitive}' has no usable second derivative; "
            "use a smooth activation (swish, tanh) on this path")
        self.primitive = primitive


class Primitive:
    __slots__ = ("name", "vjp", "smooth")

    def __init__(self, name, vjp, smooth=True):
        self.name = name
        self.vjp = vjp
        self.smooth = smooth

    def __repr__(self):
        return f"Primitive({self.name})"


PRIMITIVES: dict[str, Primitive] = {}


def _primitive(name, smooth=True):
    def register(vjp):
        prim = Primitive(name, vjp, smooth)
        PRIMITIVES[name] = prim
        return prim
    return register


class Tensor:
    """A recorded array value. Create through :meth:`Tape.variable` or ops."""

    __slots__ = ("value", "tape", "index", "prim", "inputs", "ctx", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, tape, index, prim=None, inputs=(), ctx=None, name=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.prim = prim
        self.inputs = inputs
        self.ctx = ctx
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        op = self.prim.name if self.prim is not None else "leaf"
        return f"Tensor({op}#{self.index}, shape={self.shape})"

    def __float__(self):
        return float(self.value)

    def item(self):
        return self.value.item()

    def numpy(self):
        return self.value

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def value_of(x):
    """Strip the tape from ``x`` and return the underlying array."""
    return x.value if isinstance(x, Tensor) else x


def _shape(x):
    return x.shape if isinstance(x, Tensor) else np.shape(x)


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in creation order, so inputs always precede the
    operations that consume them. Backward passes never mutate existing
    nodes; with ``create_graph=True`` they append new ones.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __len__(self):
        return len(self.nodes)

    def variable(self, value, name=None) -> Tensor:
        arr = np.array(value, dtype=np.float64)
        node = Tensor(arr, self, len(self.nodes), name=name)
        self.nodes.append(node)
        return node

    def _record(self, value, prim, inputs, ctx) -> Tensor:
        node = Tensor(value, self, len(self.nodes), prim, inputs, ctx)
        self.nodes.append(node)
        return node

    def grad(self, output, wrt, create_graph=False, strict=False):
        """Gradient of the scalar ``output`` with respect to ``wrt``.

        Parameters
        ----------
        output : Tensor
            Scalar node on this tape.
        wrt : Tensor or sequence of Tensor
            Nodes to differentiate against. Intermediate nodes are allowed.
        create_graph : bool
            Record the backward pass so the result can be differentiated again.
        strict : bool
            Refuse to differentiate through primitives without a smooth second
            derivative (only meaningful with ``create_graph``).

        Returns
        -------
        Array or Tensor, or a list of them when ``wrt`` is a sequence.
        """
        if not isinstance(output, Tensor) or output.tape is not self:
            raise GradientError("output is not a node on this tape")
        if output.size != 1:
            raise GradientError(f"grad needs a scalar output, got shape {output.shape}")
        return self.vjp(output, np.ones(output.shape), wrt, create_graph, strict)

    def vjp(self, output, seed, wrt, create_graph=False, strict=False):
        """Vector-Jacobian product ``seed^T d(output)/d(wrt)``."""
        single = isinstance(wrt, Tensor)
        wrt_list = [wrt] if single else list(wrt)
        if not wrt_list:
            return []
        for w in wrt_list:
            if not isinstance(w, Tensor) or w.tape is not self:
                raise GradientError("requested input is not a node on this tape")
        nodes = self.nodes
        stop = min(w.index for w in wrt_list)
        top = output.index
        wanted = {w.index for w in wrt_list}

        # forward sweep: which nodes in (stop, top] depend on any requested input
        depends = set(wanted)
        for i in range(stop + 1, top + 1):
            node = nodes[i]
            if i in depends:
                continue
            for x in node.inputs:
                if isinstance(x, Tensor) and x.index in depends:
                    depends.add(i)
                    break

        adj = {top: np.asarray(seed, dtype=np.float64)} if top in depends else {}
        for i in range(top, stop, -1):
            g = adj.get(i) if i in wanted else adj.pop(i, None)
            if g is None:
                continue
            node = nodes[i]
            prim = node.prim
            if prim is None:
                continue
            ins = node.inputs
            needs = tuple(isinstance(x, Tensor) and x.index in depends for x in ins)
            if not any(needs):
                continue
            if create_graph:
                if strict and not prim.smooth:
                    raise NotTwiceDifferentiableError(prim.name)
                grads = prim.vjp(g, ins, node, node.ctx, needs)
            else:
                raw = tuple(x.value if isinstance(x, Tensor) else x for x in ins)
                grads = prim.vjp(g, raw, node.value, node.ctx, needs)
            for x, gx, nd in zip(ins, grads, needs):
                if nd and gx is not None:
                    j = x.index
                    prev = adj.get(j)
                    adj[j] = gx if prev is None else prev + gx

        out = []
        for w in wrt_list:
            g = adj.get(w.index)
            out.append(np.zeros(w.shape) if g is None else g)
        return out[0] if single else out


# ----------------------------------------------------------------------------
# recording helper


def _apply(prim, inputs, fn, ctx=None):
    tape = None
    for x in inputs:
        if isinstance(x, Tensor):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise GradientError(f"{prim.name}: operands live on different tapes")
    raw = [x.value if isinstance(x, Tensor) else x for x in inputs]
    try:
        value = fn(*raw)
    except ValueError as exc:
        shapes = ", ".join(str(np.shape(r)) for r in raw)
        where = f"node {len(tape.nodes)}" if tape is not None else "constant"
        raise ShapeError(f"{prim.name} ({where}): incompatible operand shapes {shapes}: {exc}") from None
    if tape is None:
        return value
    if not isinstance(value, np.ndarray) or value.dtype != np.float64:
        value = np.asarray(value, dtype=np.float64)
    return tape._record(value, prim, tuple(inputs), ctx)


# ----------------------------------------------------------------------------
# shape plumbing


def _sum_to_raw(x, shape):
    x = np.asarray(x)
    if x.shape == tuple(shape):
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and x.shape[lead + i] != 1)
    return x.sum(axis=axes, keepdims=True).reshape(shape)


@_primitive("sum_to")
def _sum_to_vjp(g, ins, out, shape, needs):
    return (broadcast_to(g, _shape(ins[0])),)


@_primitive("broadcast_to")
def _broadcast_vjp(g, ins, out, shape, needs):
    return (sum_to(g, _shape(ins[0])),)


def sum_to(x, shape):
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    shape = tuple(shape)
    if _shape(x) == shape:
        return x
    return _apply(_sum_to_vjp, (x,), lambda v: _sum_to_raw(v, shape), shape)


def broadcast_to(x, shape):
    shape = tuple(shape)
    if _shape(x) == shape:
        return x
    return _apply(_broadcast_vjp, (x,), lambda v: np.broadcast_to(v, shape), shape)


@_primitive("reshape")
def _reshape_vjp(g, ins, out, shape, needs):
    return (reshape(g, _shape(ins[0])),)


def reshape(x, shape):
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    return _apply(_reshape_vjp, (x,), lambda v: np.reshape(v, shape), shape)


@_primitive("transpose")
def _transpose_vjp(g, ins, out, axes, needs):
    inv = None if axes is None else tuple(np.argsort(axes))
    return (transpose(g, inv),)


def transpose(x, axes=None):
    return _apply(_transpose_vjp, (x,), lambda v: np.transpose(v, axes), axes)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def _scatter_raw(g, idx, shape):
    z = np.zeros(shape)
    if _is_basic_index(idx):
        z[idx] = g
    else:
        np.add.at(z, idx, g)
    return z


@_primitive("getitem")
def _getitem_vjp(g, ins, out, idx, needs):
    return (_scatter(g, idx, _shape(ins[0])),)


@_primitive("scatter")
def _scatter_vjp(g, ins, out, ctx, needs):
    idx, _ = ctx
    return (getitem(g, idx),)


def getitem(x, idx):
    return _apply(_getitem_vjp, (x,), lambda v: np.asarray(v)[idx], idx)


def _scatter(g, idx, shape):
    return _apply(_scatter_vjp, (g,), lambda v: _scatter_raw(v, idx, shape), (idx, shape))


@_primitive("concat")
def _concat_vjp(g, ins, out, axis, needs):
    grads = []
    start = 0
    ndim = len(_shape(g))
    ax = axis % ndim
    for x, nd in zip(ins, needs):
        n = _shape(x)[ax]
        if nd:
            sl = [slice(None)] * ndim
            sl[ax] = slice(start, start + n)
            grads.append(getitem(g, tuple(sl)))
        else:
            grads.append(None)
        start += n
    return tuple(grads)


def concat(xs: Sequence, axis=-1):
    xs = tuple(xs)
    return _apply(_concat_vjp, xs, lambda *vs: np.concatenate(vs, axis=axis), axis)


def stack(xs: Sequence, axis=0):
    xs = tuple(xs)
    expanded = []
    for x in xs:
        shp = list(_shape(x))
        ax = axis if axis >= 0 else len(shp) + 1 + axis
        shp.insert(ax, 1)
        expanded.append(reshape(x, tuple(shp)))
    return concat(expanded, axis=axis)


@_primitive("sum")
def _sum_vjp(g, ins, out, ctx, needs):
    axis, keepdims = ctx
    shape = _shape(ins[0])
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        kshape = list(shape)
        for a in axes:
            kshape[a % len(shape)] = 1
        g = reshape(g, tuple(kshape))
    return (broadcast_to(g, shape),)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    return _apply(_sum_vjp, (x,), lambda v: np.sum(v, axis=axis, keepdims=keepdims), (axis, keepdims))


def mean(x, axis=None, keepdims=False):
    shape = _shape(x)
    if axis is None:
        count = int(np.prod(shape)) if len(shape) else 1
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[a] for a in axes]))
    return sum(x, axis, keepdims) / float(count)


# ----------------------------------------------------------------------------
# arithmetic


@_primitive("add")
def _add_vjp(g, ins, out, ctx, needs):
    a, b = ins
    return (sum_to(g, _shape(a)) if needs[0] else None,
            sum_to(g, _shape(b)) if needs[1] else None)


@_primitive("sub")
def _sub_vjp(g, ins, out, ctx, needs):
    a, b = ins
    return (sum_to(g, _shape(a)) if needs[0] else None,
            sum_to(neg(g), _shape(b)) if needs[1] else None)


@_primitive("mul")
def _mul_vjp(g, ins, out, ctx, needs):
    a, b = ins
    return (sum_to(g * b, _shape(a)) if needs[0] else None,
            sum_to(g * a, _shape(b)) if needs[1] else None)


@_primitive("div")
def _div_vjp(g, ins, out, ctx, needs):
    a, b = ins
    return (sum_to(g / b, _shape(a)) if needs[0] else None,
            sum_to(neg(g * out / b), _shape(b)) if needs[1] else None)


@_primitive("neg")
def _neg_vjp(g, ins, out, ctx, needs):
    return (neg(g),)


@_primitive("power")
def _power_vjp(g, ins, out, exponent, needs):
    x = ins[0]
    if exponent == 2:
        return (g * (2.0 * x),)
    return (g * (exponent * power(x, exponent - 1)),)


def add(a, b):
    return _apply(_add_vjp, (a, b), np.add)


def sub(a, b):
    return _apply(_sub_vjp, (a, b), np.subtract)


def mul(a, b):
    return _apply(_mul_vjp, (a, b), np.multiply)


def div(a, b):
    return _apply(_div_vjp, (a, b), np.divide)


def neg(x):
    return _apply(_neg_vjp, (x,), np.negative)


def power(x, exponent):
    exponent = float(exponent)
    if exponent == 1.0:
        return x
    return _apply(_power_vjp, (x,), lambda v: np.power(v, exponent), exponent)


def square(x):
    return power(x, 2)


def sqrt(x):
    return power(x, 0.5)


def identity(x):
    return x


@_primitive("matmul")
def _matmul_vjp(g, ins, out, ctx, needs):
    a, b = ins
    na, nb = len(_shape(a)), len(_shape(b))
    ga = gb = None
    if na == 2 and nb == 2:
        if needs[0]:
            ga = matmul(g, transpose(b))
        if needs[1]:
            gb = matmul(transpose(a), g)
    elif na == 1 and nb == 2:
        if needs[0]:
            ga = matmul(b, g)
        if needs[1]:
            gb = matmul(reshape(a, (-1, 1)), reshape(g, (1, -1)))
    elif na == 2 and nb == 1:
        if needs[0]:
            ga = matmul(reshape(g, (-1, 1)), reshape(b, (1, -1)))
        if needs[1]:
            gb = matmul(g, a)
    elif na == 1 and nb == 1:
        if needs[0]:
            ga = g * b
        if needs[1]:
            gb = g * a
    else:
        raise ShapeError(f"matmul: only 1-D/2-D operands supported, got {na}-D and {nb}-D")
    return ga, gb


def matmul(a, b):
    return _apply(_matmul_vjp, (a, b), np.matmul)


@_primitive("linear")
def _linear_vjp(g, ins, out, ctx, needs):
    x, W, b = ins
    gx = gW = gb = None
    if needs[0]:
        gx = matmul(g, W)
    if needs[1]:
        if len(_shape(x)) == 1:
            gW = matmul(reshape(g, (-1, 1)), reshape(x, (1, -1)))
        else:
            gW = matmul(transpose(g), x)
    if needs[2]:
        gb = sum_to(g, _shape(b))
    return gx, gW, gb


def linear(x, W, b):
    """Affine map ``x @ W.T + b`` for ``x`` of shape ``(n_in,)`` or ``(N, n_in)``."""
    return _apply(_linear_vjp, (x, W, b), lambda xv, Wv, bv: xv @ Wv.T + bv)


# ----------------------------------------------------------------------------
# elementwise nonlinearities


def _sigmoid_raw(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


@_primitive("exp")
def _exp_vjp(g, ins, out, ctx, needs):
    return (g * out,)


@_primitive("log")
def _log_vjp(g, ins, out, ctx, needs):
    return (g / ins[0],)


@_primitive("sin")
def _sin_vjp(g, ins, out, ctx, needs):
    return (g * cos(ins[0]),)


@_primitive("cos")
def _cos_vjp(g, ins, out, ctx, needs):
    return (neg(g * sin(ins[0])),)


@_primitive("tanh")
def _tanh_vjp(g, ins, out, ctx, needs):
    return (g * (1.0 - out * out),)


@_primitive("sigmoid")
def _sigmoid_vjp(g, ins, out, ctx, needs):
    return (g * (out * (1.0 - out)),)


@_primitive("swish")
def _swish_vjp(g, ins, out, ctx, needs):
    # d/dz z*s(z) = s + z*s*(1-s) = s + out*(1-s)
    s = sigmoid(ins[0])
    return (g * (s + out * (1.0 - s)),)


@_primitive("relu", smooth=False)
def _relu_vjp(g, ins, out, ctx, needs):
    mask = (value_of(ins[0]) > 0).astype(np.float64)
    return (g * mask,)


@_primitive("elu", smooth=False)
def _elu_vjp(g, ins, out, ctx, needs):
    mask = (value_of(ins[0]) > 0).astype(np.float64)
    # negative branch derivative is exp(z) = out + 1; keeps it differentiable there
    return (g * (mask + (1.0 - mask) * (out + 1.0)),)


def exp(x):
    return _apply(_exp_vjp, (x,), np.exp)


def log(x):
    return _apply(_log_vjp, (x,), np.log)


def sin(x):
    return _apply(_sin_vjp, (x,), np.sin)


def cos(x):
    return _apply(_cos_vjp, (x,), np.cos)


def tanh(x):
    return _apply(_tanh_vjp, (x,), np.tanh)


def sigmoid(x):
    return _apply(_sigmoid_vjp, (x,), _sigmoid_raw)


def swish(x):
    """Swish with unit slope: ``z * sigmoid(z)``."""
    return _apply(_swish_vjp, (x,), lambda v: v * _sigmoid_raw(v))


def relu(x):
    return _apply(_relu_vjp, (x,), lambda v: np.maximum(v, 0.0))


def elu(x):
    return _apply(_elu_vjp, (x,), lambda v: np.where(v > 0, v, np.expm1(np.minimum(v, 0.0))))


# ----------------------------------------------------------------------------
# functional front-ends


def forward(fn: Callable, inputs: dict, tape: Tape | None = None):
    """Bind named arrays as tape variables and evaluate ``fn(**inputs)``.

    Returns the output node and the tape holding every intermediate, ready
    for :func:`grad`.
    """
    tape = Tape() if tape is None else tape
    bound = {k: tape.variable(v, name=k) for k, v in inputs.items()}
    return fn(**bound), tape


def grad(output, wrt, create_graph=False):
    if not isinstance(output, Tensor):
        raise GradientError("output does not depend on any recorded input")
    return output.tape.grad(output, wrt, create_graph=create_graph)


def _as_variable(x, tape=None):
    if isinstance(x, Tensor):
        return x.tape, x
    tape = Tape() if tape is None else tape
    return tape, tape.variable(x)


def jacobian(f: Callable, x, create_graph=False):
    """Jacobian of a vector function; row ``i`` is the gradient of ``f(x)[i]``.

    ``x`` may be an array (a fresh tape is used) or a tensor already on a tape.
    The result has shape ``f(x).shape + x.shape`` flattened to 2-D for 1-D
    inputs and outputs.
    """
    tape, xv = _as_variable(x)
    y = f(xv)
    xshape = _shape(xv)
    if not isinstance(y, Tensor):
        return np.zeros(np.shape(y) + xshape)
    n = y.size
    rows = []
    for i in range(n):
        seed = np.zeros(n)
        seed[i] = 1.0
        rows.append(tape.vjp(y, seed.reshape(y.shape), xv, create_graph=create_graph))
    if create_graph:
        return stack(rows, axis=0).reshape(y.shape + xshape)
    return np.stack(rows, axis=0).reshape(y.shape + xshape)


def grad_nested(f: Callable, x):
    """Second derivative of a scalar function by differentiating its gradient.

    For scalar ``x`` this is ``d2f/dx2``; for vector ``x`` the Hessian. Raises
    :class:`NotTwiceDifferentiableError` when the path from ``x`` to ``f``
    crosses a non-smooth primitive such as ReLU or ELU.
    """
    tape, xv = _as_variable(x)
    out = f(xv)
    if not isinstance(out, Tensor):
        return np.zeros(xv.shape + xv.shape)
    if out.size != 1:
        raise GradientError(f"grad_nested needs a scalar function, got shape {out.shape}")
    g = tape.vjp(out, np.ones(out.shape), xv, create_graph=True, strict=True)
    if not isinstance(g, Tensor):
        return np.zeros(xv.shape + xv.shape)
    n = g.size
    rows = []
    for i in range(n):
        seed = np.zeros(n)
        seed[i] = 1.0
        rows.append(tape.vjp(g, seed.reshape(g.shape), xv))
    return np.stack(rows, axis=0).reshape(xv.shape + xv.shape)


def elementwise_second_derivative(f: Callable, x):
    """``f''`` at every entry of ``x`` for an elementwise function ``f``."""
    tape, xv = _as_variable(x)
    out = sum(f(xv))
    g = tape.vjp(out, np.ones(()), xv, create_graph=True, strict=True)
    if not isinstance(g, Tensor):
        return np.zeros(xv.shape)
    return tape.vjp(sum(g), np.ones(()), xv)
