"""Tape-based reverse-mode automatic differentiation on dense float64 arrays.

Every operation appends a node to a Tape; node inputs always reference earlier
node ids, so the tape is topologically ordered by construction. Adjoint sweeps
build their computation out of the same differentiable ops, which is what makes
double backprop (gradients of expressions containing gradients) work: call
backward() with create_graph=True and differentiate the returned tensors again.

Conventions fixed here and relied on elsewhere: float64 only, relu'(0) = 0.
"""

from __future__ import annotations

import numpy as np

from . import _kernels


class GraphError(Exception):
    """Structural misuse of a tape: bad node id, cross-tape operands."""


class Node:
    __slots__ = ("op", "inputs", "value", "ctx", "sweep")

    def __init__(self, op, inputs, value, ctx, sweep):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.ctx = ctx
        self.sweep = sweep


class Tape:
    """Append-only operation record with cached forward values."""

    __slots__ = ("nodes", "_sweeps", "_active_sweep")

    def __init__(self):
        self.nodes = []
        self._sweeps = 0
        self._active_sweep = None

    def _append(self, op, inputs, value, ctx=None):
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(Node(op, inputs, value, ctx, self._active_sweep))
        return Tensor(self, len(self.nodes) - 1)

    def tensor(self, data):
        """Register a leaf (input, parameter, or constant). The array is
        borrowed, not copied: callers must not mutate it in place afterwards."""
        return self._append("leaf", (), np.asarray(data, dtype=np.float64))

    const = tensor

    def node(self, nid):
        if not (0 <= nid < len(self.nodes)):
            raise GraphError(f"node id {nid} not on tape of size {len(self.nodes)}")
        return self.nodes[nid]


class Tensor:
    """Handle to one tape node; the array itself lives in the node record."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape, nid):
        self.tape = tape
        self.nid = nid

    @property
    def value(self):
        return self.tape.nodes[self.nid].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def _lift(self, other):
        if isinstance(other, Tensor):
            if other.tape is not self.tape:
                raise GraphError("operands live on different tapes")
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(nid={self.nid}, shape={self.shape})"


# ---------------------------------------------------------------------------
# forward rules (pure: value from input values + ctx; reused by replay())

def _fwd(op, vals, ctx):
    if op == "add":
        return vals[0] + vals[1]
    if op == "sub":
        return vals[0] - vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    if op == "div":
        return vals[0] / vals[1]
    if op == "neg":
        return -vals[0]
    if op == "matmul":
        return vals[0] @ vals[1]
    if op == "relu":
        return np.maximum(vals[0], 0.0)
    if op == "relu_grad":
        return np.where(vals[0] > 0.0, vals[1], 0.0)
    if op == "exp":
        return np.exp(vals[0])
    if op == "log":
        return np.log(vals[0])
    if op == "sqrt":
        return np.sqrt(vals[0])
    if op == "sum":
        axis, keepdims = ctx
        return np.asarray(np.sum(vals[0], axis=axis, keepdims=keepdims))
    if op == "max_detached":
        axis, keepdims = ctx
        return np.asarray(np.max(vals[0], axis=axis, keepdims=keepdims))
    if op == "reshape":
        return np.ascontiguousarray(vals[0]).reshape(ctx)
    if op == "transpose":
        return np.ascontiguousarray(np.transpose(vals[0], ctx))
    if op == "broadcast_to":
        return np.ascontiguousarray(np.broadcast_to(vals[0], ctx))
    if op == "conv2d":
        return _kernels.conv_fwd(vals[0], vals[1], ctx[0])
    if op == "conv2d_gx":
        stride, h, wd = ctx
        return _kernels.conv_bwd_input(vals[0], vals[1], stride, h, wd)
    if op == "conv2d_gw":
        stride, kh, kw = ctx
        return _kernels.conv_bwd_weight(vals[0], vals[1], stride, kh, kw)
    raise GraphError(f"unknown op kind {op!r}")


def _record(tape, op, inputs, ctx=None):
    vals = [tape.nodes[t.nid].value for t in inputs]
    return tape._append(op, tuple(t.nid for t in inputs), _fwd(op, vals, ctx), ctx)


def add(a, b):
    return _record(a.tape, "add", (a, b))


def sub(a, b):
    return _record(a.tape, "sub", (a, b))


def mul(a, b):
    return _record(a.tape, "mul", (a, b))


def div(a, b):
    return _record(a.tape, "div", (a, b))


def neg(a):
    return _record(a.tape, "neg", (a,))


def matmul(a, b):
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise GraphError("matmul supports 2-D operands only")
    return _record(a.tape, "matmul", (a, b))


def relu(a):
    return _record(a.tape, "relu", (a,))


def relu_grad(x, g):
    """g gated by the relu activity mask of x (one fused pass)."""
    return _record(x.tape, "relu_grad", (x, g))


def exp(a):
    return _record(a.tape, "exp", (a,))


def log(a):
    return _record(a.tape, "log", (a,))


def sqrt(a):
    return _record(a.tape, "sqrt", (a,))


def tsum(a, axis=None, keepdims=False):
    return _record(a.tape, "sum", (a,), (axis, keepdims))


def max_detached(a, axis=None, keepdims=False):
    """Max treated as a constant in the backward pass (log-sum-exp shift)."""
    return _record(a.tape, "max_detached", (a,), (axis, keepdims))


def reshape(a, shape):
    return _record(a.tape, "reshape", (a,), tuple(shape))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.value.ndim)))
    return _record(a.tape, "transpose", (a,), tuple(axes))


def broadcast_to(a, shape):
    return _record(a.tape, "broadcast_to", (a,), tuple(shape))


def conv2d(x, w, stride=1):
    return _record(x.tape, "conv2d", (x, w), (stride,))


def conv2d_gx(gy, w, stride, h, wd):
    return _record(gy.tape, "conv2d_gx", (gy, w), (stride, h, wd))


def conv2d_gw(gy, x, stride, kh, kw):
    return _record(gy.tape, "conv2d_gw", (gy, x), (stride, kh, kw))


def mean(a):
    n = a.value.size
    return tsum(a) * (1.0 / n)


# ---------------------------------------------------------------------------
# adjoint rules, each expressed with the ops above so they are differentiable

def _unbroadcast(g, target_shape):
    """Reduce an adjoint back to the shape of a broadcast operand."""
    if g.shape == tuple(target_shape):
        return g
    extra = len(g.shape) - len(target_shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, (got, want) in enumerate(zip(g.shape, target_shape))
                 if want == 1 and got != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != tuple(target_shape):
        g = reshape(g, target_shape)
    return g


def _in(tape, node, i):
    return Tensor(tape, node.inputs[i])


def _vjp(tape, nid, g, need):
    """Adjoint contributions of node nid given its output adjoint g.

    need[i] says whether input i lies on a path to a requested tensor;
    contributions that are not needed are skipped entirely.
    """
    node = tape.nodes[nid]
    op = node.op
    out = []
    if op == "add":
        a, b = _in(tape, node, 0), _in(tape, node, 1)
        if need[0]:
            out.append((a.nid, _unbroadcast(g, a.shape)))
        if need[1]:
            out.append((b.nid, _unbroadcast(g, b.shape)))
    elif op == "sub":
        a, b = _in(tape, node, 0), _in(tape, node, 1)
        if need[0]:
            out.append((a.nid, _unbroadcast(g, a.shape)))
        if need[1]:
            out.append((b.nid, _unbroadcast(neg(g), b.shape)))
    elif op == "mul":
        a, b = _in(tape, node, 0), _in(tape, node, 1)
        if need[0]:
            out.append((a.nid, _unbroadcast(mul(g, b), a.shape)))
        if need[1]:
            out.append((b.nid, _unbroadcast(mul(g, a), b.shape)))
    elif op == "div":
        a, b = _in(tape, node, 0), _in(tape, node, 1)
        if need[0]:
            out.append((a.nid, _unbroadcast(div(g, b), a.shape)))
        if need[1]:
            out.append((b.nid, _unbroadcast(neg(div(mul(g, a), mul(b, b))),
                                            b.shape)))
    elif op == "neg":
        out.append((node.inputs[0], neg(g)))
    elif op == "matmul":
        a, b = _in(tape, node, 0), _in(tape, node, 1)
        if need[0]:
            out.append((a.nid, matmul(g, transpose(b))))
        if need[1]:
            out.append((b.nid, matmul(transpose(a), g)))
    elif op == "relu":
        a = _in(tape, node, 0)
        out.append((a.nid, relu_grad(a, g)))
    elif op == "relu_grad":
        # the mask is constant a.e. (relu'' = 0, relu'(0) = 0), so nothing
        # flows to the mask input; the carried gradient is gated again
        if need[1]:
            out.append((node.inputs[1], relu_grad(_in(tape, node, 0), g)))
    elif op == "exp":
        out.append((node.inputs[0], mul(g, Tensor(tape, nid))))
    elif op == "log":
        out.append((node.inputs[0], div(g, _in(tape, node, 0))))
    elif op == "sqrt":
        # tiny floor keeps the adjoint finite at sqrt(0); bitwise inert
        # for any argument a normal gradient meets
        guard = add(Tensor(tape, nid), tape.const(1e-150))
        out.append((node.inputs[0], div(mul(g, tape.const(0.5)), guard)))
    elif op == "sum":
        a = _in(tape, node, 0)
        axis, keepdims = node.ctx
        gk = g
        if axis is None:
            gk = reshape(g, (1,) * a.value.ndim) if a.value.ndim else g
        elif not keepdims:
            kept = list(a.shape)
            for ax in (axis if isinstance(axis, tuple) else (axis,)):
                kept[ax] = 1
            gk = reshape(g, kept)
        out.append((a.nid, broadcast_to(gk, a.shape)))
    elif op == "max_detached":
        pass
    elif op == "reshape":
        a = _in(tape, node, 0)
        out.append((a.nid, reshape(g, a.shape)))
    elif op == "transpose":
        inv = tuple(np.argsort(node.ctx))
        out.append((node.inputs[0], transpose(g, inv)))
    elif op == "broadcast_to":
        a = _in(tape, node, 0)
        out.append((a.nid, _unbroadcast(g, a.shape)))
    elif op == "conv2d":
        x, w = _in(tape, node, 0), _in(tape, node, 1)
        stride = node.ctx[0]
        if need[0]:
            _, _, h, wd = x.shape
            out.append((x.nid, conv2d_gx(g, w, stride, h, wd)))
        if need[1]:
            _, _, kh, kw = w.shape
            out.append((w.nid, conv2d_gw(g, x, stride, kh, kw)))
    elif op == "conv2d_gx":
        gy, w = _in(tape, node, 0), _in(tape, node, 1)
        stride = node.ctx[0]
        if need[0]:
            out.append((gy.nid, conv2d(g, w, stride)))
        if need[1]:
            _, _, kh, kw = w.shape
            out.append((w.nid, conv2d_gw(gy, g, stride, kh, kw)))
    elif op == "conv2d_gw":
        gy, x = _in(tape, node, 0), _in(tape, node, 1)
        stride, kh, kw = node.ctx
        if need[0]:
            out.append((gy.nid, conv2d(x, g, stride)))
        if need[1]:
            _, _, h, wd = x.shape
            out.append((x.nid, conv2d_gx(gy, g, stride, h, wd)))
    else:
        raise GraphError(f"no adjoint rule for op kind {node.op!r}")
    return out


class BackwardResult:
    """Adjoints for the requested tensors plus bookkeeping for cost accounting.

    sweeps_crossed counts how many previously recorded adjoint sweeps this
    sweep differentiated through (> 0 only for double backprop).
    """

    __slots__ = ("grads", "sweeps_crossed")

    def __init__(self, grads, sweeps_crossed):
        self.grads = grads
        self.sweeps_crossed = sweeps_crossed


def backward(root, wrt, create_graph=False):
    """Reverse sweep from a scalar root; returns adjoints aligned with wrt.

    With create_graph=True the sweep is tagged on the tape so that a later
    backward over the returned tensors is recognized as second order.
    """
    tape = root.tape
    if root.value.size != 1:
        raise ValueError("backward root must be scalar-valued")
    reachable = set()
    stack = [root.nid]
    while stack:
        nid = stack.pop()
        if nid in reachable:
            continue
        reachable.add(nid)
        stack.extend(tape.nodes[nid].inputs)
    # nodes through which a requested tensor is reachable; adjoints are only
    # propagated along these, the rest of the graph is dead for this sweep
    for t in wrt:
        if t.tape is not tape:
            raise GraphError("wrt tensor lives on a different tape")
    live = {t.nid for t in wrt}
    for nid in sorted(reachable):
        if any(i in live for i in tape.nodes[nid].inputs):
            live.add(nid)
    crossed = {tape.nodes[n].sweep for n in reachable & live} - {None}

    prev_sweep = tape._active_sweep
    if create_graph:
        tape._sweeps += 1
        tape._active_sweep = tape._sweeps
    try:
        adjoint = {root.nid: tape.const(np.ones_like(root.value))}
        for nid in range(root.nid, -1, -1):
            if nid not in adjoint or nid not in live:
                continue
            node = tape.nodes[nid]
            if node.op == "leaf":
                continue
            need = tuple(i in live for i in node.inputs)
            for in_nid, contrib in _vjp(tape, nid, adjoint[nid], need):
                if in_nid in adjoint:
                    adjoint[in_nid] = add(adjoint[in_nid], contrib)
                else:
                    adjoint[in_nid] = contrib
        grads = []
        for t in wrt:
            g = adjoint.get(t.nid)
            grads.append(g if g is not None
                         else tape.const(np.zeros_like(t.value)))
    finally:
        tape._active_sweep = prev_sweep
    return BackwardResult(grads, len(crossed))


def forward_eval(tape, nid):
    """Cached value of a node; raises GraphError on an invalid id."""
    return tape.node(nid).value


def replay(tape):
    """Recompute every node value from the recorded ops, in tape order."""
    values = []
    for node in tape.nodes:
        if node.op == "leaf":
            values.append(node.value.copy())
        else:
            values.append(np.asarray(_fwd(node.op, [values[i] for i in node.inputs],
                                          node.ctx), dtype=np.float64))
    return values


def finite_diff_gradient(f, x, h=1e-5):
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g
