"""Dense tensor values and the tape that records operations for reverse-mode AD.

A :class:`Graph` is a define-by-run tape: while it is active (``with graph:``
or :meth:`Graph.forward`) every primitive in :mod:`ifnet.ops` appends a node.
Outside an active graph the primitives only compute values, which is what the
evaluation paths use.
"""
import math
import threading

import numpy as np

from .errors import BackwardBeforeForward, ShapeMismatch

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _stack():
    if not hasattr(_local, "graphs"):
        _local.graphs = []
    return _local.graphs


def active_graph():
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """A row-major array with an optional gradient accumulator."""

    __slots__ = ("values", "requires_grad", "grad", "name", "_node")

    def __init__(self, values, requires_grad=False, dtype=None, name=None):
        if isinstance(values, Tensor):
            values = values.values
        if dtype is None:
            arr = np.asarray(values)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.values = np.asarray(values, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if self.requires_grad else None
        self.name = name
        self._node = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self):
        return self.values.size

    def item(self):
        if self.values.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self):
        return self.values

    def zero_grad(self):
        if self.requires_grad:
            self.grad[...] = 0

    def detach(self):
        return Tensor(self.values.copy(), dtype=self.values.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.add_scalar(self, -other)

    def __rsub__(self, other):
        from . import ops
        return ops.add_scalar(ops.scale(self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


class Node:
    __slots__ = ("name", "inputs", "output", "backward", "kink")

    def __init__(self, name, inputs, output, backward, kink):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.kink = kink


class Graph:
    """Tape of recorded primitive operations.

    Backward replays the tape in exact reverse of recording order; the names
    of visited nodes are kept in ``visited`` for inspection.
    """

    def __init__(self):
        self.nodes = []
        self.visited = []
        self._forwarded = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        self._forwarded = True
        return False

    def record(self, name, inputs, output, backward, kink=math.inf):
        if not any(t.requires_grad for t in inputs):
            return output
        output.requires_grad = True
        output.grad = np.zeros_like(output.values)
        node = Node(name, inputs, output, backward, kink)
        output._node = node
        self.nodes.append(node)
        return output

    def forward(self, fn, inputs):
        with self:
            return fn(*inputs)

    def reset(self):
        self.nodes = []
        self.visited = []
        self._forwarded = False

    def kink_margin(self):
        """Smallest distance of any recorded kinked op from its non-differentiable locus."""
        return min((n.kink for n in self.nodes), default=math.inf)

    def backward(self, output, seed=None):
        if not self._forwarded and not self.nodes:
            raise BackwardBeforeForward("backward called before any forward on this graph")
        if seed is None:
            seed = np.ones_like(output.values)
        elif isinstance(seed, Tensor):
            seed = seed.values
        seed = np.asarray(seed, dtype=output.values.dtype)
        if seed.shape != output.shape:
            raise ShapeMismatch("backward-seed", output.shape, seed.shape)
        for node in self.nodes:
            node.output.grad[...] = 0
        if not output.requires_grad:
            return
        output.grad += seed
        self.visited = []
        for node in reversed(self.nodes):
            self.visited.append(node.name)
            grads = node.backward(node.output.grad)
            for inp, g in zip(node.inputs, grads):
                if g is not None and inp.requires_grad:
                    inp.grad += g


def no_grad():
    """Context in which no graph is active (primitives only compute values)."""
    return _NoGrad()


class _NoGrad:
    def __enter__(self):
        stack = _stack()
        self._saved = list(stack)
        stack.clear()

    def __exit__(self, *exc):
        _stack()[:] = self._saved
        return False


# --- text snapshot format -------------------------------------------------

def format_tensor(values):
    """Render an array as ``shape: d0 d1 ...`` followed by a line of values."""
    arr = np.asarray(values)
    fmt = "%.9g" if arr.dtype == np.float32 else "%.17g"
    head = "shape:" + "".join(f" {d}" for d in arr.shape)
    body = " ".join(fmt % v for v in arr.reshape(-1))
    return head + "\n" + body + "\n"


def parse_tensors(lines, dtype=np.float64):
    """Parse consecutive snapshot blocks from an iterable of text lines."""
    out = []
    shape = None
    pending = []
    need = 0
    for raw in lines:
        line = raw.strip()
        if not line:
            continue
        if line.startswith("shape:"):
            if shape is not None:
                raise ValueError(f"snapshot block for shape {shape} is truncated")
            shape = tuple(int(tok) for tok in line[len("shape:"):].split())
            need = int(np.prod(shape)) if shape else 1
            pending = []
            if need == 0:
                out.append(np.zeros(shape, dtype=dtype))
                shape = None
            continue
        if shape is None:
            raise ValueError(f"values without a shape header: {line[:40]!r}")
        pending.extend(float(tok) for tok in line.split())
        if len(pending) > need:
            raise ValueError(f"too many values for shape {shape}")
        if len(pending) == need:
            out.append(np.array(pending, dtype=dtype).reshape(shape))
            shape = None
    if shape is not None:
        raise ValueError(f"snapshot block for shape {shape} is truncated")
    return out


def save_snapshot(path, arrays):
    with open(path, "w") as fh:
        for arr in arrays:
            fh.write(format_tensor(arr))


def load_snapshot(path, dtype=np.float64):
    with open(path) as fh:
        return parse_tensors(fh, dtype=dtype)
