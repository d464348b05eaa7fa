"""Minimal reverse-mode autodiff over numpy arrays.

A ``Tape`` records every operation applied to its ``Node`` objects; calling
``backward`` walks the record in reverse and pushes vector-Jacobian products
back to parameter leaves (written into a ``ParamStore``) and to any input
leaf created with ``requires_grad=True``.

Only what the trajectory model needs is supported: 2-D matmul, elementwise
arithmetic with bias-style broadcasting, ReLU, exp, reductions, concatenation,
reshape and a masked row softmax.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, NumericalError, TapeUsageError

DTYPE = np.float64
CHECKPOINT_MAGIC = b"LBEBM1"


class ParamStore:
    """Ordered, named weight arrays with paired gradient buffers."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, values) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(values, dtype=DTYPE)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)

    def __contains__(self, name):
        return name in self._values

    def __len__(self):
        return len(self._values)

    def __iter__(self):
        return iter(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_value(self, name: str, values) -> None:
        arr = np.asarray(values, dtype=DTYPE)
        if arr.shape != self._values[name].shape:
            raise DimensionError(
                f"parameter {name!r}: shape {arr.shape} != {self._values[name].shape}"
            )
        self._values[name][...] = arr

    def remove(self, name: str) -> None:
        del self._values[name]
        del self._grads[name]

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, v in self._values.items():
            out.add(name, v.copy())
            out._grads[name][...] = self._grads[name]
        return out

    def items(self):
        return self._values.items()

    def num_values(self) -> int:
        return sum(v.size for v in self._values.values())

    def init_dense(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
        """Uniform fan-based init for ``name.W`` and zero bias ``name.b``."""
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        self.add(f"{name}.W", rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        self.add(f"{name}.b", np.zeros(fan_out))

    def init_mlp(self, prefix: str, sizes, rng: np.random.Generator) -> list[str]:
        """Create ``len(sizes) - 1`` dense layers; returns their layer names."""
        names = []
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            name = f"{prefix}.{k}"
            self.init_dense(name, a, b, rng)
            names.append(name)
        return names

    def equal(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self.value(n), other.value(n)) for n in self.names())


# ---------------------------------------------------------------------------
# Tape and nodes
# ---------------------------------------------------------------------------


class Node:
    __slots__ = ("tape", "value", "grad", "parents", "backward_fn", "param_name", "requires_grad",
                 "store")

    def __init__(self, tape, value, parents=(), backward_fn=None, param_name=None, requires_grad=False):
        self.tape = tape
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.param_name = param_name
        self.store = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(shape={self.value.shape})"


class Tape:
    """Records operations so gradients can be pulled back from a scalar."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_leaves: dict[str, Node] = {}

    def __len__(self):
        return len(self.nodes)

    def _record(self, value, parents, backward_fn, **kw) -> Node:
        node = Node(self, value, parents, backward_fn, **kw)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._record(np.asarray(value, dtype=DTYPE), (), None)

    def input(self, value, requires_grad=False) -> Node:
        return self._record(np.array(value, dtype=DTYPE), (), None, requires_grad=requires_grad)

    def param(self, params: ParamStore, name: str) -> Node:
        key = (id(params), name)
        node = self._param_leaves.get(key)
        if node is None:
            if name not in params:
                raise DimensionError(f"unknown parameter {name!r}")
            node = self._record(params.value(name), (), None, param_name=name, requires_grad=True)
            node.store = params
            self._param_leaves[key] = node
        return node

    def backward(self, loss: Node, params: ParamStore | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into leaf ``.grad`` and, if given, ``params`` grads."""
        if loss.tape is not self:
            raise TapeUsageError("loss was not produced on this tape")
        if loss.value.size != 1:
            raise TapeUsageError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        stop = self.nodes.index(loss) if self.nodes[-1] is not loss else len(self.nodes) - 1
        for node in reversed(self.nodes[: stop + 1]):
            g = node.grad
            if g is None:
                continue
            if node.backward_fn is not None:
                for parent, pg in zip(node.parents, node.backward_fn(g)):
                    if pg is None or not isinstance(parent, Node):
                        continue
                    parent.grad = pg if parent.grad is None else parent.grad + pg
            elif node.param_name is not None and params is not None and node.store is params:
                params.grad(node.param_name)[...] += g


def backward(loss: Node, tape: Tape, params: ParamStore | None) -> None:
    tape.backward(loss, params)


def _as_node(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise TapeUsageError("mixing nodes from different tapes")
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TapeUsageError("operation needs at least one Node operand")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    sa, sb = a.value.shape, b.value.shape
    return tape._record(
        a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    sa, sb = a.value.shape, b.value.shape
    return tape._record(
        a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    av, bv = a.value, b.value
    return tape._record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul shapes {a.value.shape} @ {b.value.shape}")
    av, bv = a.value, b.value
    return tape._record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Node) -> Node:
    return a.tape._record(a.value.T, (a,), lambda g: (g.T,))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return a.tape._record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return a.tape._record(out, (a,), lambda g: (g * out,))


def square(a: Node) -> Node:
    av = a.value
    return a.tape._record(av * av, (a,), lambda g: (2.0 * g * av,))


def sum_all(a: Node) -> Node:
    shape = a.value.shape
    return a.tape._record(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_axis(a: Node, axis: int) -> Node:
    shape = a.value.shape
    return a.tape._record(
        a.value.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def mean_all(a: Node) -> Node:
    return mul(sum_all(a), 1.0 / a.value.size)


def reshape(a: Node, shape) -> Node:
    old = a.value.shape
    return a.tape._record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts, axis: int = 1) -> Node:
    tape = _tape_of(*parts)
    nodes = [_as_node(tape, p) for p in parts]
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return tape._record(
        np.concatenate([n.value for n in nodes], axis=axis),
        tuple(nodes),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def masked_softmax(logits: Node, mask: np.ndarray, fill: float = -1e9) -> Node:
    """Row softmax after adding ``fill`` where ``mask`` is 0."""
    z = logits.value + np.where(mask > 0, 0.0, fill)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return logits.tape._record(s, (logits,), back)


def dense(x, layer: str, params: ParamStore, tape: Tape) -> Node:
    x = _as_node(tape, x)
    W = tape.param(params, f"{layer}.W")
    b = tape.param(params, f"{layer}.b")
    if x.value.ndim != 2 or x.value.shape[1] != W.value.shape[0]:
        raise DimensionError(
            f"layer {layer!r} expects input width {W.value.shape[0]}, got shape {x.value.shape}"
        )
    return add(matmul(x, W), b)


def mlp_forward(x, layer_names, params: ParamStore, tape: Tape) -> Node:
    """Dense stack: ReLU after every layer except the last."""
    h = _as_node(tape, x)
    last = len(layer_names) - 1
    for k, name in enumerate(layer_names):
        h = dense(h, name, params, tape)
        if k < last:
            h = relu(h)
    return h


def gaussian_kl_std_normal(mu: Node, log_var: Node) -> Node:
    """Per-row KL(N(mu, exp(log_var)) || N(0, I)); returns shape [n]."""
    terms = exp(log_var) + square(mu) - 1.0 - log_var
    return mul(sum_axis(terms, 1), 0.5)


def gaussian_kl(mu_q: Node, log_var_q: Node, mu_p: Node, log_var_p: Node) -> Node:
    """Per-row KL between diagonal Gaussians q and p; returns shape [n]."""
    ratio = exp(log_var_q - log_var_p)
    diff = mu_q - mu_p
    maha = mul(square(diff), exp(mul(log_var_p, -1.0)))
    terms = ratio + maha - 1.0 - (log_var_q - log_var_p)
    return mul(sum_axis(terms, 1), 0.5)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState, names=None) -> None:
    """Bias-corrected Adam update. Grads are left for the caller to clear."""
    names = params.names() if names is None else list(names)
    for name in names:
        if not np.all(np.isfinite(params.grad(name))):
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in names:
        g = params.grad(name)
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params.value(name)[...] -= update
        if not np.all(np.isfinite(params.value(name))):
            raise NumericalError(f"parameter {name!r} became non-finite after step {t}")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict = field(default_factory=dict)
    worst_index: dict = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [n for n, e in self.max_rel_error.items() if not e <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = []
        for name, err in self.max_rel_error.items():
            flag = "ok" if err <= self.tolerance else "FAIL"
            out.append(f"{flag:4s} {name:32s} max_rel_err={err:.3e} at {self.worst_index[name]}")
        return out


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def analytic_grads(build_loss, params: ParamStore, names) -> dict:
    params.zero_grad()
    tape = Tape()
    loss = build_loss(params, tape)
    tape.backward(loss, params)
    return {n: params.grad(n).copy() for n in names}


def numeric_grad(build_loss, params: ParamStore, name: str, h: float = 1e-5) -> np.ndarray:
    arr = params.value(name)
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(build_loss(params, Tape()).value)
        flat[i] = orig - h
        fm = float(build_loss(params, Tape()).value)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def grad_check(build_loss, params: ParamStore, tolerance: float, names=None, h: float = 1e-5,
               grad_override=None) -> GradCheckReport:
    """Compare backprop gradients of ``build_loss(params, tape)`` to central differences.

    ``grad_override`` maps parameter name to an analytic gradient to check instead
    of the one backprop produces (used for fault injection).
    """
    names = params.names() if names is None else list(names)
    analytic = analytic_grads(build_loss, params, names)
    if grad_override:
        analytic.update(grad_override)
    report = GradCheckReport(tolerance)
    for name in names:
        num = numeric_grad(build_loss, params, name, h)
        err = relative_error(analytic[name], num)
        idx = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
        report.worst_index[name] = tuple(int(i) for i in idx)
    params.zero_grad()
    return report


# ---------------------------------------------------------------------------
# Checkpoint framing
# ---------------------------------------------------------------------------


def encode_arrays(entries) -> bytes:
    """Frame ``(name, array)`` pairs as magic, count, then name/rank/shape/float32 data."""
    entries = list(entries)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_arrays(blob: bytes) -> list[tuple[str, np.ndarray]]:
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError("bad checkpoint magic")
    pos = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise DataError("truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out = []
    for _ in range(count):
        (nlen,) = take("<I")
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        if pos + 4 * n > len(blob):
            raise DataError("truncated checkpoint")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
        out.append((name, arr))
    if pos != len(blob):
        raise DataError("trailing bytes in checkpoint")
    return out


def save_checkpoint(params: ParamStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_arrays(params.items()))


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as fh:
        entries = decode_arrays(fh.read())
    params = ParamStore()
    for name, arr in entries:
        params.add(name, arr.astype(DTYPE))
    return params
