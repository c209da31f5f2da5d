"""
Dense float64 values and a reverse-mode differentiation kernel.

Values are plain numpy arrays (rank-0 for scalars). Each operator is an OpSpec
registered in OPS with a numpy forward rule and a vector-Jacobian product. VJP
rules are written against an ops namespace ``F`` instead of numpy directly:
with ``NUMERIC`` they evaluate immediately, with a ``TapeContext`` they record
themselves onto the tape, which is how second-order products are built.
"""

import functools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, log_expit, log_softmax, softmax

from constants import DEFAULTS, checked_mode
from errors import (GraphLoadError, IncompleteTrace, NonFiniteError,
                    SecondOrderUnsupported, ShapeError, UnknownNode, UnknownOp)

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


def as_value(x) -> np.ndarray:
    """Coerce to a float64 ndarray (rank-0 for scalars)."""
    return np.asarray(x, dtype=np.float64)


def _check_finite(out: np.ndarray, what: str):
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{what} produced a non-finite value")


@dataclass(frozen=True)
class OpSpec:
    name: str
    arity: Optional[int]  # None means variadic
    forward: Callable[..., Any]
    vjp: Optional[Callable]
    shape: Callable[[List[Shape], Dict[str, Any]], Shape]
    # Per argument; for variadic ops the last flag covers the remaining arguments.
    differentiable: Tuple[bool, ...] = ()
    second_order: bool = True
    attr_parser: Optional[Callable[[List[str]], Dict[str, Any]]] = None
    min_arity: int = 1
    description: str = ""

    def is_differentiable(self, position: int) -> bool:
        if self.vjp is None or not self.differentiable:
            return False
        if position < len(self.differentiable):
            return self.differentiable[position]
        return self.arity is None and self.differentiable[-1]

    def check_arity(self, n: int):
        if self.arity is not None and n != self.arity:
            raise ShapeError(f"op '{self.name}' takes {self.arity} argument(s), got {n}")
        if self.arity is None and n < self.min_arity:
            raise ShapeError(f"op '{self.name}' takes at least {self.min_arity} argument(s), got {n}")

    def infer_shape(self, arg_shapes: Sequence[Shape], attrs: Dict[str, Any]) -> Shape:
        self.check_arity(len(arg_shapes))
        try:
            return tuple(self.shape([tuple(s) for s in arg_shapes], attrs))
        except ShapeError as exc:
            raise ShapeError(f"op '{self.name}': {exc}") from None

    def describe(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "arity": self.arity,
            "differentiable": list(self.differentiable) if self.vjp is not None else [],
            "second_order": self.second_order,
            "attributes": self.attr_parser is not None,
            "description": self.description,
        }


OPS: Dict[str, OpSpec] = {}


def get_op(name: str) -> OpSpec:
    try:
        return OPS[name]
    except KeyError:
        raise UnknownOp(f"unknown op '{name}'") from None


def register_op(name: str, forward: Callable, vjp: Optional[Callable] = None, arity: Optional[int] = 1,
                shape: Optional[Callable] = None, differentiable: Optional[Sequence[bool]] = None,
                second_order: bool = False, attr_parser: Optional[Callable] = None,
                description: str = "", replace: bool = False) -> OpSpec:
    """
    Add an operator to the registry.

    ``vjp(F, g, args, out, attrs)`` returns one gradient (or None) per argument.
    Pass ``second_order=True`` only when the rule is written entirely with ``F``
    ops, so that it can be recorded onto a tape.
    """
    if name in OPS and not replace:
        raise ValueError(f"op '{name}' is already registered")
    if differentiable is None:
        differentiable = (vjp is not None,) * (arity if arity is not None else 1)
    spec = OpSpec(name=name, arity=arity, forward=forward, vjp=vjp, shape=shape or _same_shape,
                  differentiable=tuple(bool(d) for d in differentiable), second_order=second_order,
                  attr_parser=attr_parser, description=description)
    OPS[name] = spec
    return spec


def parse_op(text: str) -> Tuple[OpSpec, Dict[str, Any]]:
    """Parse a graph-file op string such as ``"pow:3"`` or ``"slice:0:2"``."""
    name, *raw = text.split(":")
    spec = get_op(name)
    if spec.attr_parser is None:
        if raw:
            raise GraphLoadError(f"op '{name}' takes no attributes")
        return spec, {}
    try:
        return spec, spec.attr_parser(raw)
    except (ValueError, IndexError):
        raise GraphLoadError(f"bad attributes for op '{name}': {':'.join(raw)!r}") from None


# ---------------------------------------------------------------------------
# Ops namespaces

class NumericOps:
    """Evaluates ops immediately on numpy arrays."""

    def __init__(self, checked: bool = False):
        self.checked = checked

    def apply(self, name: str, *args, **attrs) -> np.ndarray:
        spec = get_op(name)
        out = as_value(spec.forward(*[as_value(a) for a in args], **attrs))
        if self.checked:
            _check_finite(out, f"op '{name}'")
        return out

    def const(self, value) -> np.ndarray:
        return as_value(value)

    def __getattr__(self, name):
        if name.startswith("_"):
            raise AttributeError(name)
        return functools.partial(self.apply, name)


NUMERIC = NumericOps()


class TapeVar:
    """Handle to one value slot on a Tape."""

    __slots__ = ("tape", "slot")

    def __init__(self, tape: "Tape", slot: int):
        self.tape = tape
        self.slot = slot

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.slot]

    @property
    def shape(self) -> Shape:
        return self.tape.values[self.slot].shape

    def __repr__(self):
        return f"TapeVar(slot={self.slot}, shape={self.shape})"


class TapeContext:
    """Ops namespace that records every op onto a tape."""

    def __init__(self, tape: "Tape"):
        self.tape = tape

    def apply(self, name: str, *args, **attrs) -> TapeVar:
        return self.tape.record(name, [self.wrap(a) for a in args], attrs)

    def wrap(self, x) -> TapeVar:
        if isinstance(x, TapeVar):
            if x.tape is not self.tape:
                raise ValueError("value belongs to a different tape")
            return x
        return self.tape.const(x)

    def const(self, value) -> TapeVar:
        return self.tape.const(value)

    def __getattr__(self, name):
        if name.startswith("_"):
            raise AttributeError(name)
        return functools.partial(self.apply, name)


@dataclass(frozen=True)
class TapeEntry:
    kind: str  # 'leaf', 'const' or 'op'
    op: Optional[OpSpec] = None
    args: Tuple[int, ...] = ()
    attrs: Dict[str, Any] = field(default_factory=dict)
    node: Optional[int] = None


class Tape:
    """Ordered record of executed ops and their output values."""

    def __init__(self, checked: Optional[bool] = None):
        self.checked = checked_mode() if checked is None else checked
        self.values: List[np.ndarray] = []
        self.entries: List[TapeEntry] = []
        self.node_slots: Dict[int, int] = {}

    def __len__(self):
        return len(self.entries)

    @property
    def ops(self) -> TapeContext:
        return TapeContext(self)

    def var(self, slot: int) -> TapeVar:
        return TapeVar(self, slot)

    def node_var(self, node: int) -> TapeVar:
        try:
            return TapeVar(self, self.node_slots[node])
        except KeyError:
            raise UnknownNode(f"node {node} is not on the tape") from None

    def _append(self, entry: TapeEntry, value: np.ndarray) -> TapeVar:
        self.entries.append(entry)
        self.values.append(value)
        slot = len(self.entries) - 1
        if entry.node is not None:
            self.node_slots[entry.node] = slot
        return TapeVar(self, slot)

    def leaf(self, value, node: Optional[int] = None) -> TapeVar:
        return self._append(TapeEntry(kind="leaf", node=node), as_value(value))

    def const(self, value) -> TapeVar:
        return self._append(TapeEntry(kind="const"), as_value(value))

    def record(self, name: str, args: Sequence[TapeVar], attrs: Optional[Dict[str, Any]] = None,
               node: Optional[int] = None) -> TapeVar:
        spec = get_op(name)
        attrs = dict(attrs or {})
        slots = tuple(a.slot for a in args)
        out = as_value(spec.forward(*[self.values[s] for s in slots], **attrs))
        if self.checked:
            where = f"op '{name}'" + (f" at node {node}" if node is not None else "")
            _check_finite(out, where)
        return self._append(TapeEntry(kind="op", op=spec, args=slots, attrs=attrs, node=node), out)

    def replay(self, overrides: Optional[Dict[int, Any]] = None) -> List[np.ndarray]:
        """Re-run every recorded op forward, optionally replacing leaf/const values."""
        overrides = overrides or {}
        values: List[np.ndarray] = []
        for slot, entry in enumerate(self.entries):
            if entry.op is None:
                values.append(as_value(overrides.get(slot, self.values[slot])))
            else:
                values.append(as_value(entry.op.forward(*[values[a] for a in entry.args], **entry.attrs)))
        return values


# ---------------------------------------------------------------------------
# Reverse mode

def _requires_grad(tape: Tape, wrt: Optional[Sequence[int]], n: int) -> Optional[List[bool]]:
    if wrt is None:
        return None
    targets = set(wrt)
    needed = [False] * n
    for slot in range(n):
        entry = tape.entries[slot]
        needed[slot] = slot in targets or (entry.op is not None and any(needed[a] for a in entry.args))
    return needed


def backward_slots(tape: Tape, seeds: Dict[int, Any], wrt: Optional[Sequence[int]] = None,
                   create_graph: bool = False) -> Dict[int, Any]:
    """
    Reverse accumulation over the tape, seeded at the given slots.

    Returns slot -> adjoint for every slot that received one. With ``wrt``,
    only slots that depend on those slots are propagated into. With
    ``create_graph`` the adjoints are TapeVars recorded on the same tape, so
    they can be differentiated again.
    """
    n = len(tape.entries)
    needed = _requires_grad(tape, wrt, n)
    F = tape.ops if create_graph else NUMERIC
    adj: Dict[int, Any] = {}

    for slot, seed in seeds.items():
        if not isinstance(seed, TapeVar):
            seed = as_value(seed)
            if seed.shape != tape.values[slot].shape:
                raise ShapeError(f"seed shape {seed.shape} does not match value shape {tape.values[slot].shape}")
            if create_graph:
                seed = tape.const(seed)
        adj[slot] = seed if slot not in adj else F.add(adj[slot], seed)

    for slot in range(n - 1, -1, -1):
        g = adj.get(slot)
        entry = tape.entries[slot]
        if g is None or entry.op is None or entry.op.vjp is None:
            continue
        if needed is not None and not any(needed[a] for a in entry.args):
            continue
        if create_graph:
            if not entry.op.second_order:
                raise SecondOrderUnsupported(f"op '{entry.op.name}' has no second-order rule")
            args = [tape.var(a) for a in entry.args]
            out = tape.var(slot)
        else:
            args = [tape.values[a] for a in entry.args]
            out = tape.values[slot]
        grads = entry.op.vjp(F, g, args, out, entry.attrs)
        for position, (arg, grad) in enumerate(zip(entry.args, grads)):
            if grad is None or not entry.op.is_differentiable(position):
                continue
            if needed is not None and not needed[arg]:
                continue
            adj[arg] = grad if arg not in adj else F.add(adj[arg], grad)
    return adj


def backward(tape: Tape, seeds: Dict[int, Any], wrt: Optional[Sequence[int]] = None) -> Dict[int, np.ndarray]:
    """
    Node-level reverse pass: gradient of sum(seed * node) for every node on the tape.
    Nodes that receive no adjoint get zeros of their shape.
    """
    slot_seeds = {}
    for node, seed in seeds.items():
        slot_seeds[tape.node_var(node).slot] = seed
    wrt_slots = None if wrt is None else [tape.node_var(w).slot for w in wrt]
    adj = backward_slots(tape, slot_seeds, wrt=wrt_slots)
    return {node: as_value(adj[slot]) if slot in adj else np.zeros_like(tape.values[slot])
            for node, slot in tape.node_slots.items()}


def forward_eval(graph, inputs: Dict[int, Any], stochastic_values: Optional[Dict[int, Any]] = None,
                 checked: Optional[bool] = None) -> Tape:
    """
    Evaluate every deterministic and cost node in topological order onto a new tape.

    Input and stochastic nodes become leaves; stochastic values usually come
    from a Trace.
    """
    stochastic_values = stochastic_values or {}
    tape = Tape(checked)
    for nid in graph.topo_order:
        node = graph.nodes[nid]
        if node.is_input or node.is_stochastic:
            source = inputs if node.is_input else stochastic_values
            if nid not in source:
                kind = "input" if node.is_input else "stochastic"
                raise IncompleteTrace(f"no value for {kind} node {node.label}")
            tape.leaf(conform(source[nid], node.shape, node.label), node=nid)
        else:
            tape.record(node.op.name, [tape.node_var(p) for p in node.parents], node.attrs, node=nid)
    return tape


def conform(value, shape: Shape, label: str = "value") -> np.ndarray:
    value = as_value(value)
    if value.shape != tuple(shape):
        raise ShapeError(f"{label}: expected shape {tuple(shape)}, got {value.shape}")
    return value


def finite_difference(f: Callable[[np.ndarray], Any], x, h: Optional[float] = None) -> np.ndarray:
    """Central-difference derivative of f at x, component-wise; shape x.shape + f(x).shape."""
    h = DEFAULTS["fd_step"] if h is None else h
    x = as_value(x)
    base = as_value(f(x.copy()))
    result = np.zeros(x.shape + base.shape)
    for idx in np.ndindex(*x.shape):
        plus, minus = x.copy(), x.copy()
        plus[idx] += h
        minus[idx] -= h
        result[idx] = (as_value(f(plus)) - as_value(f(minus))) / (2.0 * h)
    return result


# ---------------------------------------------------------------------------
# Shape rules and attribute parsers

def _same_shape(shapes, attrs):
    return shapes[0]


def _scalar_shape(shapes, attrs):
    return ()


def _broadcast_shape(shapes, attrs):
    result = ()
    for s in shapes:
        if s == () or s == result:
            continue
        if result == ():
            result = s
            continue
        raise ShapeError(f"cannot broadcast {result} with {s} (only scalar-tensor broadcasting)")
    return result


def _equal_shapes(shapes, attrs):
    if any(s != shapes[0] for s in shapes):
        raise ShapeError(f"argument shapes differ: {shapes}")
    return shapes[0]


def _summed_pair_shape(shapes, attrs):
    _equal_shapes(shapes, attrs)
    return ()


def _vector_shape(shapes, attrs):
    if len(shapes[0]) != 1:
        raise ShapeError(f"expected a vector, got shape {shapes[0]}")
    return shapes[0]


def _dot_shape(shapes, attrs):
    a, b = shapes
    if len(a) != 1 or a != b:
        raise ShapeError(f"dot needs two vectors of equal length, got {a} and {b}")
    return ()


def _matvec_shape(shapes, attrs):
    w, x = shapes
    if len(w) != 2 or len(x) != 1 or w[1] != x[0]:
        raise ShapeError(f"cannot multiply matrix {w} by vector {x}")
    return (w[0],)


def _vecmat_shape(shapes, attrs):
    x, w = shapes
    if len(w) != 2 or len(x) != 1 or w[0] != x[0]:
        raise ShapeError(f"cannot multiply vector {x} by matrix {w}")
    return (w[1],)


def _outer_shape(shapes, attrs):
    a, b = shapes
    if len(a) != 1 or len(b) != 1:
        raise ShapeError(f"outer needs two vectors, got {a} and {b}")
    return (a[0], b[0])


def _matmul_shape(shapes, attrs):
    a, b = shapes
    if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
        raise ShapeError(f"cannot multiply {a} by {b}")
    return (a[0], b[1])


def _transpose_shape(shapes, attrs):
    if len(shapes[0]) != 2:
        raise ShapeError(f"transpose needs a matrix, got {shapes[0]}")
    return shapes[0][::-1]


def _affine_shape(shapes, attrs):
    w, x, b = shapes
    if w == () and x == () and b == ():
        return ()
    out = _matvec_shape([w, x], attrs)
    if b not in ((), out):
        raise ShapeError(f"bias shape {b} does not match output {out}")
    return out


def _concat_shape(shapes, attrs):
    if any(len(s) > 1 for s in shapes):
        raise ShapeError(f"concat takes scalars and vectors, got {shapes}")
    return (sum(s[0] if s else 1 for s in shapes),)


def _slice_shape(shapes, attrs):
    (a,) = shapes
    start, stop = attrs["start"], attrs["stop"]
    if len(a) != 1 or not 0 <= start < stop <= a[0]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for shape {a}")
    return (stop - start,)


def _index_shape(shapes, attrs):
    (a,) = shapes
    if len(a) != 1 or not 0 <= attrs["k"] < a[0]:
        raise ShapeError(f"index {attrs['k']} out of range for shape {a}")
    return ()


def _embed_shape(shapes, attrs):
    (a,) = shapes
    size = a[0] if a else 1
    if len(a) > 1 or attrs["start"] + size > attrs["n"]:
        raise ShapeError(f"cannot embed shape {a} at {attrs['start']} in length {attrs['n']}")
    return (attrs["n"],)


def _broadcast_to_shape(shapes, attrs):
    (a,) = shapes
    target = tuple(attrs["shape"])
    if a not in ((), target):
        raise ShapeError(f"cannot broadcast {a} to {target}")
    return target


def _lookup_shape(shapes, attrs):
    table, *idx = shapes
    if any(s != () for s in idx) or len(table) != len(idx):
        raise ShapeError(f"lookup into table {table} needs {len(table)} scalar indices")
    return ()


def _onehot_shape(shapes, attrs):
    if shapes[0] != ():
        raise ShapeError(f"onehot needs a scalar index, got {shapes[0]}")
    return (attrs["n"],)


def _float_attr(name):
    def parse(raw):
        (value,) = raw
        return {name: float(value)}
    return parse


def _int_attrs(*names):
    def parse(raw):
        if len(raw) != len(names):
            raise ValueError(raw)
        return {n: int(v) for n, v in zip(names, raw)}
    return parse


def _shape_attr(raw):
    if not raw:
        raise ValueError(raw)
    return {"shape": tuple(int(v) for v in raw)}


# ---------------------------------------------------------------------------
# Forward helpers

def _index_value(x) -> int:
    k = int(np.rint(x))
    if k != x:
        raise ShapeError(f"index {float(x)} is not an integer")
    return k


def _onehot(a, n):
    k = _index_value(a)
    if not 0 <= k < n:
        raise ShapeError(f"onehot index {k} out of range for length {n}")
    out = np.zeros(n)
    out[k] = 1.0
    return out


def _lookup(table, *idx):
    return table[tuple(_index_value(i) for i in idx)]


def _embed(a, start, n):
    out = np.zeros(n)
    flat = np.atleast_1d(a)
    out[start:start + flat.shape[0]] = flat
    return out


def _affine(w, x, b):
    if w.ndim == 2:
        return w @ x + b
    return w * x + b


def _bernoulli_loglik(logits, value):
    return np.sum(value * logits + log_expit(-logits))


# ---------------------------------------------------------------------------
# VJP rules

def _unbroadcast(F, g, shape):
    if shape == () and g.shape != ():
        return F.sum(g)
    return g


def _vjp_add(F, g, args, out, attrs):
    a, b = args
    return _unbroadcast(F, g, a.shape), _unbroadcast(F, g, b.shape)


def _vjp_sub(F, g, args, out, attrs):
    a, b = args
    return _unbroadcast(F, g, a.shape), _unbroadcast(F, F.neg(g), b.shape)


def _vjp_mul(F, g, args, out, attrs):
    a, b = args
    return _unbroadcast(F, F.mul(g, b), a.shape), _unbroadcast(F, F.mul(g, a), b.shape)


def _vjp_div(F, g, args, out, attrs):
    a, b = args
    return (_unbroadcast(F, F.div(g, b), a.shape),
            _unbroadcast(F, F.neg(F.div(F.mul(g, out), b)), b.shape))


def _vjp_affine(F, g, args, out, attrs):
    w, x, b = args
    if len(w.shape) == 2:
        return F.outer(g, x), F.vecmat(g, w), _unbroadcast(F, g, b.shape)
    return F.mul(g, x), F.mul(g, w), g


def _vjp_concat(F, g, args, out, attrs):
    grads = []
    offset = 0
    for a in args:
        if a.shape == ():
            grads.append(F.index(g, k=offset))
            offset += 1
        else:
            grads.append(F.slice(g, start=offset, stop=offset + a.shape[0]))
            offset += a.shape[0]
    return tuple(grads)


def _vjp_embed(F, g, args, out, attrs):
    (a,) = args
    start = attrs["start"]
    if a.shape == ():
        return (F.index(g, k=start),)
    return (F.slice(g, start=start, stop=start + a.shape[0]),)


def _vjp_broadcast(F, g, args, out, attrs):
    (a,) = args
    return (F.sum(g),) if a.shape == () else (g,)


def _vjp_reparam(F, g, args, out, attrs):
    mu, sigma, eps = args
    return (_unbroadcast(F, g, mu.shape),
            _unbroadcast(F, F.mul(g, eps), sigma.shape),
            _unbroadcast(F, F.mul(g, sigma), eps.shape))


def _vjp_reparam_logsigma(F, g, args, out, attrs):
    mu, log_sigma, eps = args
    sigma = F.exp(log_sigma)
    return (_unbroadcast(F, g, mu.shape),
            _unbroadcast(F, F.mul(g, F.mul(eps, sigma)), log_sigma.shape),
            _unbroadcast(F, F.mul(g, sigma), eps.shape))


def _builtin(name, arity, forward, vjp, shape, differentiable=None, attr_parser=None, min_arity=1,
             description=""):
    if differentiable is None:
        differentiable = (vjp is not None,) * (arity if arity else 1)
    OPS[name] = OpSpec(name=name, arity=arity, forward=forward, vjp=vjp, shape=shape,
                       differentiable=tuple(differentiable), second_order=True,
                       attr_parser=attr_parser, min_arity=min_arity, description=description)


# Elementwise arithmetic
_builtin("add", 2, np.add, _vjp_add, _broadcast_shape)
_builtin("sub", 2, np.subtract, _vjp_sub, _broadcast_shape)
_builtin("mul", 2, np.multiply, _vjp_mul, _broadcast_shape)
_builtin("div", 2, np.divide, _vjp_div, _broadcast_shape)
_builtin("neg", 1, np.negative, lambda F, g, args, out, attrs: (F.neg(g),), _same_shape)
_builtin("exp", 1, np.exp, lambda F, g, args, out, attrs: (F.mul(g, out),), _same_shape)
_builtin("log", 1, np.log, lambda F, g, args, out, attrs: (F.div(g, args[0]),), _same_shape)
_builtin("sqrt", 1, np.sqrt,
         lambda F, g, args, out, attrs: (F.div(g, F.scale(out, c=2.0)),), _same_shape)
_builtin("square", 1, np.square,
         lambda F, g, args, out, attrs: (F.mul(g, F.scale(args[0], c=2.0)),), _same_shape)
_builtin("pow", 1, lambda a, p: np.power(a, p),
         lambda F, g, args, out, attrs: (F.mul(g, F.scale(F.pow(args[0], p=attrs["p"] - 1.0), c=attrs["p"])),),
         _same_shape, attr_parser=_float_attr("p"), description="x ** p for a constant p")
_builtin("shift", 1, lambda a, c: a + c, lambda F, g, args, out, attrs: (g,), _same_shape,
         attr_parser=_float_attr("c"), description="x + c for a constant c")
_builtin("scale", 1, lambda a, c: a * c, lambda F, g, args, out, attrs: (F.scale(g, c=attrs["c"]),),
         _same_shape, attr_parser=_float_attr("c"), description="x * c for a constant c")
_builtin("identity", 1, np.copy, lambda F, g, args, out, attrs: (g,), _same_shape)
_builtin("const", 0, lambda value: np.float64(value), None, _scalar_shape, differentiable=(),
         attr_parser=_float_attr("value"), description="constant scalar")

# Nonlinearities
_builtin("sigmoid", 1, expit,
         lambda F, g, args, out, attrs: (F.mul(g, F.mul(out, F.sub(1.0, out))),), _same_shape)
_builtin("log_sigmoid", 1, log_expit,
         lambda F, g, args, out, attrs: (F.mul(g, F.sigmoid(F.neg(args[0]))),), _same_shape)
_builtin("tanh", 1, np.tanh,
         lambda F, g, args, out, attrs: (F.mul(g, F.sub(1.0, F.square(out))),), _same_shape)
# relu'(0) is taken as 0
_builtin("relu", 1, lambda a: np.maximum(a, 0.0),
         lambda F, g, args, out, attrs: (F.mul(g, F.step(args[0])),), _same_shape)
_builtin("step", 1, lambda a: (a > 0).astype(np.float64), None, _same_shape, differentiable=(False,),
         description="1 where x > 0, else 0; not differentiable")

# Reductions and linear algebra
_builtin("sum", 1, np.sum,
         lambda F, g, args, out, attrs: (F.broadcast(g, shape=args[0].shape),), _scalar_shape)
_builtin("mean", 1, np.mean,
         lambda F, g, args, out, attrs: (F.broadcast(F.scale(g, c=1.0 / max(1, int(np.prod(args[0].shape)))),
                                                     shape=args[0].shape),), _scalar_shape)
_builtin("dot", 2, np.dot, lambda F, g, args, out, attrs: (F.mul(g, args[1]), F.mul(g, args[0])), _dot_shape)
_builtin("matvec", 2, np.matmul,
         lambda F, g, args, out, attrs: (F.outer(g, args[1]), F.vecmat(g, args[0])), _matvec_shape)
_builtin("vecmat", 2, np.matmul,
         lambda F, g, args, out, attrs: (F.matvec(args[1], g), F.outer(args[0], g)), _vecmat_shape)
_builtin("outer", 2, np.outer,
         lambda F, g, args, out, attrs: (F.matvec(g, args[1]), F.vecmat(args[0], g)), _outer_shape)
_builtin("matmul", 2, np.matmul,
         lambda F, g, args, out, attrs: (F.matmul(g, F.transpose(args[1])), F.matmul(F.transpose(args[0]), g)),
         _matmul_shape)
_builtin("transpose", 1, lambda a: a.T.copy(), lambda F, g, args, out, attrs: (F.transpose(g),),
         _transpose_shape)
_builtin("affine", 3, _affine, _vjp_affine, _affine_shape, description="W @ x + b (or w * x + b for scalars)")
_builtin("softmax", 1, softmax,
         lambda F, g, args, out, attrs: (F.mul(out, F.sub(g, F.dot(g, out))),), _vector_shape)
_builtin("log_softmax", 1, log_softmax,
         lambda F, g, args, out, attrs: (F.sub(g, F.mul(F.exp(out), F.sum(g))),), _vector_shape)

# Structural
_builtin("concat", None, lambda *xs: np.concatenate([np.atleast_1d(x) for x in xs]), _vjp_concat,
         _concat_shape, differentiable=(True,), description="join scalars and vectors into one vector")
_builtin("slice", 1, lambda a, start, stop: a[start:stop].copy(),
         lambda F, g, args, out, attrs: (F.embed(g, start=attrs["start"], n=args[0].shape[0]),),
         _slice_shape, attr_parser=_int_attrs("start", "stop"))
_builtin("index", 1, lambda a, k: a[k],
         lambda F, g, args, out, attrs: (F.embed(g, start=attrs["k"], n=args[0].shape[0]),),
         _index_shape, attr_parser=_int_attrs("k"))
_builtin("embed", 1, _embed, _vjp_embed, _embed_shape, attr_parser=_int_attrs("start", "n"),
         description="place x into a zero vector of length n at offset start")
_builtin("broadcast", 1, lambda a, shape: np.broadcast_to(a, shape).copy(), _vjp_broadcast,
         _broadcast_to_shape, attr_parser=_shape_attr)
_builtin("onehot", 1, _onehot, None, _onehot_shape, differentiable=(False,), attr_parser=_int_attrs("n"))
_builtin("lookup", None, _lookup, None, _lookup_shape, differentiable=(False,), min_arity=2,
         description="table[i, j, ...] with integer-valued index arguments; not differentiable")

# Likelihood and sampling-path helpers
_builtin("bernoulli_loglik", 2, _bernoulli_loglik,
         lambda F, g, args, out, attrs: (F.mul(g, F.sub(args[1], F.sigmoid(args[0]))), F.mul(g, args[0])),
         _summed_pair_shape, description="sum of Bernoulli log-likelihoods of values given logits")
_builtin("reparam", 3, lambda mu, sigma, eps: mu + sigma * eps, _vjp_reparam, _broadcast_shape,
         description="mu + sigma * eps")
_builtin("reparam_logsigma", 3, lambda mu, log_sigma, eps: mu + np.exp(log_sigma) * eps,
         _vjp_reparam_logsigma, _broadcast_shape, description="mu + exp(log_sigma) * eps")
