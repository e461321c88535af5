"""Dense float64 tensors with tape-based reverse-mode differentiation.

The primitive set is deliberately small: elementwise add/sub/mul,
matmul, tanh/sigmoid/exp/log/softplus, full reductions sum/mean,
rank-1 concat/slice, broadcast, and a hard clip.  Every public
operation checks its result for NaN/Inf and raises instead of
propagating silently.  A Tape is an append-only record of primitive
applications; backward() walks it once in reverse and returns a map
from leaf-tensor uid to gradient.

Forward evaluation with no tape open is plain numpy and carries no
recording overhead, which is what prediction and rollout paths use.

Concurrency model: tensors are treated as immutable once created
(training mutates parameter arrays only between tapes, never while a
tape referencing them is alive), and independent tapes may run on
independent threads because the active tape is thread-local.
"""

from __future__ import annotations

import itertools
import math
import threading

import numpy as np
from scipy.special import expit

PRIMITIVES = (
    "add", "sub", "mul", "matmul",
    "tanh", "sigmoid", "exp", "log", "softplus",
    "sum", "mean", "concat", "slice", "broadcast", "clip",
)


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Gradient requested through a value that is not on the tape."""


_uid_counter = itertools.count(1)
_active = threading.local()


def _current_tape():
    return getattr(_active, "tape", None)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # fast path: any NaN/Inf element makes the sum non-finite; the
    # elementwise re-check only guards against overflow of the sum itself
    if not math.isfinite(float(arr.sum())):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite result from '{op}'")


class Tensor:
    """Immutable view of a C-contiguous float64 array, optionally taped.

    data holds the values (row-major), uid identifies the tensor for
    gradient lookup, const marks values that never need gradients, and
    (tape, node_id) link the tensor to its node on the recording tape.
    """

    __slots__ = ("data", "uid", "const", "tape", "node_id")

    def __init__(self, data, const: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        _check_finite(arr, "tensor")
        self.data = arr
        self.uid = next(_uid_counter)
        self.const = const
        self.tape = None
        self.node_id = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, uid={self.uid})"

    # -- operator sugar; scalars are lifted and broadcast ---------------
    def __add__(self, other):
        return _binary("add", self, other)

    def __radd__(self, other):
        return _binary("add", _lift(other), self)

    def __sub__(self, other):
        return _binary("sub", self, other)

    def __rsub__(self, other):
        return _binary("sub", _lift(other), self)

    def __mul__(self, other):
        return _binary("mul", self, other)

    def __rmul__(self, other):
        return _binary("mul", _lift(other), self)

    def __neg__(self):
        return _binary("mul", self, _lift(-1.0))

    def __matmul__(self, other):
        return apply_primitive("matmul", self, _lift(other))

    def sum(self):
        return apply_primitive("sum", self)

    def mean(self):
        return apply_primitive("mean", self)

    def slice(self, start: int, stop: int):
        return apply_primitive("slice", self, start=start, stop=stop)

    def clip(self, lo: float, hi: float):
        return apply_primitive("clip", self, lo=lo, hi=hi)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, const=True)


def _binary(op: str, a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b)
    if a.data.shape != b.data.shape:
        if a.data.shape == ():
            a = apply_primitive("broadcast", a, shape=b.data.shape)
        elif b.data.shape == ():
            b = apply_primitive("broadcast", b, shape=a.data.shape)
    return apply_primitive(op, a, b)


def constant(x) -> Tensor:
    """Tensor excluded from gradient maps (inputs, noise, targets)."""
    return _lift(x)


def parameter(x) -> Tensor:
    """Trainable tensor; backward() reports a gradient under its uid."""
    return Tensor(x, const=False)


class Tape:
    """Append-only record of primitive applications.

    Nodes are stored as parallel lists (op id, parent node ids, cached
    forward value, op-specific aux data).  Leaves are enrolled lazily on
    first use.  Entering the context makes the tape the thread's active
    recorder; tapes may nest, the innermost one records.
    """

    __slots__ = ("ops", "parents", "values", "aux", "_prev")

    def __init__(self):
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self.aux: list = []

    def __len__(self) -> int:
        return len(self.ops)

    def __enter__(self):
        self._prev = _current_tape()
        _active.tape = self
        return self

    def __exit__(self, *exc):
        _active.tape = self._prev
        return False

    def _leaf(self, t: Tensor) -> int:
        if t.tape is self and t.node_id is not None:
            return t.node_id
        nid = len(self.ops)
        self.ops.append("leaf")
        self.parents.append(())
        self.values.append(t.data)
        self.aux.append((t.uid, t.const))
        t.tape = self
        t.node_id = nid
        return nid

    def _record(self, op: str, pids: tuple[int, ...], value: np.ndarray, aux) -> int:
        nid = len(self.ops)
        self.ops.append(op)
        self.parents.append(pids)
        self.values.append(value)
        self.aux.append(aux)
        return nid


class no_tape:
    """Context that suspends recording (stop-gradient evaluation)."""

    __slots__ = ("_prev",)

    def __enter__(self):
        self._prev = _current_tape()
        _active.tape = None
        return self

    def __exit__(self, *exc):
        _active.tape = self._prev
        return False


# ---------------------------------------------------------------------------
# forward kernels


def _shape_match(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"'{op}' shape mismatch: {a.shape} vs {b.shape}")


def _fwd_matmul(a, b):
    if a.ndim == 2 and b.ndim in (1, 2):
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul inner dims: {a.shape} @ {b.shape}")
    elif a.ndim == 1 and b.ndim == 1:
        if a.shape[0] != b.shape[0]:
            raise ValueError(f"matmul inner dims: {a.shape} @ {b.shape}")
    else:
        raise ValueError(f"matmul ranks unsupported: {a.ndim} @ {b.ndim}")
    return a @ b


def _fwd_softplus(x):
    # max(x, 0) + log1p(exp(-|x|)): exact for large |x|, no overflow
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _fwd_log(x):
    if np.any(x <= 0.0):
        raise ValueError("log of non-positive value")
    return np.log(x)


def _fwd_broadcast(x, shape):
    shape = tuple(shape)
    if x.shape == ():
        return np.full(shape, float(x), dtype=np.float64)
    if x.ndim == 1 and len(shape) == 2 and shape[1] == x.shape[0]:
        return np.ascontiguousarray(np.broadcast_to(x, shape))
    raise ValueError(f"broadcast {x.shape} -> {shape} unsupported")


def _fwd_concat(parts):
    for p in parts:
        if p.ndim != 1:
            raise ValueError("concat expects rank-1 inputs")
    return np.concatenate(parts)


def _fwd_slice(x, start, stop):
    if x.ndim != 1:
        raise ValueError("slice expects a rank-1 input")
    if not (0 <= start <= stop <= x.shape[0]):
        raise ValueError(f"slice [{start}:{stop}] out of range for {x.shape}")
    return x[start:stop].copy()


def apply_primitive(op: str, *inputs, **kw) -> Tensor:
    """Apply one primitive, record it on the active tape if any.

    inputs are Tensors; kw carries the op's static arguments (slice
    bounds, broadcast shape, clip range).  The result is checked for
    finiteness before it is returned.
    """
    vals = tuple(t.data for t in inputs)
    aux = None
    if op == "add":
        _shape_match(op, vals[0], vals[1])
        out = vals[0] + vals[1]
    elif op == "sub":
        _shape_match(op, vals[0], vals[1])
        out = vals[0] - vals[1]
    elif op == "mul":
        _shape_match(op, vals[0], vals[1])
        out = vals[0] * vals[1]
    elif op == "matmul":
        out = _fwd_matmul(vals[0], vals[1])
    elif op == "tanh":
        out = np.tanh(vals[0])
    elif op == "sigmoid":
        out = expit(vals[0])
    elif op == "exp":
        out = np.exp(vals[0])
    elif op == "log":
        out = _fwd_log(vals[0])
    elif op == "softplus":
        out = _fwd_softplus(vals[0])
    elif op == "sum":
        out = vals[0].sum()
    elif op == "mean":
        out = vals[0].mean()
    elif op == "concat":
        out = _fwd_concat(vals)
        bounds = []
        off = 0
        for v in vals:
            bounds.append((off, off + v.shape[0]))
            off += v.shape[0]
        aux = tuple(bounds)
    elif op == "slice":
        start, stop = kw["start"], kw["stop"]
        out = _fwd_slice(vals[0], start, stop)
        aux = (start, stop)
    elif op == "broadcast":
        out = _fwd_broadcast(vals[0], kw["shape"])
    elif op == "clip":
        lo, hi = float(kw["lo"]), float(kw["hi"])
        if not lo < hi:
            raise ValueError(f"clip bounds out of order: [{lo}, {hi}]")
        out = np.clip(vals[0], lo, hi)
        aux = (lo, hi)
    else:
        raise ValueError(f"unknown primitive '{op}'")

    out = np.asarray(out, dtype=np.float64)
    _check_finite(out, op)

    result = Tensor.__new__(Tensor)
    result.data = out
    result.uid = next(_uid_counter)
    result.const = False
    result.tape = None
    result.node_id = None

    tape = _current_tape()
    if tape is not None:
        pids = tuple(tape._leaf(t) for t in inputs)
        result.tape = tape
        result.node_id = tape._record(op, pids, out, aux)
    return result


# module-level math aliases
def tanh(t: Tensor) -> Tensor:
    return apply_primitive("tanh", t)


def sigmoid(t: Tensor) -> Tensor:
    return apply_primitive("sigmoid", t)


def exp(t: Tensor) -> Tensor:
    return apply_primitive("exp", t)


def log(t: Tensor) -> Tensor:
    return apply_primitive("log", t)


def softplus(t: Tensor) -> Tensor:
    return apply_primitive("softplus", t)


def concat(parts) -> Tensor:
    return apply_primitive("concat", *parts)


def broadcast_to(t: Tensor, shape) -> Tensor:
    return apply_primitive("broadcast", t, shape=tuple(shape))


# ---------------------------------------------------------------------------
# reverse pass


def _acc(adj, pid, contrib, owned):
    # stored adjoints must be writable ndarrays: numpy collapses 0-d
    # results to scalar types, and += on those rebinds instead of
    # accumulating
    cur = adj[pid]
    if cur is None:
        if owned and isinstance(contrib, np.ndarray) and contrib.flags["WRITEABLE"]:
            adj[pid] = contrib
        else:
            adj[pid] = np.array(contrib, dtype=np.float64)
    else:
        cur += contrib


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar taped value w.r.t. every non-const leaf.

    Returns {leaf tensor uid: gradient array}, gradient shapes matching
    the leaves.  Raises TapeError if loss was not recorded on this tape
    and ValueError if it is not scalar.
    """
    if loss.tape is not tape or loss.node_id is None:
        raise TapeError("loss is not a node on this tape")
    if loss.data.shape != ():
        raise ValueError("backward expects a scalar loss")

    ops, parents, values, aux = tape.ops, tape.parents, tape.values, tape.aux
    adj: list = [None] * len(ops)
    adj[loss.node_id] = np.ones((), dtype=np.float64)
    grads: dict[int, np.ndarray] = {}

    for i in range(loss.node_id, -1, -1):
        a = adj[i]
        if a is None:
            continue
        op = ops[i]
        if op == "leaf":
            uid, is_const = aux[i]
            if not is_const:
                grads[uid] = a
            continue
        ps = parents[i]
        if op == "add":
            _acc(adj, ps[0], a, False)
            _acc(adj, ps[1], a, False)
        elif op == "sub":
            _acc(adj, ps[0], a, False)
            _acc(adj, ps[1], -a, True)
        elif op == "mul":
            _acc(adj, ps[0], a * values[ps[1]], True)
            _acc(adj, ps[1], a * values[ps[0]], True)
        elif op == "matmul":
            x, y = values[ps[0]], values[ps[1]]
            if x.ndim == 2 and y.ndim == 1:
                _acc(adj, ps[0], np.multiply.outer(a, y), True)
                _acc(adj, ps[1], x.T @ a, True)
            elif x.ndim == 2 and y.ndim == 2:
                _acc(adj, ps[0], a @ y.T, True)
                _acc(adj, ps[1], x.T @ a, True)
            else:  # dot of two vectors, a is scalar
                _acc(adj, ps[0], a * y, True)
                _acc(adj, ps[1], a * x, True)
        elif op == "tanh":
            out = values[i]
            _acc(adj, ps[0], a * (1.0 - out * out), True)
        elif op == "sigmoid":
            out = values[i]
            _acc(adj, ps[0], a * out * (1.0 - out), True)
        elif op == "exp":
            _acc(adj, ps[0], a * values[i], True)
        elif op == "log":
            _acc(adj, ps[0], a / values[ps[0]], True)
        elif op == "softplus":
            _acc(adj, ps[0], a * expit(values[ps[0]]), True)
        elif op == "sum":
            _acc(adj, ps[0], np.broadcast_to(a, values[ps[0]].shape), False)
        elif op == "mean":
            g = a / values[ps[0]].size
            _acc(adj, ps[0], np.broadcast_to(g, values[ps[0]].shape), False)
        elif op == "concat":
            for pid, (s, e) in zip(ps, aux[i]):
                _acc(adj, pid, a[s:e], False)
        elif op == "slice":
            s, e = aux[i]
            g = np.zeros_like(values[ps[0]])
            g[s:e] = a
            _acc(adj, ps[0], g, True)
        elif op == "broadcast":
            x = values[ps[0]]
            if x.shape == ():
                _acc(adj, ps[0], a.sum(), True)
            else:
                _acc(adj, ps[0], a.sum(axis=0), True)
        elif op == "clip":
            lo, hi = aux[i]
            x = values[ps[0]]
            _acc(adj, ps[0], a * ((x > lo) & (x < hi)), True)
        else:  # pragma: no cover - recording guarantees a known op
            raise ValueError(f"unknown primitive '{op}' on tape")
        adj[i] = None
    return grads


def replay(tape: Tape) -> None:
    """Re-execute every node from recorded inputs; bit-exact or raises.

    Determinism check: the tape caches forward values, and rerunning
    the same kernels on the same inputs must reproduce them exactly.
    """
    for i, op in enumerate(tape.ops):
        if op == "leaf":
            continue
        vals = tuple(tape.values[p] for p in tape.parents[i])
        aux = tape.aux[i]
        if op == "matmul":
            out = _fwd_matmul(*vals)
        elif op == "add":
            out = vals[0] + vals[1]
        elif op == "sub":
            out = vals[0] - vals[1]
        elif op == "mul":
            out = vals[0] * vals[1]
        elif op == "tanh":
            out = np.tanh(vals[0])
        elif op == "sigmoid":
            out = expit(vals[0])
        elif op == "exp":
            out = np.exp(vals[0])
        elif op == "log":
            out = _fwd_log(vals[0])
        elif op == "softplus":
            out = _fwd_softplus(vals[0])
        elif op == "sum":
            out = vals[0].sum()
        elif op == "mean":
            out = vals[0].mean()
        elif op == "concat":
            out = _fwd_concat(vals)
        elif op == "slice":
            out = _fwd_slice(vals[0], *aux)
        elif op == "broadcast":
            out = _fwd_broadcast(vals[0], tape.values[i].shape)
        elif op == "clip":
            out = np.clip(vals[0], *aux)
        else:  # pragma: no cover
            raise ValueError(f"unknown primitive '{op}' on tape")
        if not np.array_equal(np.asarray(out, dtype=np.float64), tape.values[i]):
            raise AssertionError(f"replay mismatch at node {i} ('{op}')")


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(f, params, step: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central differences.

    f maps a list of Tensors to a scalar Tensor.  Every coordinate of
    every param is perturbed by +-step; the relative error for one
    coordinate is |ad - cd| / (|cd| + 1e-12); the max over coordinates
    is returned.
    """
    with Tape() as tape:
        out = f(params)
    grads = backward(tape, out)

    worst = 0.0
    for k, p in enumerate(params):
        g = grads.get(p.uid, np.zeros_like(p.data))
        flat = p.data.ravel()
        for j in range(flat.size):
            orig = flat[j]

            def eval_at(v: float) -> float:
                probe = p.data.copy()
                probe.ravel()[j] = v
                trial = list(params)
                trial[k] = Tensor(probe)
                return f(trial).item()

            cd = (eval_at(orig + step) - eval_at(orig - step)) / (2.0 * step)
            ad = float(g.ravel()[j])
            err = abs(ad - cd) / (abs(cd) + 1e-12)
            worst = max(worst, err)
    return worst
