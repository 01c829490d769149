"""Reverse-mode automatic differentiation on an append-only scalar tape.

Every recorded node is a scalar with at most two parents and precomputed
local partials, so a single reverse sweep in anti-topological order yields
exact gradients.  ``DualValue`` wraps one node; ``DualArray`` batches whole
ndarrays of nodes through one vectorized append per operation, which keeps
the tape scalar (testable node by node) without Python-loop overhead.

Subgradient conventions: relu'(0) = 0, and ``select`` gates are
non-differentiable by convention (the gradient flows through the selected
branch only).  Tapes are single-writer; use one tape per optimization step.
"""

from __future__ import annotations

from typing import Iterable, Sequence, Union

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is a hard dep, but keep a fallback
    _HAVE_NUMBA = False


class TapeMismatchError(ValueError):
    """Raised when an operation mixes nodes from different tapes."""


class DomainError(ValueError):
    """Raised for log/sqrt/div arguments outside the op's domain."""


# Op codes.  Single-parent ops leave pb = -1; constant-operand variants
# (ADDC, RSUBC, MULC, RDIVC) keep the constant in the aux slot so the tape
# can be replayed bit-for-bit.
LEAF = 0
ADD = 1
SUB = 2
MUL = 3
DIV = 4
EXP = 5
LOG = 6
TANH = 7
RELU = 8
SQRT = 9
SELECT = 10
ATAN2 = 11
ADDC = 12
RSUBC = 13
MULC = 14
RDIVC = 15

_OP_NAMES = {
    "add": ADD,
    "sub": SUB,
    "mul": MUL,
    "div": DIV,
    "exp": EXP,
    "log": LOG,
    "tanh": TANH,
    "relu": RELU,
    "max0": RELU,
    "sqrt": SQRT,
    "select": SELECT,
    "atan2": ATAN2,
}


def _sweep_py(pa, pb, da, db, grad, start):
    for i in range(start, -1, -1):
        g = grad[i]
        if g != 0.0:
            a = pa[i]
            if a >= 0:
                grad[a] += g * da[i]
            b = pb[i]
            if b >= 0:
                grad[b] += g * db[i]


if _HAVE_NUMBA:
    _sweep = njit(cache=True)(_sweep_py)
else:  # pragma: no cover
    _sweep = _sweep_py


class Tape:
    """Append-only computation record over scalar nodes."""

    __slots__ = ("_op", "_pa", "_pb", "_da", "_db", "_aux", "_val", "_n")

    def __init__(self, capacity: int = 1024):
        self._op = np.zeros(capacity, dtype=np.uint8)
        self._pa = np.full(capacity, -1, dtype=np.int64)
        self._pb = np.full(capacity, -1, dtype=np.int64)
        self._da = np.zeros(capacity, dtype=np.float64)
        self._db = np.zeros(capacity, dtype=np.float64)
        self._aux = np.zeros(capacity, dtype=np.float64)
        self._val = np.zeros(capacity, dtype=np.float64)
        self._n = 0

    def __len__(self) -> int:
        return self._n

    def _grow(self, need: int) -> None:
        cap = self._op.shape[0]
        new_cap = max(cap * 2, self._n + need)
        for name in ("_op", "_pa", "_pb", "_da", "_db", "_aux", "_val"):
            old = getattr(self, name)
            fresh = np.empty(new_cap, dtype=old.dtype)
            fresh[: self._n] = old[: self._n]
            if name in ("_pa", "_pb"):
                fresh[self._n :] = -1
            setattr(self, name, fresh)

    def _alloc(self, k: int) -> int:
        start = self._n
        if start + k > self._op.shape[0]:
            self._grow(k)
        self._n = start + k
        return start

    # ------------------------------------------------------------------
    # node creation
    # ------------------------------------------------------------------

    def leaf(self, value: float) -> "DualValue":
        """Record one input node and return its handle."""
        i = self._alloc(1)
        self._op[i] = LEAF
        self._val[i] = float(value)
        return DualValue(self, i)

    def leaves(self, values: np.ndarray) -> "DualArray":
        """Record an array of input nodes in one append."""
        vals = np.asarray(values, dtype=np.float64)
        k = vals.size
        s = self._alloc(k)
        self._op[s : s + k] = LEAF
        self._val[s : s + k] = vals.ravel()
        return DualArray(self, np.arange(s, s + k, dtype=np.int64).reshape(vals.shape))

    constant = leaf

    @staticmethod
    def _fill(buf, sl, val, shape):
        if isinstance(val, np.ndarray):
            if val.shape == shape:
                buf[sl] = val.ravel()
            elif val.ndim == 0:
                buf[sl] = val
            else:
                buf[sl] = np.broadcast_to(val, shape).ravel()
        else:
            buf[sl] = val

    def _append_unary(self, code, a_ids, out_vals, partials, aux=None):
        a_ids = np.asarray(a_ids, dtype=np.int64)
        k = a_ids.size
        s = self._alloc(k)
        sl = slice(s, s + k)
        shape = a_ids.shape
        self._op[sl] = code
        self._pa[sl] = a_ids.ravel()
        self._pb[sl] = -1
        self._fill(self._da, sl, partials, shape)
        self._db[sl] = 0.0
        if aux is not None:
            self._fill(self._aux, sl, aux, shape)
        self._fill(self._val, sl, out_vals, shape)
        return np.arange(s, s + k, dtype=np.int64).reshape(shape)

    def _append_binary(self, code, a_ids, b_ids, out_vals, da, db):
        a_ids = np.asarray(a_ids, dtype=np.int64)
        b_ids = np.asarray(b_ids, dtype=np.int64)
        if a_ids.shape != b_ids.shape:
            a_ids, b_ids = np.broadcast_arrays(a_ids, b_ids)
        k = a_ids.size
        s = self._alloc(k)
        sl = slice(s, s + k)
        shape = a_ids.shape
        self._op[sl] = code
        self._pa[sl] = a_ids.ravel()
        self._pb[sl] = b_ids.ravel()
        self._fill(self._da, sl, da, shape)
        self._fill(self._db, sl, db, shape)
        self._fill(self._val, sl, out_vals, shape)
        return np.arange(s, s + k, dtype=np.int64).reshape(shape)

    # ------------------------------------------------------------------
    # spec-level scalar API
    # ------------------------------------------------------------------

    def record(self, op_kind: str, inputs: Sequence["DualValue"]) -> "DualValue":
        """Record one scalar operation by name.

        ``select`` takes ``[gate, a, b]`` and keeps ``a`` when the gate's
        value is >= 0, else ``b``; only the kept branch receives gradient.
        """
        code = _OP_NAMES.get(op_kind)
        if code is None:
            raise ValueError(f"unknown op kind {op_kind!r}")
        for x in inputs:
            if x.tape is not self:
                raise TapeMismatchError("input belongs to a different tape")
        if code == SELECT:
            gate, a, b = inputs
            return select(gate, a, b)
        if code in (ADD, SUB, MUL, DIV, ATAN2):
            a, b = inputs
            if code == ADD:
                return a + b
            if code == SUB:
                return a - b
            if code == MUL:
                return a * b
            if code == DIV:
                return a / b
            return atan2(a, b)
        (a,) = inputs
        return {EXP: exp, LOG: log, TANH: tanh, RELU: relu, SQRT: sqrt}[code](a)

    # ------------------------------------------------------------------
    # reverse sweep and replay
    # ------------------------------------------------------------------

    def backward(self, output: "DualValue") -> np.ndarray:
        """Gradient of ``output`` with respect to every node on the tape.

        Returns an array of length ``len(self)`` indexed by node id.  Pure;
        repeated calls yield identical results.
        """
        if output.tape is not self:
            raise TapeMismatchError("output belongs to a different tape")
        n = self._n
        grad = np.zeros(n, dtype=np.float64)
        grad[output.i] = 1.0
        _sweep(self._pa[:n], self._pb[:n], self._da[:n], self._db[:n], grad, output.i)
        return grad

    def values(self) -> np.ndarray:
        return self._val[: self._n].copy()

    def replay(self) -> np.ndarray:
        """Recompute all forward values from the recorded ops.

        Used to verify the stored values are reproducible bit-for-bit.
        """
        n = self._n
        out = np.empty(n, dtype=np.float64)
        op, pa, pb, aux = self._op, self._pa, self._pb, self._aux
        val = self._val
        for i in range(n):
            c = op[i]
            if c == LEAF:
                out[i] = val[i]
            elif c == ADD:
                out[i] = out[pa[i]] + out[pb[i]]
            elif c == SUB:
                out[i] = out[pa[i]] - out[pb[i]]
            elif c == MUL:
                out[i] = out[pa[i]] * out[pb[i]]
            elif c == DIV:
                out[i] = out[pa[i]] / out[pb[i]]
            elif c == EXP:
                out[i] = np.exp(out[pa[i]])
            elif c == LOG:
                out[i] = np.log(out[pa[i]])
            elif c == TANH:
                out[i] = np.tanh(out[pa[i]])
            elif c == RELU:
                out[i] = out[pa[i]] if out[pa[i]] > 0.0 else 0.0
            elif c == SQRT:
                out[i] = np.sqrt(out[pa[i]])
            elif c == SELECT:
                out[i] = out[pa[i]]
            elif c == ATAN2:
                out[i] = np.arctan2(out[pa[i]], out[pb[i]])
            elif c == ADDC:
                out[i] = out[pa[i]] + aux[i]
            elif c == RSUBC:
                out[i] = aux[i] - out[pa[i]]
            elif c == MULC:
                out[i] = out[pa[i]] * aux[i]
            elif c == RDIVC:
                out[i] = aux[i] / out[pa[i]]
            else:  # pragma: no cover
                raise AssertionError(f"bad op code {c}")
        return out


def _check_same_tape(a, b):
    if a.tape is not b.tape:
        raise TapeMismatchError("operands belong to different tapes")


Number = Union[int, float, np.floating, np.ndarray]


class DualValue:
    """Handle to one scalar node on a tape."""

    __slots__ = ("tape", "i")

    def __init__(self, tape: Tape, i: int):
        self.tape = tape
        self.i = int(i)

    @property
    def value(self) -> float:
        return float(self.tape._val[self.i])

    def __repr__(self):
        return f"DualValue({self.value:.6g}@{self.i})"

    def _ids(self):
        return np.asarray(self.i, dtype=np.int64)

    # arithmetic -------------------------------------------------------

    def __add__(self, other):
        return _dual_from(_add(self.tape, self._ids(), other))

    __radd__ = __add__

    def __sub__(self, other):
        return _dual_from(_sub(self.tape, self._ids(), other))

    def __rsub__(self, other):
        return _dual_from(_rsub(self.tape, self._ids(), other))

    def __mul__(self, other):
        return _dual_from(_mul(self.tape, self._ids(), other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _dual_from(_div(self.tape, self._ids(), other))

    def __rtruediv__(self, other):
        return _dual_from(_rdiv(self.tape, self._ids(), other))

    def __neg__(self):
        return _dual_from(_rsub(self.tape, self._ids(), 0.0))


class DualArray:
    """An ndarray of node ids on one tape; ops append nodes in bulk.

    Indexing/reshaping are views on the id array and record nothing.
    """

    __slots__ = ("tape", "ids")

    def __init__(self, tape: Tape, ids: np.ndarray):
        self.tape = tape
        self.ids = np.asarray(ids, dtype=np.int64)

    @property
    def shape(self):
        return self.ids.shape

    @property
    def values(self) -> np.ndarray:
        return self.tape._val[self.ids]

    def __repr__(self):
        return f"DualArray(shape={self.ids.shape})"

    def __getitem__(self, idx) -> "DualArray | DualValue":
        sub = self.ids[idx]
        if np.ndim(sub) == 0:
            return DualValue(self.tape, int(sub))
        return DualArray(self.tape, sub)

    def reshape(self, *shape) -> "DualArray":
        return DualArray(self.tape, self.ids.reshape(*shape))

    def item(self) -> DualValue:
        return DualValue(self.tape, int(self.ids.reshape(())))

    # arithmetic -------------------------------------------------------

    def __add__(self, other):
        return _dual_from(_add(self.tape, self.ids, other))

    __radd__ = __add__

    def __sub__(self, other):
        return _dual_from(_sub(self.tape, self.ids, other))

    def __rsub__(self, other):
        return _dual_from(_rsub(self.tape, self.ids, other))

    def __mul__(self, other):
        return _dual_from(_mul(self.tape, self.ids, other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _dual_from(_div(self.tape, self.ids, other))

    def __rtruediv__(self, other):
        return _dual_from(_rdiv(self.tape, self.ids, other))

    def __neg__(self):
        return _dual_from(_rsub(self.tape, self.ids, 0.0))

    def sum(self, axis: int | None = None) -> "DualArray | DualValue":
        """Pairwise-tree sum; ``axis=None`` reduces everything to a scalar."""
        if axis is None:
            ids = self.ids.reshape(1, -1)
            lead = None
        else:
            moved = np.moveaxis(self.ids, axis, -1)
            lead = moved.shape[:-1]
            ids = moved.reshape(-1, moved.shape[-1])
        tape = self.tape
        while ids.shape[1] > 1:
            m = ids.shape[1]
            even = m - (m % 2)
            left, right = ids[:, 0:even:2], ids[:, 1:even:2]
            vals = tape._val[left] + tape._val[right]
            merged = tape._append_binary(ADD, left, right, vals, 1.0, 1.0)
            if m % 2:
                merged = np.concatenate([merged, ids[:, -1:]], axis=1)
            ids = merged
        col = ids[:, 0]
        if lead is None or lead == ():
            return DualValue(tape, int(col[0]))
        return DualArray(tape, col.reshape(lead))


def _dual_from(pair):
    tape, ids = pair
    if ids.ndim == 0:
        return DualValue(tape, int(ids))
    return DualArray(tape, ids)


def _coerce(tape: Tape, x) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Return (ids, None) for duals on this tape, (None, const) for numbers."""
    if isinstance(x, DualValue):
        if x.tape is not tape:
            raise TapeMismatchError("operands belong to different tapes")
        return np.asarray(x.i, dtype=np.int64), None
    if isinstance(x, DualArray):
        if x.tape is not tape:
            raise TapeMismatchError("operands belong to different tapes")
        return x.ids, None
    if isinstance(x, (int, float)):
        return None, float(x)
    return None, np.asarray(x, dtype=np.float64)


def _const_binary(tape, code, a_ids, const):
    a_ids = np.asarray(a_ids, dtype=np.int64)
    if isinstance(const, np.ndarray) and const.ndim != 0 and const.shape != a_ids.shape:
        a_ids, const = np.broadcast_arrays(a_ids, const)
    av = tape._val[a_ids]
    if code == ADDC:
        vals, da = av + const, 1.0
    elif code == RSUBC:
        vals, da = const - av, -1.0
    elif code == MULC:
        vals, da = av * const, const
    elif code == RDIVC:
        if np.any(av == 0.0):
            raise DomainError("division by zero")
        vals, da = const / av, -const / (av * av)
    else:  # pragma: no cover
        raise AssertionError
    out = tape._append_unary(code, a_ids, vals, da, aux=const)
    return tape, out


def _add(tape, a_ids, other):
    b_ids, const = _coerce(tape, other)
    if const is not None:
        return _const_binary(tape, ADDC, a_ids, const)
    vals = tape._val[a_ids] + tape._val[b_ids]
    return tape, tape._append_binary(ADD, a_ids, b_ids, vals, 1.0, 1.0)


def _sub(tape, a_ids, other):
    b_ids, const = _coerce(tape, other)
    if const is not None:
        return _const_binary(tape, ADDC, a_ids, -const)
    vals = tape._val[a_ids] - tape._val[b_ids]
    return tape, tape._append_binary(SUB, a_ids, b_ids, vals, 1.0, -1.0)


def _rsub(tape, a_ids, other):
    b_ids, const = _coerce(tape, other)
    if const is not None:
        return _const_binary(tape, RSUBC, a_ids, const)
    vals = tape._val[b_ids] - tape._val[a_ids]
    return tape, tape._append_binary(SUB, b_ids, a_ids, vals, 1.0, -1.0)


def _mul(tape, a_ids, other):
    b_ids, const = _coerce(tape, other)
    if const is not None:
        return _const_binary(tape, MULC, a_ids, const)
    av, bv = tape._val[a_ids], tape._val[b_ids]
    return tape, tape._append_binary(MUL, a_ids, b_ids, av * bv, bv, av)


def _div(tape, a_ids, other):
    b_ids, const = _coerce(tape, other)
    if const is not None:
        if np.any(const == 0.0):
            raise DomainError("division by zero")
        return _const_binary(tape, MULC, a_ids, 1.0 / const)
    av, bv = tape._val[a_ids], tape._val[b_ids]
    if np.any(bv == 0.0):
        raise DomainError("division by zero")
    return tape, tape._append_binary(DIV, a_ids, b_ids, av / bv, 1.0 / bv, -av / (bv * bv))


def _rdiv(tape, a_ids, other):
    b_ids, const = _coerce(tape, other)
    if const is not None:
        return _const_binary(tape, RDIVC, a_ids, const)
    av, bv = tape._val[a_ids], tape._val[b_ids]  # other / self
    if np.any(av == 0.0):
        raise DomainError("division by zero")
    return tape, tape._append_binary(DIV, b_ids, a_ids, bv / av, 1.0 / av, -bv / (av * av))


Dual = Union[DualValue, DualArray]


def exp(x: Dual) -> Dual:
    ids = x.ids if isinstance(x, DualArray) else np.asarray(x.i, dtype=np.int64)
    vals = np.exp(x.tape._val[ids])
    return _dual_from((x.tape, x.tape._append_unary(EXP, ids, vals, vals)))


def log(x: Dual) -> Dual:
    ids = x.ids if isinstance(x, DualArray) else np.asarray(x.i, dtype=np.int64)
    v = x.tape._val[ids]
    if np.any(v <= 0.0):
        raise DomainError("log of non-positive argument")
    return _dual_from((x.tape, x.tape._append_unary(LOG, ids, np.log(v), 1.0 / v)))


def tanh(x: Dual) -> Dual:
    ids = x.ids if isinstance(x, DualArray) else np.asarray(x.i, dtype=np.int64)
    t = np.tanh(x.tape._val[ids])
    return _dual_from((x.tape, x.tape._append_unary(TANH, ids, t, 1.0 - t * t)))


def relu(x: Dual) -> Dual:
    """max(x, 0) with subgradient 0 at the kink."""
    ids = x.ids if isinstance(x, DualArray) else np.asarray(x.i, dtype=np.int64)
    v = x.tape._val[ids]
    pos = v > 0.0
    return _dual_from(
        (x.tape, x.tape._append_unary(RELU, ids, np.where(pos, v, 0.0), pos.astype(np.float64)))
    )


def sqrt(x: Dual) -> Dual:
    ids = x.ids if isinstance(x, DualArray) else np.asarray(x.i, dtype=np.int64)
    v = x.tape._val[ids]
    if np.any(v <= 0.0):
        raise DomainError("sqrt of non-positive argument")
    r = np.sqrt(v)
    return _dual_from((x.tape, x.tape._append_unary(SQRT, ids, r, 0.5 / r)))


def atan2(y: Dual, x: Dual) -> Dual:
    _check_same_tape(y, x)
    tape = y.tape
    y_ids = y.ids if isinstance(y, DualArray) else np.asarray(y.i, dtype=np.int64)
    x_ids = x.ids if isinstance(x, DualArray) else np.asarray(x.i, dtype=np.int64)
    y_ids, x_ids = np.broadcast_arrays(y_ids, x_ids)
    yv, xv = tape._val[y_ids], tape._val[x_ids]
    d2 = xv * xv + yv * yv
    if np.any(d2 == 0.0):
        raise DomainError("atan2 at the origin")
    vals = np.arctan2(yv, xv)
    return _dual_from((tape, tape._append_binary(ATAN2, y_ids, x_ids, vals, xv / d2, -yv / d2)))


def select(gate: Dual, a: Dual, b: Dual) -> Dual:
    """Pick ``a`` where gate value >= 0, else ``b``; gate gets no gradient.

    Recorded as an identity node on the chosen parent, so replay is exact
    and the gradient flows through the selected branch only.
    """
    tape = gate.tape
    for x in (a, b):
        if isinstance(x, (DualValue, DualArray)) and x.tape is not tape:
            raise TapeMismatchError("operands belong to different tapes")
    g_ids = gate.ids if isinstance(gate, DualArray) else np.asarray(gate.i, dtype=np.int64)
    a_ids, a_const = _coerce(tape, a)
    b_ids, b_const = _coerce(tape, b)
    if a_ids is None:
        a_ids = tape.leaves(np.broadcast_to(a_const, g_ids.shape)).ids
    if b_ids is None:
        b_ids = tape.leaves(np.broadcast_to(b_const, g_ids.shape)).ids
    g_vals = tape._val[g_ids]
    g2, a2, b2 = np.broadcast_arrays(g_vals, a_ids, b_ids)
    chosen = np.where(g2 >= 0.0, a2, b2).astype(np.int64)
    vals = tape._val[chosen]
    return _dual_from((tape, tape._append_unary(SELECT, chosen, vals, 1.0)))


def stack(items: Iterable[Dual]) -> DualArray:
    """Stack scalar/array duals (same tape) into one DualArray along axis 0."""
    items = list(items)
    tape = items[0].tape
    ids = []
    for it in items:
        if it.tape is not tape:
            raise TapeMismatchError("operands belong to different tapes")
        ids.append(np.asarray(it.ids if isinstance(it, DualArray) else it.i, dtype=np.int64))
    return DualArray(tape, np.stack(ids, axis=0))


def concat(items: Sequence[DualArray], axis: int = 0) -> DualArray:
    tape = items[0].tape
    for it in items:
        if it.tape is not tape:
            raise TapeMismatchError("operands belong to different tapes")
    return DualArray(tape, np.concatenate([it.ids for it in items], axis=axis))
