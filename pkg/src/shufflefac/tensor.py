"""Dense tensor value type, gradient tape and the SFT1 container format.

A :class:`Tensor` is a thin immutable wrapper around a ``numpy`` array.  Ops in
:mod:`shufflefac.ops` produce new tensors and, when a :class:`GradientTape` is
active and an input requires a gradient, record a vector-Jacobian product on
the tape.  ``tape.gradient`` replays the records in reverse execution order.
"""
from __future__ import annotations

import functools
import json
import struct
import threading
import time
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 4

CORE = "core_arithmetic"
TENSOR_MANIP = "tensor_manipulation"
OTHER = "other"
CATEGORIES = (CORE, TENSOR_MANIP, OTHER)


class Tensor:
    """Dense rank-0..4 array of 64-bit (or 32-bit inference) reals."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"tensor rank {arr.ndim} exceeds {MAX_RANK} (shape {arr.shape})")
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


# --------------------------------------------------------------------------- tape

class _Record:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> "GradientTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradientTape:
    """Ordered record of executed ops, used for reverse-mode differentiation.

    Use as a context manager around the forward computation::

        with GradientTape() as tape:
            loss = f(params)
        grads = tape.gradient(loss, params)
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._ids: set[int] = set()

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, op: str, inputs: Sequence[Tensor | None], output: Tensor,
               vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> None:
        self.records.append(_Record(op, tuple(inputs), output, vjp))
        self._ids.add(id(output))

    def op_names(self) -> list[str]:
        return [r.op for r in self.records]

    def gradient(self, loss: Tensor, sources: Iterable[Tensor],
                 loss_grad: np.ndarray | float | None = None) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each of ``sources``.

        Sources not reached by the computation get a zero gradient.
        """
        sources = list(sources)
        if not self.records:
            raise RuntimeError("backward called before any forward op was recorded")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._ids:
            raise RuntimeError("loss was not produced on this tape")
        seed = np.ones_like(loss.data) if loss_grad is None else np.asarray(loss_grad, dtype=loss.data.dtype).reshape(loss.shape)
        grads: dict[int, np.ndarray] = {id(loss): seed}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for t, gi in zip(rec.inputs, in_grads):
                if t is None or gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                # parameters are leaves: keep their gradient after the walk
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def backward(tape: GradientTape, loss: Tensor, sources: Iterable[Tensor],
             loss_grad=None) -> list[np.ndarray]:
    return tape.gradient(loss, sources, loss_grad)


# ----------------------------------------------------------------- profiling hooks

class _NullSpan:
    __slots__ = ()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


_NULL_SPAN = _NullSpan()


class OpTimer:
    """Accumulates exclusive (self) time per op around primitive calls.

    The hot path only appends raw ``(name, category, self_ns)`` events so that
    as little bookkeeping as possible falls outside the timed windows; the
    per-op tables are folded lazily on access.
    """

    def __init__(self, clock=time.perf_counter_ns):
        self.clock = clock
        self._events: list[tuple[str, str, int]] = []
        self._totals: dict[str, int] = {}
        self._calls: dict[str, int] = {}
        self._categories: dict[str, str] = {}
        # child-time accumulators of the open spans; slot 0 collects top-level time
        self._stack: list[int] = [0]

    def span(self, name: str, category: str) -> "_Span":
        return _Span(self, name, category)

    def call(self, name: str, category: str, fn, args, kwargs):
        stack = self._stack
        clock = self.clock
        stack.append(0)
        start = clock()
        try:
            return fn(*args, **kwargs)
        finally:
            elapsed = clock() - start
            child = stack.pop()
            stack[-1] += elapsed
            self._events.append((name, category, elapsed - child))

    def _fold(self) -> None:
        totals, calls, cats = self._totals, self._calls, self._categories
        for name, category, ns in self._events:
            totals[name] = totals.get(name, 0) + ns
            calls[name] = calls.get(name, 0) + 1
            cats[name] = category
        self._events.clear()

    @property
    def totals(self) -> dict[str, int]:
        self._fold()
        return self._totals

    @property
    def calls(self) -> dict[str, int]:
        self._fold()
        return self._calls

    @property
    def categories(self) -> dict[str, str]:
        self._fold()
        return self._categories

    def reset(self) -> None:
        self._events.clear()
        self._totals.clear()
        self._calls.clear()
        self._categories.clear()
        self._stack = [0]

    def total_ns(self) -> int:
        return sum(self.totals.values())


class _Span:
    __slots__ = ("timer", "name", "category", "start")

    def __init__(self, timer, name, category):
        self.timer = timer
        self.name = name
        self.category = category

    def __enter__(self):
        self.timer._stack.append(0)
        self.start = self.timer.clock()
        return self

    def __exit__(self, *exc):
        t = self.timer
        elapsed = t.clock() - self.start
        child = t._stack.pop()
        t._stack[-1] += elapsed
        t._events.append((self.name, self.category, elapsed - child))
        return False


_timer: OpTimer | None = None


def set_op_timer(timer: OpTimer | None) -> None:
    global _timer
    _timer = timer


def span(name: str, category: str):
    t = _timer
    return _NULL_SPAN if t is None else _Span(t, name, category)


def primitive(name: str, category: str):
    """Decorator: time every call of ``fn`` as one op when a timer is installed."""
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            t = _timer
            if t is None:
                return fn(*args, **kwargs)
            # same bookkeeping as OpTimer.call, inlined to keep untimed overhead small
            stack = t._stack
            clock = t.clock
            stack.append(0)
            start = clock()
            try:
                return fn(*args, **kwargs)
            finally:
                elapsed = clock() - start
                child = stack.pop()
                stack[-1] += elapsed
                t._events.append((name, category, elapsed - child))
        wrapper.op_name = name
        wrapper.category = category
        return wrapper
    return deco


# ----------------------------------------------------------------- SFT1 container

TENSOR_MAGIC = b"SFT1"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    tag = "f32" if arr.dtype == np.float32 else "f64"
    header = json.dumps({"shape": list(arr.shape), "dtype": tag}).encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
    return TENSOR_MAGIC + struct.pack("<I", len(header)) + header + payload


def tensor_from_bytes(buf: bytes) -> Tensor:
    if buf[:4] != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {buf[:4]!r}, expected {TENSOR_MAGIC!r}")
    if len(buf) < 8:
        raise FormatError("truncated tensor header")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + hlen:
        raise FormatError("truncated tensor header")
    try:
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
        shape = tuple(int(d) for d in header["shape"])
        dtype = _DTYPES[header["dtype"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid tensor header: {exc}") from exc
    count = int(np.prod(shape, dtype=np.int64))
    payload = buf[8 + hlen:]
    if len(payload) != count * dtype.itemsize:
        raise FormatError(
            f"payload has {len(payload)} bytes, expected {count * dtype.itemsize} for shape {shape}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return Tensor(arr)


def save_tensor(t: Tensor | np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path: str | Path) -> Tensor:
    return tensor_from_bytes(Path(path).read_bytes())
