"""Dense tensors with reverse-mode automatic differentiation.

Every real-valued quantity in the package lives in a :class:`Tensor`. Operations
record a dynamic graph; :meth:`Tensor.backward` walks it in reverse topological
order. Values are checked for NaN/Inf after every operation and a
:class:`NonFiniteError` is raised instead of propagating them.

Also here: a counter-based seedable RNG (:class:`RngState`), a finite
difference gradient checker (:func:`grad_check`) and raw little-endian tensor
serialization with a JSON manifest.
"""

from __future__ import annotations

import contextlib
import json
import math
import os
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "RngState",
    "CheckReport",
    "ParamCheck",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "softmax",
    "log_softmax",
    "sigmoid",
    "softplus",
    "tanh",
    "gelu",
    "exp",
    "log",
    "abs_",
    "layer_norm",
    "concat",
    "where",
    "dropout",
    "grad_check",
    "save_tensors",
    "load_tensors",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.isfinite(values).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A real-valued array that optionally tracks gradients.

    ``data`` is a float32 or float64 numpy array. ``grad`` is filled in by
    :meth:`backward` and has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        _check_finite(arr, "tensor creation")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        out = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)
        return out

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction ---------------------------------------------------
    @staticmethod
    def _make(values: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        """Wrap ``values`` as the output of an op.

        ``backward(g)`` returns one gradient (or None) per parent.
        """
        _check_finite(values, op)
        out = Tensor.__new__(Tensor)
        out.data = values
        out.grad = None
        out.name = None
        out._parents = ()
        out._backward = None
        out.requires_grad = False
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tensor in the graph."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- arithmetic -------------------------------------------------------------
    def _other(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._other(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = self._other(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
            "sub",
        )

    def __rsub__(self, other):
        return self._other(other) - self

    def __mul__(self, other):
        other = self._other(other)
        a, b = self, other

        def backward(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._other(other)
        a, b = self, other

        def backward(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._make(a.data / b.data, (a, b), backward, "div")

    def __rtruediv__(self, other):
        return self._other(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self
        return Tensor._make(
            a.data**exponent,
            (a,),
            lambda g: (g * exponent * a.data ** (exponent - 1),),
            "pow",
        )

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops --------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(
            np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward, "sum"
        )

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[i] for i in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape"
        )

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose"
        )

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return Tensor._make(
            np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),), "swapaxes"
        )

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, index) -> "Tensor":
        if isinstance(index, Tensor):
            raise TypeError("index with integer arrays, not Tensors")
        shape, dtype = self.shape, self.dtype

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(np.asarray(self.data[index]), (self,), backward, "getitem")

    # elementwise conveniences
    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x if dtype is None or x.dtype == dtype else x.astype(dtype)
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a @ b`` (both at least 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def abs_(x: Tensor) -> Tensor:
    return Tensor._make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-free."""
    out = np.logaddexp(0.0, x.data).astype(x.dtype, copy=False)
    return Tensor._make(out, (x,), lambda g: (g * expit(x.data),), "softplus")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU (smooth everywhere, unlike ReLU)."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * (v * v * v))
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv / n * (n * gh - gh.sum(-1, keepdims=True) - xhat * (gh * xhat).sum(-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    return Tensor._make(out, (x, gain, bias), backward, "layer_norm")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat"
    )


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select; ``cond`` is a constant boolean array."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        )

    return Tensor._make(np.where(cond, a.data, b.data), (a, b), backward, "where")


def dropout(x: Tensor, rate: float, rng: "RngState | None", training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    keep = (rng.uniform(x.shape, dtype=np.float32) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * Tensor(keep, dtype=x.dtype)


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------


class RngState:
    """Seedable counter-based random stream.

    Backed by Philox keyed on ``(seed, stream)``, so named sub-streams obtained
    through :meth:`spawn` are independent of each other and of draw order in
    sibling streams. ``position`` counts values drawn so far.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.stream = int(stream)
        self.position = 0
        key = np.random.SeedSequence([self.seed, self.stream]).generate_state(2, np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, name: str) -> "RngState":
        """Independent child stream identified by ``name``."""
        sub = zlib.crc32(name.encode("utf-8"))
        return RngState(self.seed, (self.stream * 1_000_003 + sub) % 2**63)

    def _count(self, shape) -> None:
        self.position += int(np.prod(shape)) if shape is not None else 1

    def uniform(self, shape=None, dtype=np.float64) -> np.ndarray:
        self._count(shape)
        return self._gen.random(shape, dtype=dtype)

    def normal(self, shape=None, scale: float = 1.0) -> np.ndarray:
        self._count(shape)
        return self._gen.normal(0.0, scale, shape)

    def integers(self, high: int, size=None) -> np.ndarray | int:
        self._count(size)
        out = self._gen.integers(0, high, size=size)
        return int(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        self._count((n,))
        return self._gen.permutation(n)

    def choice(self, seq: Sequence):
        return seq[self.integers(len(seq))]

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, stream={self.stream}, position={self.position})"


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class ParamCheck:
    name: str
    n_checked: int
    max_rel_error: float
    worst_index: tuple | None
    passed: bool
    non_checkable: list = field(default_factory=list)
    error: str | None = None


@dataclass
class CheckReport:
    tolerance: float
    step: float
    entries: list

    @property
    def passed(self) -> bool:
        return all(e.passed and not e.non_checkable for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        vals = [e.max_rel_error for e in self.entries if e.n_checked]
        return max(vals) if vals else 0.0

    @property
    def n_checked(self) -> int:
        return sum(e.n_checked for e in self.entries)

    @property
    def non_checkable(self) -> list:
        return [(e.name, idx) for e in self.entries for idx in e.non_checkable]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "step": self.step,
            "n_checked": self.n_checked,
            "max_rel_error": self.max_rel_error,
            "entries": [
                {
                    "name": e.name,
                    "n_checked": e.n_checked,
                    "max_rel_error": e.max_rel_error,
                    "worst_index": list(e.worst_index) if e.worst_index is not None else None,
                    "passed": e.passed,
                    "non_checkable": [list(i) for i in e.non_checkable],
                    "error": e.error,
                }
                for e in self.entries
            ],
        }


def _scalar(loss) -> float:
    value = loss.data if isinstance(loss, Tensor) else np.asarray(loss)
    if value.size != 1:
        raise ValueError("loss_fn must return a scalar")
    return float(value.reshape(()))


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    n_samples: int | None = None,
    rng: RngState | None = None,
    abs_floor: float = 1e-6,
) -> CheckReport:
    """Compare reverse-mode gradients against central finite differences.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, abs_floor)``.
    ``n_samples`` spreads that many checked entries over the parameters (at
    least one each); ``None`` checks every entry. An entry whose one-sided
    differences disagree at both ``step`` and ``step / 10`` sits on a kink and
    is reported as non-checkable, which fails the report.
    """
    if not isinstance(params, Mapping):
        params = {p.name or f"param{i}": p for i, p in enumerate(params)}
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check runs in 64-bit only; {name} is {p.dtype}")
    rng = rng or RngState(0)

    for p in params.values():
        p.zero_grad()
    entries = []
    try:
        loss = loss_fn()
        base = _scalar(loss)
        loss.backward()
    except NonFiniteError as exc:
        return CheckReport(tolerance, step, [ParamCheck("<base>", 0, math.inf, None, False, error=str(exc))])
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}

    per_param = None
    if n_samples is not None:
        per_param = max(1, math.ceil(n_samples / max(len(params), 1)))

    def evaluate(p, idx, value) -> float:
        old = p.data[idx]
        p.data[idx] = value
        try:
            with no_grad():
                return _scalar(loss_fn())
        finally:
            p.data[idx] = old

    for name, p in params.items():
        flat_indices = np.arange(p.size)
        if per_param is not None and per_param < p.size:
            flat_indices = np.sort(rng.permutation(p.size)[:per_param])
        worst, worst_idx, kinks = 0.0, None, []
        error = None
        try:
            for flat in flat_indices:
                idx = np.unravel_index(int(flat), p.shape)
                x0 = float(p.data[idx])
                f_plus = evaluate(p, idx, x0 + step)
                f_minus = evaluate(p, idx, x0 - step)
                numeric = (f_plus - f_minus) / (2 * step)
                gap = abs((f_plus - base) - (base - f_minus)) / step
                if gap > tolerance * max(1.0, abs(numeric)):
                    small = step / 10
                    fp = evaluate(p, idx, x0 + small)
                    fm = evaluate(p, idx, x0 - small)
                    gap_small = abs((fp - base) - (base - fm)) / small
                    if gap_small > 0.5 * gap:
                        kinks.append(tuple(int(i) for i in idx))
                        continue
                a = float(analytic[name][idx])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
                if rel > worst or worst_idx is None:
                    worst, worst_idx = rel, tuple(int(i) for i in idx)
        except NonFiniteError as exc:
            error = f"non-finite loss while perturbing {name}: {exc}"
        entries.append(
            ParamCheck(
                name=name,
                n_checked=len(flat_indices) - len(kinks),
                max_rel_error=worst if error is None else math.inf,
                worst_index=worst_idx,
                passed=error is None and worst <= tolerance,
                non_checkable=kinks,
                error=error,
            )
        )
    return CheckReport(tolerance, step, entries)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_tensors(directory, tensors: Mapping[str, "Tensor | np.ndarray"], dtype: str = "float32", extra: dict | None = None) -> str:
    """Write one raw little-endian file per tensor plus ``manifest.json``."""
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    os.makedirs(directory, exist_ok=True)
    entries = {}
    for name in sorted(tensors):
        value = tensors[name]
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        fname = f"{name}.bin"
        with open(os.path.join(directory, fname), "wb") as fh:
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes(order="C"))
        entries[name] = {"shape": list(arr.shape), "dtype": dtype, "file": fname}
    manifest = dict(extra or {})
    manifest["tensors"] = entries
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_tensors(directory) -> tuple[dict, dict]:
    """Inverse of :func:`save_tensors`; returns ``(arrays, manifest)``."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    arrays = {}
    for name, entry in manifest["tensors"].items():
        raw = np.fromfile(os.path.join(directory, entry["file"]), dtype=_DTYPES[entry["dtype"]])
        shape = tuple(entry["shape"])
        if raw.size != int(np.prod(shape)):
            raise ShapeError(f"{name}: file holds {raw.size} values, manifest says {shape}")
        arrays[name] = raw.reshape(shape).astype(np.dtype(entry["dtype"]))
    return arrays, manifest
