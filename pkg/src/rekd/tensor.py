"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`ComputationRecord` is active (see
:func:`recording`) append themselves to it when any input requires a
gradient. :func:`backward` replays the record in reverse execution order,
visiting each operation once and accumulating gradients additively.

Random numbers come from numpy's Philox4x64 counter-based generator.
Streams are split by seeding ``SeedSequence(seed)`` with a ``spawn_key``
built from integer labels such as ``(epoch, batch)``, so distinct label
tuples never share a stream and the same seed always replays exactly.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

UNIFORM_EPS = 1e-12
FD_STEP = 1e-5


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    __float__ = item

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Operation:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class ComputationRecord:
    """Ordered log of executed primitives, sufficient to replay backward."""

    ops: list[Operation] = field(default_factory=list)

    def __len__(self):
        return len(self.ops)


_ACTIVE: list[ComputationRecord] = []


@contextlib.contextmanager
def recording(record: ComputationRecord | None = None) -> Iterator[ComputationRecord]:
    record = ComputationRecord() if record is None else record
    _ACTIVE.append(record)
    try:
        yield record
    finally:
        _ACTIVE.pop()


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    _ACTIVE.append(None)  # type: ignore[arg-type]
    try:
        yield
    finally:
        _ACTIVE.pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(name, inputs, out_data, backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _ACTIVE and _ACTIVE[-1] is not None:
        _ACTIVE[-1].ops.append(Operation(name, tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(record: ComputationRecord, loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor reachable from ``loss``.

    Leaves are tensors that require a gradient but were not produced by an
    operation in ``record``. Gradients add into existing ``.grad`` arrays,
    so callers zero parameters between optimizer steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    produced = {id(op.output) for op in record.ops}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in reversed(record.ops):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        for inp, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in produced:
                grads[key] = grads[key] + gi if key in grads else gi
            else:
                inp.grad = np.array(gi, dtype=np.float64) if inp.grad is None else inp.grad + gi


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", (a, b), out,
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("square", (x,), xd * xd, lambda g: (2.0 * xd * g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("log", (x,), np.log(xd), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _emit("sqrt", (x,), out, lambda g: (g * 0.5 / out,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    keep = x.data >= floor
    return _emit("clamp_min", (x,), np.where(keep, x.data, floor), lambda g: (g * keep,))


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _emit("relu", (x,), np.where(keep, x.data, 0.0), lambda g: (g * keep,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), x.data.sum(axis=axis, keepdims=keepdims), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- shape


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(orig),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _emit("swapaxes", (x,), np.swapaxes(x.data, a, b),
                 lambda g: (np.swapaxes(g, a, b),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _emit("concat", tuple(xs), np.concatenate([x.data for x in xs], axis=axis),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def broadcast_to(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return _emit("broadcast_to", (x,), np.broadcast_to(x.data, shape).copy(),
                 lambda g: (_unbroadcast(g, orig),))


def select_last(x: Tensor, index: int) -> Tensor:
    """``x[..., index]`` as a differentiable view."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[..., index] = g
        return (full,)

    return _emit("select_last", (x,), x.data[..., index].copy(), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        # promote vectors to matrices the way ``@`` does, then undo it
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        ga = _unbroadcast(ga, a2.shape).reshape(ad.shape)
        gb = _unbroadcast(gb, b2.shape).reshape(bd.shape)
        return ga, gb

    return _emit("matmul", (a, b), ad @ bd, bw)


# ---------------------------------------------------------------- softmax family


def _check_temperature(temperature: float):
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")


def softmax_stable(logits, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax over the last axis of ``logits / temperature``."""
    _check_temperature(temperature)
    x = as_tensor(logits)
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)) / temperature,)

    return _emit("softmax", (x,), out, bw)


def log_softmax(logits, temperature: float = 1.0) -> Tensor:
    _check_temperature(temperature)
    x = as_tensor(logits)
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _emit("log_softmax", (x,), out, bw)


# ---------------------------------------------------------------- randomness


class Rng:
    """Philox4x64 stream keyed by ``(seed, *labels)``."""

    def __init__(self, seed: int, labels: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.labels = tuple(int(v) for v in labels)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.labels)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *labels: int) -> "Rng":
        return Rng(self.seed, self.labels + tuple(labels))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def state(self) -> dict:
        return {"seed": self.seed, "labels": list(self.labels),
                "bit_generator": self._gen.bit_generator.state}


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(n) for n in np.atleast_1d(shape))
    if not shape or any(n <= 0 for n in shape):
        raise ShapeError(f"invalid shape {shape}")
    return shape


def rng_uniform(rng: Rng, shape) -> Tensor:
    shape = _check_shape(shape)
    u = rng.generator.random(shape)
    return Tensor(np.clip(u, UNIFORM_EPS, 1.0 - UNIFORM_EPS))


# ---------------------------------------------------------------- gradient check


class EvaluationError(ArithmeticError):
    pass


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = FD_STEP) -> float:
    """Max relative gap between taped and central-difference gradients of ``f`` at ``x``.

    The gap per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    probe = Tensor(x.data.copy(), requires_grad=True, name="probe")
    with recording() as rec:
        out = f(probe)
    if not np.all(np.isfinite(out.data)):
        raise EvaluationError("f(x) is not finite")
    backward(rec, out)
    analytic = np.zeros_like(probe.data) if probe.grad is None else probe.grad

    base = x.data.copy()
    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_record():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f(Tensor(base.copy())).data)
            flat[i] = old - h
            fm = float(f(Tensor(base.copy())).data)
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"f is not finite near coordinate {i}")
            num_flat[i] = (fp - fm) / (2.0 * h)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
