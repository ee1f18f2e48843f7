"""Generator and predictor networks for the select-predict pipeline.

Two backbones are available. ``per-feature-mlp`` runs a shared MLP over
each feature row; the generator concatenates every row with the mean of all
rows for context, and the predictor mean-pools the row outputs before its
classification head. ``tiny-transformer`` is a pre-norm encoder with learned
positional embeddings; the predictor prepends a learned summary token and
classifies from it.

The predictor always masks its raw input first. Positional embeddings,
biases and the summary token are added afterwards, so rows with ``M = 0``
cannot reach the logits.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np

from rekd import tensor as T
from rekd.tensor import Rng, ShapeError, Tensor

KINDS = ("per-feature-mlp", "tiny-transformer")
LN_EPS = 1e-5


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "per-feature-mlp"
    depth: int = 1
    width: int = 16
    heads: int = 1
    L: int = 20
    D: int = 8
    C: int = 4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown backbone kind {self.kind!r}; expected one of {KINDS}")
        if self.depth < 1 or self.width < 1 or self.heads < 1:
            raise ValueError("depth, width and heads must be >= 1")
        if min(self.L, self.D, self.C) < 1:
            raise ValueError("L, D and C must be >= 1")
        if self.kind == "tiny-transformer" and self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return asdict(self)


def _as_batch(X) -> tuple[Tensor, bool]:
    X = T.as_tensor(X)
    if X.ndim == 2:
        return T.reshape(X, (1,) + X.shape), True
    return X, False


class Net:
    """Parameter container with a deterministic declaration order."""

    def __init__(self, spec: BackboneSpec, rng: Rng):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self._rng = rng
        self._build()
        del self._rng

    # -- parameter helpers
    def _uniform(self, name, shape, bound):
        data = self._rng.generator.uniform(-bound, bound, size=shape)
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _const(self, name, shape, value):
        self.params[name] = Tensor(np.full(shape, value, dtype=np.float64),
                                   requires_grad=True, name=name)

    def _linear(self, name, fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        self._uniform(f"{name}.w", (fan_in, fan_out), bound)
        self._uniform(f"{name}.b", (fan_out,), bound)

    def _encoder_params(self, prefix):
        w = self.spec.width
        for i in range(self.spec.depth):
            p = f"{prefix}.layer{i}"
            self._const(f"{p}.ln1.g", (w,), 1.0)
            self._const(f"{p}.ln1.b", (w,), 0.0)
            for proj in ("q", "k", "v", "o"):
                self._linear(f"{p}.attn.{proj}", w, w)
            self._const(f"{p}.ln2.g", (w,), 1.0)
            self._const(f"{p}.ln2.b", (w,), 0.0)
            self._linear(f"{p}.mlp.fc1", w, 2 * w)
            self._linear(f"{p}.mlp.fc2", 2 * w, w)
        self._const(f"{prefix}.ln_f.g", (w,), 1.0)
        self._const(f"{prefix}.ln_f.b", (w,), 0.0)

    def _build(self):
        raise NotImplementedError

    # -- forward helpers
    def p(self, name) -> Tensor:
        return self.params[name]

    def linear(self, name, x):
        return T.add(T.matmul(x, self.p(f"{name}.w")), self.p(f"{name}.b"))

    def layer_norm(self, name, x):
        mu = T.mean(x, axis=-1, keepdims=True)
        xc = T.sub(x, mu)
        var = T.mean(T.square(xc), axis=-1, keepdims=True)
        y = T.div(xc, T.sqrt(T.add(var, LN_EPS)))
        return T.add(T.mul(y, self.p(f"{name}.g")), self.p(f"{name}.b"))

    def attention(self, name, x):
        B, n, w = x.shape
        h = self.spec.heads
        dh = w // h

        def split(t):
            return T.swapaxes(T.reshape(t, (B, n, h, dh)), 1, 2)

        q = split(self.linear(f"{name}.q", x))
        k = split(self.linear(f"{name}.k", x))
        v = split(self.linear(f"{name}.v", x))
        scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
        att = T.matmul(T.softmax_stable(scores), v)
        merged = T.reshape(T.swapaxes(att, 1, 2), (B, n, w))
        return self.linear(f"{name}.o", merged)

    def encode(self, prefix, x):
        for i in range(self.spec.depth):
            p = f"{prefix}.layer{i}"
            x = T.add(x, self.attention(f"{p}.attn", self.layer_norm(f"{p}.ln1", x)))
            hid = T.relu(self.linear(f"{p}.mlp.fc1", self.layer_norm(f"{p}.ln2", x)))
            x = T.add(x, self.linear(f"{p}.mlp.fc2", hid))
        return self.layer_norm(f"{prefix}.ln_f", x)

    def mlp(self, prefix, x):
        for i in range(self.spec.depth):
            x = T.relu(self.linear(f"{prefix}.fc{i}", x))
        return x

    def _check_input(self, X: Tensor):
        s = self.spec
        if X.shape[-2:] != (s.L, s.D):
            raise ShapeError(f"expected input [..., {s.L}, {s.D}], got {X.shape}")

    # -- bookkeeping
    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        if list(state) != list(self.params):
            raise ValueError("parameter names do not match this network")
        for k, v in state.items():
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != self.params[k].shape:
                raise ShapeError(f"{k}: expected {self.params[k].shape}, got {arr.shape}")
            self.params[k].data = arr.copy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class GeneratorNet(Net):
    """Maps ``X [B, L, D]`` to per-feature selection logits ``Z [B, L, 2]``."""

    def _build(self):
        s = self.spec
        if s.kind == "per-feature-mlp":
            fan = 2 * s.D
            for i in range(s.depth):
                self._linear(f"gen.fc{i}", fan, s.width)
                fan = s.width
            self._linear("gen.head", fan, 2)
        else:
            self._linear("gen.embed", s.D, s.width)
            self._uniform("gen.pos", (s.L, s.width), 1.0 / math.sqrt(s.width))
            self._encoder_params("gen.enc")
            self._linear("gen.head", s.width, 2)

    def __call__(self, X) -> Tensor:
        return generator_forward(self, X)


class PredictorNet(Net):
    """Maps a (masked) input ``R [B, L, D]`` to class logits ``Q [B, C]``."""

    def _build(self):
        s = self.spec
        if s.kind == "per-feature-mlp":
            fan = s.D
            for i in range(s.depth):
                self._linear(f"pred.fc{i}", fan, s.width)
                fan = s.width
            self._linear("pred.head", fan, s.C)
        else:
            self._linear("pred.embed", s.D, s.width)
            self._uniform("pred.pos", (s.L, s.width), 1.0 / math.sqrt(s.width))
            self._uniform("pred.summary", (1, 1, s.width), 1.0 / math.sqrt(s.width))
            self._encoder_params("pred.enc")
            self._linear("pred.head", s.width, s.C)

    def __call__(self, R) -> Tensor:
        return predictor_forward(self, R)


def generator_forward(g: GeneratorNet, X) -> Tensor:
    X, squeeze = _as_batch(X)
    g._check_input(X)
    if g.spec.kind == "per-feature-mlp":
        ctx = T.broadcast_to(T.mean(X, axis=1, keepdims=True), X.shape)
        h = g.mlp("gen", T.concat([X, ctx], axis=-1))
        Z = g.linear("gen.head", h)
    else:
        h = T.add(g.linear("gen.embed", X), g.p("gen.pos"))
        Z = g.linear("gen.head", g.encode("gen.enc", h))
    return T.reshape(Z, Z.shape[1:]) if squeeze else Z


def apply_mask(X, M) -> Tensor:
    """Zero every row of ``X`` whose mask entry is 0; scale rows by ``M`` otherwise."""
    X, M = T.as_tensor(X), T.as_tensor(M)
    if X.shape[:-1] != M.shape:
        raise ShapeError(f"mask {M.shape} does not match input rows {X.shape[:-1]}")
    m = M.data[..., None]
    out = np.where(m == 0.0, 0.0, X.data * m)
    xd = X.data

    def bw(g):
        return g * m, (g * xd).sum(axis=-1)

    return T._emit("apply_mask", (X, M), out, bw)


def predictor_forward(f: PredictorNet, R) -> Tensor:
    R, squeeze = _as_batch(R)
    f._check_input(R)
    if f.spec.kind == "per-feature-mlp":
        h = f.mlp("pred", R)
        Q = f.linear("pred.head", T.mean(h, axis=1))
    else:
        B = R.shape[0]
        h = T.add(f.linear("pred.embed", R), f.p("pred.pos"))
        summary = T.broadcast_to(f.p("pred.summary"), (B, 1, f.spec.width))
        h = f.encode("pred.enc", T.concat([summary, h], axis=1))
        Q = f.linear("pred.head", _first_token(h))
    return T.reshape(Q, Q.shape[1:]) if squeeze else Q


def _first_token(h: Tensor) -> Tensor:
    shape = h.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, 0, :] = g
        return (full,)

    return T._emit("first_token", (h,), h.data[:, 0, :].copy(), bw)


class RationaleModel:
    """A generator/predictor pair. ``generator`` is ``None`` for plain classifiers."""

    def __init__(self, generator: GeneratorNet | None, predictor: PredictorNet):
        self.generator = generator
        self.predictor = predictor

    @classmethod
    def build(cls, spec: BackboneSpec, seed: int, with_generator: bool = True) -> "RationaleModel":
        rng = Rng(seed, (0,))
        gen = GeneratorNet(spec, rng.child(1)) if with_generator else None
        return cls(gen, PredictorNet(spec, rng.child(2)))

    @property
    def spec(self) -> BackboneSpec:
        return self.predictor.spec

    def nets(self) -> list[Net]:
        return [n for n in (self.generator, self.predictor) if n is not None]

    def parameters(self) -> list[Tensor]:
        return [p for n in self.nets() for p in n.params.values()]

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.nets():
            out.update(n.state())
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        for n in self.nets():
            n.load_state({k: state[k] for k in n.params})

    def zero_grad(self):
        for n in self.nets():
            n.zero_grad()

    def checksum(self) -> str:
        return hashlib.sha256("".join(n.checksum() for n in self.nets()).encode()).hexdigest()
