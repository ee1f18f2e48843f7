"""Gumbel-Softmax sampling, straight-through binarization and temperature annealing."""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from rekd import tensor as T
from rekd.tensor import DomainError, Rng, Tensor

_SURROGATE = [False]


@contextlib.contextmanager
def soft_surrogate() -> Iterator[None]:
    """Make :func:`discretize_st` return ``S[..., 1]`` instead of the hard mask.

    The straight-through rule treats the binarization as the identity in the
    backward pass, so under this context the taped gradient is exactly the
    straight-through gradient evaluated on a differentiable forward path. This
    is what finite-difference checks compare against.
    """
    _SURROGATE.append(True)
    try:
        yield
    finally:
        _SURROGATE.pop()


def sample_noise(rng: Rng, L: int, batch: int | None = None) -> np.ndarray:
    """Gumbel(0, 1) noise of shape ``[L, 2]`` (or ``[batch, L, 2]``)."""
    if L < 1:
        raise T.ShapeError(f"L must be >= 1, got {L}")
    shape = (L, 2) if batch is None else (batch, L, 2)
    return gumbel_from_uniform(T.rng_uniform(rng, shape).data)


def gumbel_from_uniform(u) -> np.ndarray:
    return -np.log(-np.log(np.asarray(u, dtype=np.float64)))


@dataclass
class GumbelSample:
    Z: Tensor
    G: np.ndarray
    S: Tensor
    tau: float
    perturbed: Tensor

    def log_probs(self) -> Tensor:
        """``log S`` computed from the perturbed logits (exact, never ``log 0``)."""
        return T.log_softmax(self.perturbed, self.tau)


def gumbel_softmax(Z, G, tau: float) -> GumbelSample:
    Z = T.as_tensor(Z)
    G = np.asarray(G, dtype=np.float64)
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    if Z.shape != G.shape or Z.shape[-1] != 2:
        raise T.ShapeError(f"Z {Z.shape} and G {G.shape} must match with last dim 2")
    perturbed = T.add(Z, G)
    return GumbelSample(Z=Z, G=G, S=T.softmax_stable(perturbed, tau), tau=float(tau),
                        perturbed=perturbed)


def discretize_st(sample: GumbelSample | Tensor) -> Tensor:
    """Binary mask ``M = argmax(S)`` with gradient passed straight to ``S[..., 1]``.

    Ties go to 0 (not selected).
    """
    S = sample.S if isinstance(sample, GumbelSample) else T.as_tensor(sample)
    if _SURROGATE[-1]:
        return T.select_last(S, 1)
    hard = (S.data[..., 1] > S.data[..., 0]).astype(np.float64)
    shape = S.shape

    def bw(g):
        full = np.zeros(shape)
        full[..., 1] = g
        return (full,)

    return T._emit("discretize_st", (S,), hard, bw)


def hard_mask(Z) -> np.ndarray:
    """Noise-free selection: ``Z[..., 1] > Z[..., 0]``."""
    z = Z.data if isinstance(Z, Tensor) else np.asarray(Z)
    return (z[..., 1] > z[..., 0]).astype(np.float64)


@dataclass(frozen=True)
class TemperatureScheduler:
    tau0: float = 5.0
    tauK: float = 0.1
    K: int = 1000
    anneal_every: int = 100

    def __post_init__(self):
        if not (self.tau0 >= self.tauK > 0):
            raise DomainError(f"need tau0 >= tauK > 0, got {self.tau0}, {self.tauK}")
        if self.K < 1 or self.anneal_every < 1:
            raise DomainError("K and anneal_every must be positive")

    @property
    def gamma(self) -> float:
        return math.log(self.tau0 / self.tauK) / self.K

    def __call__(self, k: int) -> float:
        return tau_at(self, k)


def tau_at(s: TemperatureScheduler, k: int) -> float:
    if k < 0:
        raise DomainError(f"step must be non-negative, got {k}")
    if k >= s.K:
        return float(s.tauK)
    k_eff = (k // s.anneal_every) * s.anneal_every
    if k_eff == 0:
        return float(s.tau0)
    return float(s.tau0 * math.exp(-s.gamma * k_eff))
