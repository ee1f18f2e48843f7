"""Finite-difference checks of every training composite, plus the
temperature-scaling identity of the rationale distillation gradient.

Composites run under :func:`~rekd.gumbel.soft_surrogate`, so the hard mask
is replaced by ``S[..., 1]`` and the taped gradient is the straight-through
gradient on a differentiable path.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from rekd import tensor as T
from rekd.gumbel import discretize_st, gumbel_softmax, sample_noise, soft_surrogate
from rekd.losses import (LossWeights, kd_combined, kd_pred, kd_rationale, re_loss, rekd_total,
                         selection_loss, task_ce)
from rekd.models import BackboneSpec, RationaleModel, apply_mask
from rekd.tensor import Rng, Tensor

GRAD_TOL = 1e-4
IDENTITY_TOL = 1e-6
SHRINK_TOL = 0.05
IDENTITY_TAUS = (5.0, 1.0, 0.5, 0.1)
IDENTITY_PAIRS = 100


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return math.isfinite(self.value) and self.value < self.tol


@dataclass
class GradcheckReport:
    results: list[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def max_error(self, prefix: str = "") -> float:
        vals = [r.value for r in self.results if r.name.startswith(prefix)]
        return max(vals) if vals else 0.0

    def lines(self) -> list[str]:
        out = [f"{'ok' if r.passed else 'FAIL':4s} {r.name:48s} {r.value:.3e} (tol {r.tol:g})"
               for r in self.results]
        out.append(f"max composite rel. error {self.max_error('grad/'):.3e}; "
                   f"max identity error {self.max_error('identity/'):.3e}; "
                   f"max shrink deviation {self.max_error('shrink/'):.3e}; "
                   f"{self.seconds:.1f}s")
        return out


def _swap_param(net, name: str, loss_fn):
    """Return ``f(t)`` evaluating ``loss_fn()`` with ``net.params[name]`` replaced by ``t``."""

    def f(t: Tensor) -> Tensor:
        old = net.params[name]
        net.params[name] = t
        try:
            return loss_fn()
        finally:
            net.params[name] = old

    return f


def _composites(student: RationaleModel, teacher: RationaleModel, X, y, G, tau, w, weights):
    """Named scalar functions covering each stage of the pipeline."""

    def stages():
        Z = student.generator(X)
        sample = gumbel_softmax(Z, G, tau)
        M = discretize_st(sample)
        Q = student.predictor(apply_mask(X, M))
        return Z, sample, M, Q

    def teacher_side():
        with T.no_record():
            Zt = teacher.generator(X)
            st = gumbel_softmax(Zt, G, tau)
            Qt = teacher.predictor(apply_mask(X, discretize_st(st)))
        return st, Qt.detach()

    def proj(t, wts):
        return T.sum(T.mul(t, wts))

    def generator():
        return proj(stages()[0], weights["Z"])

    def gumbel():
        return proj(stages()[1].S, weights["Z"])

    def st_mask():
        return proj(stages()[2], weights["M"])

    def masked_predictor():
        return proj(stages()[3], weights["Q"])

    def sel():
        return selection_loss(stages()[2], X.shape[1], w.p_target)

    def ce():
        return task_ce(stages()[3], y)

    def re():
        _, _, M, Q = stages()
        return re_loss(task_ce(Q, y), selection_loss(M, X.shape[1], w.p_target), w)

    def kd_r():
        st, _ = teacher_side()
        return kd_rationale(st, stages()[1])

    def kd_y():
        _, Qt = teacher_side()
        return kd_pred(Qt, stages()[3], tau)

    def kd():
        st, Qt = teacher_side()
        _, sample, _, Q = stages()
        return kd_combined(kd_rationale(st, sample), kd_pred(Qt, Q, tau), tau, w)

    def total():
        st, Qt = teacher_side()
        _, sample, M, Q = stages()
        r = re_loss(task_ce(Q, y), selection_loss(M, X.shape[1], w.p_target), w)
        k = kd_combined(kd_rationale(st, sample), kd_pred(Qt, Q, tau), tau, w)
        return rekd_total(r, k, w)

    return {"generator": generator, "gumbel_softmax": gumbel, "st_mask": st_mask,
            "masked_predictor": masked_predictor, "selection": sel, "task_ce": ce,
            "re": re, "kd_rationale": kd_r, "kd_pred": kd_y, "kd_combined": kd,
            "rekd_total": total}


def _probe_params(model: RationaleModel, composite: str) -> list[tuple[object, str]]:
    gen = model.generator
    pred = model.predictor
    gen_names = [n for n in gen.params if n.endswith(".w")]
    pred_names = [n for n in pred.params if n.endswith(".w")]
    # stages before the predictor only reach generator parameters
    picks = [(gen, gen_names[0]), (gen, gen_names[-1])]
    if composite not in ("generator", "gumbel_softmax", "st_mask", "selection", "kd_rationale"):
        picks += [(pred, pred_names[0]), (pred, pred_names[-1])]
    if composite == "rekd_total":
        picks = [(net, n) for net in (gen, pred) for n in net.params]
    return picks


def check_composites(seed: int = 0) -> list[CheckResult]:
    rng = Rng(seed, (5,))
    L, D, C, B = 5, 3, 3, 2
    w = LossWeights(lambda_select=0.3, lambda_R=0.5, alpha=0.4, p_target=0.4)
    results = []
    for kind, width, heads in (("per-feature-mlp", 6, 1), ("tiny-transformer", 4, 2)):
        spec = BackboneSpec(kind, 1, width, heads, L, D, C)
        student = RationaleModel.build(spec, seed)
        teacher = RationaleModel.build(spec, seed + 1)
        gen = rng.child(len(results)).generator
        X = gen.standard_normal((B, L, D))
        y = gen.integers(0, C, size=B)
        G = sample_noise(rng.child(100 + len(results)), L, B)
        weights = {"Z": gen.standard_normal((B, L, 2)), "M": gen.standard_normal((B, L)),
                   "Q": gen.standard_normal((B, C))}
        tau = 0.7
        with soft_surrogate():
            for name, fn in _composites(student, teacher, X, y, G, tau, w, weights).items():
                err = 0.0
                for net, pname in _probe_params(student, name):
                    err = max(err, T.grad_check(_swap_param(net, pname, fn), net.params[pname]))
                results.append(CheckResult(f"grad/{kind}/{name}", err, GRAD_TOL))
    return results


def identity_errors(seed: int = 0, taus=IDENTITY_TAUS, pairs: int = IDENTITY_PAIRS,
                    L: int = 6) -> tuple[list[CheckResult], list[CheckResult]]:
    """Check ``dKL(S_T || S_S)/dz_S = (S_S - S_T) / tau`` elementwise, and that the
    gradient of the ``tau**2``-scaled term relative to ``S_S - S_T`` equals ``tau``."""
    identity, shrink = [], []
    ratios = {}
    for i, tau in enumerate(taus):
        rng = Rng(seed, (6, i))
        worst, dev = 0.0, 0.0
        rs = []
        for j in range(pairs):
            gen = rng.child(j).generator
            Z_S = Tensor(gen.standard_normal((L, 2)) * 2.0, requires_grad=True)
            Z_T = gen.standard_normal((L, 2)) * 2.0
            G = sample_noise(rng.child(j, 1), L)
            S_T = gumbel_softmax(Tensor(Z_T), G, tau)
            with T.recording() as rec:
                S_S = gumbel_softmax(Z_S, G, tau)
                loss = kd_rationale(S_T, S_S)
            T.backward(rec, loss)
            diff = S_S.S.data - S_T.S.data
            worst = max(worst, float(np.max(np.abs(Z_S.grad - diff / tau))))
            norm = float(np.linalg.norm(diff))
            if norm > 1e-8:
                r = float(np.linalg.norm(tau * tau * Z_S.grad)) / norm
                rs.append(r)
                dev = max(dev, abs(r / tau - 1.0))
        ratios[tau] = float(np.mean(rs))
        identity.append(CheckResult(f"identity/tau={tau:g}", worst, IDENTITY_TOL))
        shrink.append(CheckResult(f"shrink/tau={tau:g}", dev, SHRINK_TOL))
    base = taus[0]
    cross = max(abs((ratios[t] / ratios[base]) / (t / base) - 1.0) for t in taus)
    shrink.append(CheckResult("shrink/cross-tau", cross, SHRINK_TOL))
    return identity, shrink


def run_gradcheck(seed: int = 0) -> GradcheckReport:
    start = time.perf_counter()
    report = GradcheckReport()
    report.results.extend(check_composites(seed))
    identity, shrink = identity_errors(seed)
    report.results.extend(identity + shrink)
    report.seconds = time.perf_counter() - start
    return report
