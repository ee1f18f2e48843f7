"""Predictive-performance and rationale metrics, and the ratio/accuracy sweep."""

from __future__ import annotations

import math
import traceback
from dataclasses import asdict, dataclass, field

import numpy as np

from rekd import tensor as T
from rekd.data import Dataset, batch_iter
from rekd.gumbel import discretize_st, gumbel_softmax, sample_noise
from rekd.models import RationaleModel, apply_mask
from rekd.tensor import Rng


@dataclass
class EvalReport:
    accuracy: float
    rationale_ratio_mean: float
    rationale_ratio_std: float
    per_class_accuracy: list[float]
    recovery_precision: float | None = None
    recovery_recall: float | None = None
    recovery_f1: float | None = None
    n: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def recovery_prf(M, true_mask) -> tuple[float, float, float]:
    """Set-overlap precision/recall/F1 of selected rows against planted rows.

    An empty selection scores 0 precision. Diagnostic only.
    """
    M = np.asarray(M, dtype=bool)
    truth = np.asarray(true_mask, dtype=bool)
    if M.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {M.shape} vs {truth.shape}")
    hit = float(np.logical_and(M, truth).sum())
    precision = hit / M.sum() if M.sum() else 0.0
    recall = hit / truth.sum() if truth.sum() else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return float(precision), float(recall), float(f1)


def select_masks(model: RationaleModel, X, tau: float = 0.1, sampled: bool = False,
                 rng: Rng | None = None) -> np.ndarray:
    """Binary masks ``[N, L]``; noise-free argmax of the generator logits unless sampled."""
    X = np.asarray(X, dtype=np.float64)
    if model.generator is None:
        return np.ones(X.shape[:-1])
    with T.no_record():
        Z = model.generator(X)
        if sampled:
            G = sample_noise(rng or Rng(0), X.shape[-2], X.shape[0])
        else:
            G = np.zeros(Z.shape)
        return discretize_st(gumbel_softmax(Z, G, tau)).data


def evaluate(model: RationaleModel, samples: Dataset, tau_eval: float = 0.1,
             sampled: bool = False, rng: Rng | None = None, batch_size: int = 512) -> EvalReport:
    if len(samples) == 0:
        raise ValueError("cannot evaluate on an empty sample set")
    rng = rng or Rng(0, (99,))
    masks, preds = [], []
    with T.no_record():
        for b, batch in enumerate(batch_iter(samples, batch_size, None)):
            M = select_masks(model, batch.X, tau_eval, sampled, rng.child(b))
            Q = model.predictor(apply_mask(batch.X, M))
            masks.append(M)
            preds.append(Q.data.argmax(axis=-1))
    M = np.concatenate(masks)
    pred = np.concatenate(preds)
    correct = pred == samples.y
    ratios = M.mean(axis=1)
    per_class = [float(correct[samples.y == c].mean()) if np.any(samples.y == c) else math.nan
                 for c in range(samples.C)]
    report = EvalReport(float(correct.mean()), float(ratios.mean()), float(ratios.std()),
                        per_class, n=len(samples))
    if samples.true_mask is not None:
        p, r, f = recovery_prf(M.reshape(-1), samples.true_mask.reshape(-1))
        report.recovery_precision, report.recovery_recall, report.recovery_f1 = p, r, f
    return report


def evaluate_with_config(model: RationaleModel, samples: Dataset, config) -> EvalReport:
    """Evaluate at ``config.tauK`` using the config's selection-noise mode."""
    return evaluate(model, samples, config.tauK, sampled=config.eval_noise == "sampled",
                    rng=Rng(config.seed, (4,)))


@dataclass
class SweepCell:
    p_target: float
    seed: int
    accuracy: float | None = None
    ratio: float | None = None
    error: str | None = None


@dataclass
class SweepRow:
    p_target: float
    accuracy_mean: float
    accuracy_std: float
    ratio_mean: float
    ratio_std: float
    n_runs: int
    n_failed: int
    cells: list[SweepCell] = field(default_factory=list)


SWEEP_COLUMNS = ("p_target", "accuracy_mean", "accuracy_std", "ratio_mean", "ratio_std",
                 "n_runs", "n_failed")


def sweep_ratio_accuracy(base_config, data: tuple[Dataset, Dataset, Dataset],
                         p_targets, seeds, teacher=None) -> list[SweepRow]:
    """Train one rationale model per (p_target, seed) and aggregate test accuracy
    and realized rationale ratio per p_target. A failing cell is recorded and
    the sweep moves on."""
    from rekd.training import train

    if not len(p_targets) or not len(seeds):
        raise ValueError("p_targets and seeds must be non-empty")
    train_set, dev_set, test_set = data
    rows = []
    for p in p_targets:
        cells = []
        for seed in seeds:
            cell = SweepCell(float(p), int(seed))
            try:
                cfg = base_config.replace(p_target=float(p), seed=int(seed))
                art = train(cfg, train_set, dev_set, teacher=teacher)
                rep = evaluate_with_config(art.model, test_set, cfg)
                cell.accuracy, cell.ratio = rep.accuracy, rep.rationale_ratio_mean
            except Exception as exc:  # noqa: BLE001 - one bad cell must not stop the sweep
                cell.error = "".join(traceback.format_exception_only(type(exc), exc)).strip()
            cells.append(cell)
        ok = [c for c in cells if c.error is None]
        acc = np.array([c.accuracy for c in ok]) if ok else np.array([math.nan])
        rat = np.array([c.ratio for c in ok]) if ok else np.array([math.nan])
        rows.append(SweepRow(float(p), float(acc.mean()), float(acc.std()), float(rat.mean()),
                             float(rat.std()), len(ok), len(cells) - len(ok), cells))
    return rows
