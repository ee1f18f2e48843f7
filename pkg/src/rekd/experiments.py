"""Desk-scale presets and the multi-seed teacher/student study.

The planted task uses the default :class:`~rekd.data.DatasetSpec`. The
teacher is a width-16 two-head transformer, the student a width-4
one-head transformer. ``lambda_select`` was tuned per model on dev L_RE
subject to the realized ratio staying within 1% of ``p_target``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rekd.data import Dataset, DatasetSpec, gen_planted
from rekd.evaluation import EvalReport, evaluate_with_config
from rekd.training import RunArtifacts, TrainConfig, train

SEEDS = (2026, 2027, 2028, 2029, 2030)
SWEEP_SEEDS = (2026, 2027, 2028)
SWEEP_TARGETS = (0.05, 0.15, 0.35, 0.75, 1.0)
CLS_EPOCHS = 20

_BASE = TrainConfig(backbone="tiny-transformer", eval_noise="sampled")
TEACHER = _BASE.replace(width=16, heads=2, lambda_select=0.01)
STUDENT = _BASE.replace(width=4, heads=1, lambda_select=0.05)
SWEEP = _BASE.replace(regime="re", width=16, heads=2, lambda_select=0.05)


@dataclass
class RunResult:
    seed: int
    accuracy: float
    ratio: float
    dev_loss_re: float
    artifacts: RunArtifacts = field(repr=False)


def run_one(cfg: TrainConfig, data: tuple[Dataset, Dataset, Dataset], teacher=None) -> RunResult:
    tr, dv, te = data
    art = train(cfg, tr, dv, teacher=teacher)
    rep: EvalReport = evaluate_with_config(art.model, te, cfg)
    return RunResult(cfg.seed, rep.accuracy, rep.rationale_ratio_mean, art.best_dev, art)


def pick_teacher(runs: list[RunResult]) -> RunResult:
    """Teacher seed with the lowest dev L_RE (earliest seed on ties)."""
    return min(runs, key=lambda r: r.dev_loss_re)


@dataclass
class Study:
    runs: dict[str, list[RunResult]]
    teacher_seed: int

    def mean(self, name: str, attr: str = "accuracy") -> float:
        return float(np.mean([getattr(r, attr) for r in self.runs[name]]))

    def column(self, name: str, attr: str = "accuracy") -> np.ndarray:
        return np.array([getattr(r, attr) for r in self.runs[name]])


def capacity_study(seeds=SEEDS, data_spec: DatasetSpec | None = None,
                   teacher_cfg: TrainConfig = TEACHER, student_cfg: TrainConfig = STUDENT,
                   log=None) -> Study:
    """CLS and RE for teacher and student, then REKD students at the tuned
    alpha and at alpha = 0, all distilled from the best RE teacher."""
    data = gen_planted(data_spec or DatasetSpec())
    runs: dict[str, list[RunResult]] = {}

    def batch(name, cfg, teacher=None):
        runs[name] = [run_one(cfg.replace(seed=s), data, teacher) for s in seeds]
        if log:
            log(f"{name}: acc {[round(r.accuracy, 3) for r in runs[name]]} "
                f"ratio {[round(r.ratio, 3) for r in runs[name]]}")

    batch("teacher_cls", teacher_cfg.replace(regime="cls", epochs=CLS_EPOCHS))
    batch("student_cls", student_cfg.replace(regime="cls", epochs=CLS_EPOCHS))
    batch("teacher_re", teacher_cfg.replace(regime="re"))
    batch("student_re", student_cfg.replace(regime="re"))
    best = pick_teacher(runs["teacher_re"])
    teacher = best.artifacts.model
    batch("student_rekd", student_cfg.replace(regime="rekd"), teacher)
    batch("student_rekd_alpha0", student_cfg.replace(regime="rekd", alpha=0.0), teacher)
    return Study(runs, best.seed)
