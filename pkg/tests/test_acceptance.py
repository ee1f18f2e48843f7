"""End-to-end acceptance checks on the planted-rationale task.

Trend checks train teacher and student models over several seeds and take a
few minutes on one core.
"""

import math
import time

import numpy as np
import pytest

from rekd import experiments as E
from rekd import tensor as T
from rekd.cli import run_command
from rekd.data import DatasetSpec, gen_planted
from rekd.evaluation import sweep_ratio_accuracy
from rekd.gradcheck import run_gradcheck
from rekd.gumbel import TemperatureScheduler, gumbel_from_uniform, gumbel_softmax, tau_at
from rekd.losses import (LossWeights, kd_combined, kd_pred, kd_rationale, re_loss, rekd_total,
                         selection_loss, task_ce)
from rekd.models import BackboneSpec, RationaleModel, apply_mask
from rekd.tensor import Rng, Tensor
from rekd.training import METRIC_COLUMNS, format_metrics_row

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def gradcheck_report():
    return run_gradcheck()


@pytest.fixture(scope="module")
def study():
    start = time.perf_counter()
    s = E.capacity_study()
    s.seconds = time.perf_counter() - start
    return s


def test_1_gradient_correctness(gradcheck_report, record_criterion):
    composites = [r for r in gradcheck_report.results if r.name.startswith("grad/")]
    worst = max(r.value for r in composites)
    ok = worst < 1e-4 and gradcheck_report.seconds < 60
    record_criterion(1, ok, f"{len(composites)} composites, max rel. error {worst:.2e} "
                            f"(< 1e-4), {gradcheck_report.seconds:.1f}s (< 60s)")
    assert ok


def test_2_distillation_gradient_identity(gradcheck_report, record_criterion):
    ident = max(r.value for r in gradcheck_report.results if r.name.startswith("identity/"))
    shrink = max(r.value for r in gradcheck_report.results if r.name.startswith("shrink/"))
    ok = ident < 1e-6 and shrink < 0.05
    record_criterion(2, ok, f"max |grad - (S_S - S_T)/tau| {ident:.2e} (< 1e-6) over 4 x 100 "
                            f"pairs; tau-proportional shrink deviation {shrink:.2e} (< 5%)")
    assert ok


def _unit_checks():
    w = LossWeights()
    M = np.zeros(196)
    M[:29] = 1
    p2 = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    kl_t2 = float(np.sum(p2 * np.log(p2 / 0.5)))
    return [
        ("softmax [2,0]", T.softmax_stable(Tensor([2.0, 0.0])).data[0], 0.8808, 1e-4),
        ("softmax [2,0] tau=0.5", T.softmax_stable(Tensor([2.0, 0.0]), 0.5).data[0], 0.9820, 1e-4),
        ("gumbel U=0.5", gumbel_from_uniform(0.5), 0.3665, 1e-4),
        ("gumbel U=1/e", gumbel_from_uniform(math.exp(-1)), 0.0, 1e-12),
        ("gumbel-softmax tau=0.01", gumbel_softmax([[2.0, 0.0]], np.zeros((1, 2)), 0.01).S.data[0, 0],
         1.0, 1e-6),
        ("selection exact", selection_loss([1, 1] + [0] * 8, 10, 0.2).item(), 0.0, 1e-12),
        ("selection 5 of target 2", selection_loss([1] * 5 + [0] * 5, 10, 0.2).item(), 9.0, 1e-12),
        ("selection L=196", selection_loss(M, 196, 0.15).item(), 0.16, 1e-9),
        ("ce confident", task_ce([10.0, -10.0], 0).item(), 0.0, 1e-8),
        ("ce uniform C=2", task_ce([0.0, 0.0], 1).item(), math.log(2), 1e-12),
        ("ce uniform C=4", task_ce([0.0] * 4, 2).item(), math.log(4), 1e-12),
        ("re lambda=0", re_loss(0.5, 9.0, LossWeights(lambda_select=0.0)).item(), 0.5, 1e-12),
        ("re lambda=0.01", re_loss(0.5, 9.0, LossWeights(lambda_select=0.01)).item(), 0.59, 1e-12),
        ("kd_r identical", kd_rationale(np.array([[0.3, 0.7]]), np.array([[0.3, 0.7]])).item(), 0.0, 1e-15),
        ("kd_r example", kd_rationale(np.array([[0.8808, 0.1192]]), np.array([[0.5, 0.5]])).item(),
         0.3278, 1e-3),
        ("kd_y identical", kd_pred([1.0, 2.0], [1.0, 2.0], 3.0).item(), 0.0, 1e-15),
        ("kd_y tau=1", kd_pred([2.0, 0.0], [0.0, 0.0], 1.0).item(), 0.3278, 1e-3),
        # KL([0.7311, 0.2689] || uniform) = 0.11094
        ("kd_y tau=2", kd_pred([2.0, 0.0], [0.0, 0.0], 2.0).item(), kl_t2, 1e-12),
        ("kd_combined", kd_combined(0.4, 0.1, 2.0, w).item(), 0.6, 1e-12),
        ("kd_combined zero", kd_combined(0.0, 0.0, 2.0, w).item(), 0.0, 1e-15),
        ("rekd alpha=0.3", rekd_total(1.0, 0.6, w).item(), 0.72, 1e-12),
        ("rekd alpha=1", rekd_total(1.3, 0.6, LossWeights(alpha=1.0)).item(), 1.3, 0.0),
        ("rekd alpha=0", rekd_total(1.3, 0.6, LossWeights(alpha=0.0)).item(), 0.6, 0.0),
    ]


def test_3_loss_unit_values(record_criterion):
    bad = [f"{name}: {got!r} vs {want!r}" for name, got, want, tol in _unit_checks()
           if not abs(got - want) <= tol]
    n = len(_unit_checks())
    record_criterion(3, not bad, f"{n - len(bad)}/{n} worked examples" + (f"; {bad}" if bad else ""))
    assert not bad


def test_4_scheduler(record_criterion):
    s = TemperatureScheduler(5.0, 0.1, 1000, 100)
    taus = [tau_at(s, k) for k in range(1001)]
    mid = abs(tau_at(s, 500) - math.sqrt(0.5))
    plateaus = len(set(taus))
    ok = (taus[0] == 5.0 and taus[1000] == 0.1 and mid < 1e-6
          and all(a >= b for a, b in zip(taus, taus[1:])) and plateaus == 1000 // 100 + 1)
    record_criterion(4, ok, f"tau(0)={taus[0]}, tau(K)={taus[1000]}, |mid - sqrt(0.5)|={mid:.1e}, "
                            f"{plateaus} plateaus (expect 11), non-increasing")
    assert ok


def test_5_faithfulness(record_criterion):
    gen = Rng(2024, (9,)).generator
    trials = changed = 0
    for kind, heads in (("per-feature-mlp", 1), ("tiny-transformer", 2)):
        spec = BackboneSpec(kind, 1, 8, heads, 20, 8, 4)
        model = RationaleModel.build(spec, 7)
        for i in range(500):
            X = gen.normal(size=(20, 8))
            if i % 2:
                with T.no_record():
                    M = (model.generator(X).data[:, 1] > model.generator(X).data[:, 0]) * 1.0
            else:
                M = (gen.random(20) < gen.random()) * 1.0
            Y = X.copy()
            off = M == 0
            Y[off] = gen.normal(0, 10, size=(int(off.sum()), 8))
            with T.no_record():
                same = np.array_equal(model.predictor(apply_mask(X, M)).data,
                                      model.predictor(apply_mask(Y, M)).data)
            trials += 1
            changed += not same
    record_criterion(5, changed == 0, f"{trials} trials, {changed} with a changed Q (bitwise)")
    assert changed == 0


def _strip_kd(rows):
    skip = {METRIC_COLUMNS.index("loss_kd_r"), METRIC_COLUMNS.index("loss_kd_y")}
    return [[v for i, v in enumerate(r) if i not in skip] for r in rows]


def test_6_degenerate_regimes(study, record_criterion):
    data = gen_planted(DatasetSpec())
    seed = E.SEEDS[0]
    teacher = next(r for r in study.runs["teacher_re"] if r.seed == study.teacher_seed)
    re_run = study.runs["student_re"][0]
    a1 = E.run_one(E.STUDENT.replace(regime="rekd", alpha=1.0, seed=seed), data,
                   teacher.artifacts.model)
    rows_re = _strip_kd([format_metrics_row(r) for r in re_run.artifacts.metrics])
    rows_a1 = _strip_kd([format_metrics_row(r) for r in a1.artifacts.metrics])
    identical = rows_re == rows_a1

    full = E.run_one(E.TEACHER.replace(regime="re", p_target=1.0, seed=seed), data)
    cls = study.runs["teacher_cls"][0]
    gap = abs(full.accuracy - cls.accuracy)
    ok = identical and gap <= 0.01
    record_criterion(6, ok, f"alpha=1 metrics identical to RE: {identical}; p_target=1 RE acc "
                            f"{full.accuracy:.4f} (ratio {full.ratio:.3f}) vs CLS {cls.accuracy:.4f}, "
                            f"gap {gap:.4f} (<= 0.01)")
    assert ok


def test_7_capacity_dilemma(study, record_criterion):
    drop_s = study.mean("student_cls") - study.mean("student_re")
    drop_t = study.mean("teacher_cls") - study.mean("teacher_re")
    ok = drop_s > drop_t
    record_criterion(7, ok, f"student CLS-RE drop {drop_s:.3f} > teacher drop {drop_t:.3f} "
                            f"over {len(E.SEEDS)} seeds (study {study.seconds:.0f}s)")
    assert ok


def test_8_distillation_improves_student(study, record_criterion):
    imp = study.column("student_rekd") - study.column("student_re")
    ratio_gap = abs(study.mean("student_rekd", "ratio") - study.mean("student_re", "ratio"))
    wins = int((imp > 0).sum())
    ok = (study.mean("student_rekd") > study.mean("student_re") and imp.mean() > 0
          and wins >= 4 and ratio_gap <= 0.02)
    record_criterion(8, ok, f"REKD {study.mean('student_rekd'):.3f} vs RE "
                            f"{study.mean('student_re'):.3f}, mean gain {imp.mean():.3f}, "
                            f"{wins}/5 seeds improve, ratio gap {ratio_gap:.4f} (<= 0.02); "
                            f"teacher seed {study.teacher_seed}")
    assert ok


def test_9_ratio_accuracy_sweep(record_criterion):
    data = gen_planted(DatasetSpec())
    rows = sweep_ratio_accuracy(E.SWEEP, data, E.SWEEP_TARGETS, E.SWEEP_SEEDS)
    acc = [r.accuracy_mean for r in rows]
    inversions = []
    for a, b in zip(rows, rows[1:]):
        if b.accuracy_mean < a.accuracy_mean:
            pooled = math.sqrt((a.accuracy_std ** 2 + b.accuracy_std ** 2) / 2)
            inversions.append(a.accuracy_mean - b.accuracy_mean <= pooled)
    shape_ok = len(inversions) == 0 or (len(inversions) == 1 and inversions[0])
    ratio_err = max(abs(r.ratio_mean - r.p_target) for r in rows)
    failed = sum(r.n_failed for r in rows)
    ok = shape_ok and ratio_err <= 0.02 and failed == 0
    record_criterion(9, ok, f"accuracy {[round(a, 3) for a in acc]} "
                            f"({len(inversions)} inversions), ratios "
                            f"{[round(r.ratio_mean, 3) for r in rows]}, max ratio error "
                            f"{ratio_err:.4f} (<= 0.02)")
    assert ok


def test_10_alpha_zero_sanity(study, record_criterion):
    a0 = study.column("student_rekd_alpha0", "dev_loss_re")
    tuned = study.column("student_rekd", "dev_loss_re")
    count = int((a0 >= tuned).sum())
    finite = bool(np.all(np.isfinite(a0)))
    ok = finite and count >= 4
    record_criterion(10, ok, f"alpha=0 dev L_RE >= alpha=0.3 dev L_RE on {count}/5 seeds "
                             f"(means {a0.mean():.3f} vs {tuned.mean():.3f})")
    assert ok


def test_11_reproducibility(tmp_path, record_criterion):
    same = []
    for cmd, extra in (("train-re", ["--width", "4", "--heads", "1", "--lambda_select", "0.05"]),
                       ("train-cls", [])):
        files = []
        for rep in ("a", "b"):
            run = tmp_path / f"{cmd}-{rep}"
            assert run_command([cmd, "--run-dir", str(run), "--eval_noise", "sampled"] + extra) == 0
            files.append((run / "metrics.csv").read_bytes())
        same.append(files[0] == files[1])
    ok = all(same)
    record_criterion(11, ok, f"repeated CLI runs byte-identical metrics.csv: RE {same[0]}, "
                             f"CLS {same[1]}")
    assert ok
