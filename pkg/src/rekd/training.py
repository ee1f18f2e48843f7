"""Training loops for plain classification (cls), rationale extraction (re)
and distilled rationale extraction (rekd).

All three share one epoch/batch skeleton. The batch order for epoch ``e``
comes from ``Rng(seed, (1, e))`` and the Gumbel noise for batch ``b`` from
``Rng(seed, (2, e, b))``, so a run is a pure function of its config and data.
The checkpoint kept as "best" is the one with the lowest dev criterion:
``L_pred`` for cls, ``L_RE`` for re and rekd (never the distillation total).
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from rekd import tensor as T
from rekd.data import ConfigError, Dataset, batch_iter
from rekd.gumbel import (GumbelSample, TemperatureScheduler, discretize_st, gumbel_softmax,
                         hard_mask, sample_noise, tau_at)
from rekd.losses import (LossBreakdown, LossWeights, kd_combined, kd_pred, kd_rationale,
                         re_loss, rekd_total, selection_loss, task_ce)
from rekd.models import BackboneSpec, RationaleModel, apply_mask
from rekd.tensor import Rng, Tensor

REGIMES = ("cls", "re", "rekd")
EVAL_NOISE = ("none", "sampled")
# 35 epochs x 1250 steps: the reference run length the 100-step cadence was set for
REFERENCE_STEPS = 43750
REFERENCE_CADENCE = 100

METRIC_COLUMNS = (
    "epoch", "step", "tau", "loss_total", "loss_pred", "loss_select", "loss_kd_r",
    "loss_kd_y", "dev_loss_re", "dev_loss_pred", "dev_accuracy", "rationale_ratio", "seconds",
)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, artifacts: "RunArtifacts"):
        super().__init__(message)
        self.artifacts = artifacts


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    regime: str = "re"
    weights: LossWeights = field(default_factory=LossWeights)
    tau0: float = 5.0
    tauK: float = 0.1
    K: int = 0
    anneal_every: int = 0
    epochs: int = 35
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 2026
    teacher_checkpoint: str | None = None
    share_gumbel_noise: bool = True
    backbone: str = "tiny-transformer"
    depth: int = 1
    width: int = 16
    heads: int = 2
    eval_noise: str = "none"
    record_time: bool = False

    def validate(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be >= 0")
        if not (self.tau0 >= self.tauK > 0):
            raise ConfigError("need tau0 >= tauK > 0")
        if self.eval_noise not in EVAL_NOISE:
            raise ConfigError(f"eval_noise must be one of {EVAL_NOISE}, got {self.eval_noise!r}")
        if self.K < 0 or self.anneal_every < 0:
            raise ConfigError("K and anneal_every must be >= 0 (0 selects the default)")

    def replace(self, **changes) -> "TrainConfig":
        weight_keys = {f.name for f in dataclasses.fields(LossWeights)}
        w = {k: changes.pop(k) for k in list(changes) if k in weight_keys}
        cfg = dataclasses.replace(self, **changes)
        if w:
            cfg.weights = dataclasses.replace(cfg.weights, **w)
        return cfg

    def backbone_spec(self, L: int, D: int, C: int) -> BackboneSpec:
        return BackboneSpec(self.backbone, self.depth, self.width, self.heads, L, D, C)

    def scheduler(self, steps_per_epoch: int) -> TemperatureScheduler:
        K = self.K or max(1, self.epochs * steps_per_epoch)
        every = self.anneal_every or max(1, round(REFERENCE_CADENCE * K / REFERENCE_STEPS))
        return TemperatureScheduler(self.tau0, self.tauK, K, every)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.update(d.pop("weights"))
        return d


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: list[Tensor], state: OptimizerState, lr: float, wd: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               grads: list[np.ndarray | None] | None = None) -> None:
    """One AdamW update in place. Weight decay is applied to the parameter
    directly (``p -= lr * wd * p``) before the bias-corrected Adam step."""
    if grads is None:
        grads = [p.grad for p in params]
    for p, g in zip(params, grads):
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NonFiniteGradient(f"{bad} non-finite gradient entries in {p.name or 'param'}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else g
        if wd:
            p.data = p.data - lr * wd * p.data
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)


# ---------------------------------------------------------------- forward passes


def re_forward(model: RationaleModel, X, G: np.ndarray, tau: float):
    """Sampled select-predict pass: returns (GumbelSample, mask, class logits)."""
    Z = model.generator(X)
    sample = gumbel_softmax(Z, G, tau)
    M = discretize_st(sample)
    Q = model.predictor(apply_mask(X, M))
    return sample, M, Q


def deterministic_forward(model: RationaleModel, X,
                          G: np.ndarray | None = None) -> tuple[np.ndarray, Tensor]:
    """Hard-mask pass without gradients: mask is ``argmax(Z + G)`` with
    ``G = 0`` unless given; returns (mask, logits)."""
    if model.generator is None:
        M = np.ones(np.shape(X)[:-1])
        return M, model.predictor(X)
    Z = model.generator(X)
    M = hard_mask(Z.data if G is None else Z.data + G)
    return M, model.predictor(apply_mask(X, M))


def dev_losses(model: RationaleModel, data: Dataset, w: LossWeights | None,
               batch_size: int = 512, noise: Rng | None = None) -> dict[str, float]:
    """Dev metrics under hard masks: ``loss_pred``, ``loss_select``,
    ``loss_re``, ``accuracy`` and ``ratio`` (mean selected fraction).

    Selection is noise-free unless ``noise`` is given, in which case batch
    ``b`` draws its Gumbel noise from ``noise.child(b)``.
    """
    tot = {"loss_pred": 0.0, "loss_select": 0.0, "correct": 0.0, "selected": 0.0}
    n = len(data)
    with T.no_record():
        for b, batch in enumerate(batch_iter(data, batch_size, None)):
            G = None if noise is None else sample_noise(noise.child(b), data.L, len(batch))
            M, Q = deterministic_forward(model, batch.X, G)
            nb = len(batch)
            tot["loss_pred"] += nb * task_ce(Q, batch.y).item()
            if w is not None and model.generator is not None:
                tot["loss_select"] += nb * selection_loss(M, data.L, w.p_target).item()
            tot["correct"] += float((Q.data.argmax(axis=-1) == batch.y).sum())
            tot["selected"] += float(M.sum())
    out = {
        "loss_pred": tot["loss_pred"] / n,
        "loss_select": tot["loss_select"] / n,
        "accuracy": tot["correct"] / n,
        "ratio": tot["selected"] / (n * data.L),
    }
    lam = 0.0 if w is None else w.lambda_select
    out["loss_re"] = out["loss_pred"] + lam * out["loss_select"]
    return out


# ---------------------------------------------------------------- artifacts


@dataclass
class RunArtifacts:
    config: TrainConfig
    spec: BackboneSpec
    model: RationaleModel
    init_state: dict[str, np.ndarray]
    best_state: dict[str, np.ndarray]
    last_state: dict[str, np.ndarray]
    metrics: list[dict] = field(default_factory=list)
    dev_history: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_dev: float = math.inf
    steps: int = 0
    seconds: float = 0.0
    teacher_checksum: str | None = None
    notes: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "regime": self.config.regime,
            "seed": self.config.seed,
            "epochs": self.config.epochs,
            "steps": self.steps,
            "best_epoch": self.best_epoch,
            "best_dev_criterion": self.best_dev,
            "seconds": self.seconds,
            "n_params": sum(n.n_params() for n in self.model.nets()),
            "teacher_checksum": self.teacher_checksum,
            "notes": list(self.notes),
        }


def select_best(dev_history: list[float]) -> int:
    """1-based epoch with the smallest dev criterion; ties go to the earliest."""
    if not dev_history:
        raise ValueError("empty dev history")
    return int(np.argmin(np.asarray(dev_history))) + 1


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def format_metrics_row(row: dict) -> list[str]:
    return [_fmt(row.get(c)) for c in METRIC_COLUMNS]


# ---------------------------------------------------------------- main loop

StepHook = Callable[[dict], None]


def _run(config: TrainConfig, model: RationaleModel, train: Dataset, dev: Dataset,
         step_loss: Callable, dev_key: str, hooks: list[StepHook] | None = None,
         teacher: RationaleModel | None = None) -> RunArtifacts:
    w = config.weights
    params = model.parameters()
    opt = OptimizerState.for_params(params)
    steps_per_epoch = max(1, math.ceil(len(train) / config.batch_size))
    sched = config.scheduler(steps_per_epoch)
    init = model.state()
    art = RunArtifacts(config, model.spec, model, init, init, init)
    if teacher is not None:
        art.teacher_checksum = teacher.checksum()
    t_start = time.perf_counter()
    step = 0
    for epoch in range(1, config.epochs + 1):
        t_epoch = time.perf_counter()
        sums: dict[str, float] = {}
        n_seen = 0
        tau = sched.tau0
        for b, batch in enumerate(batch_iter(train, config.batch_size, Rng(config.seed, (1, epoch)))):
            tau = tau_at(sched, step)
            noise_rng = Rng(config.seed, (2, epoch, b))
            before = model.state()
            model.zero_grad()
            with T.recording() as rec:
                loss, parts = step_loss(batch, tau, noise_rng)
            if not np.isfinite(loss.item()):
                model.load_state(before)
                art.last_state = before
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}", art)
            T.backward(rec, loss)
            try:
                adamw_step(params, opt, config.lr, config.weight_decay,
                           (config.adam_beta1, config.adam_beta2), config.adam_eps)
            except NonFiniteGradient as exc:
                model.load_state(before)
                art.last_state = before
                raise TrainingDiverged(str(exc), art) from exc
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(batch)
            n_seen += len(batch)
            for hook in hooks or ():
                hook({"epoch": epoch, "step": step, **parts})
            step += 1

        dev_noise = Rng(config.seed, (3,)) if config.eval_noise == "sampled" else None
        dev_stats = dev_losses(model, dev, w if config.regime != "cls" else None, noise=dev_noise)
        crit = dev_stats[dev_key]
        art.dev_history.append(crit)
        if crit < art.best_dev:
            art.best_dev = crit
            art.best_epoch = epoch
            art.best_state = model.state()
        mean = {k: v / max(n_seen, 1) for k, v in sums.items()}
        is_cls = config.regime == "cls"
        art.metrics.append({
            "epoch": epoch,
            "step": step,
            "tau": None if is_cls else tau,
            "loss_total": mean.get("total"),
            "loss_pred": mean.get("pred"),
            "loss_select": mean.get("select"),
            "loss_kd_r": mean.get("kd_r"),
            "loss_kd_y": mean.get("kd_y"),
            "dev_loss_re": None if is_cls else dev_stats["loss_re"],
            "dev_loss_pred": dev_stats["loss_pred"],
            "dev_accuracy": dev_stats["accuracy"],
            "rationale_ratio": dev_stats["ratio"],
            "seconds": (time.perf_counter() - t_epoch) if config.record_time else None,
        })
    art.steps = step
    art.last_state = model.state()
    art.seconds = time.perf_counter() - t_start
    model.load_state(art.best_state)
    return art


def _check_regime(config: TrainConfig, regime: str):
    config.validate()
    if config.regime != regime:
        raise ConfigError(f"config regime is {config.regime!r}, expected {regime!r}")


def _model_for(config: TrainConfig, data: Dataset, with_generator: bool,
               model: RationaleModel | None) -> RationaleModel:
    spec = config.backbone_spec(data.L, data.D, data.C)
    if model is None:
        return RationaleModel.build(spec, config.seed, with_generator=with_generator)
    if model.spec.L != data.L or model.spec.D != data.D or model.spec.C != data.C:
        raise ConfigError("model shape does not match the data")
    return model


def train_cls(config: TrainConfig, train: Dataset, dev: Dataset,
              model: RationaleModel | None = None, hooks=None) -> RunArtifacts:
    _check_regime(config, "cls")
    model = _model_for(config, train, False, model)

    def step_loss(batch, tau, rng):
        pred = task_ce(model.predictor(batch.X), batch.y)
        return pred, {"total": pred.item(), "pred": pred.item()}

    return _run(config, model, train, dev, step_loss, "loss_pred", hooks)


def _re_terms(model, batch, tau, G, w):
    sample, M, Q = re_forward(model, batch.X, G, tau)
    pred = task_ce(Q, batch.y)
    select = selection_loss(M, batch.L, w.p_target)
    return sample, Q, pred, select, re_loss(pred, select, w)


def train_re(config: TrainConfig, train: Dataset, dev: Dataset,
             model: RationaleModel | None = None, hooks=None) -> RunArtifacts:
    _check_regime(config, "re")
    model = _model_for(config, train, True, model)
    w = config.weights

    def step_loss(batch, tau, rng):
        G = sample_noise(rng, batch.L, len(batch))
        _, _, pred, select, re = _re_terms(model, batch, tau, G, w)
        return re, {"total": re.item(), "pred": pred.item(), "select": select.item(),
                    "tau": tau}

    return _run(config, model, train, dev, step_loss, "loss_re", hooks)


def teacher_outputs(teacher: RationaleModel, X, G: np.ndarray, tau: float):
    """Frozen teacher pass at the student's temperature: (GumbelSample, logits)."""
    with T.no_record():
        sample, _, Q = re_forward(teacher, X, G, tau)
    return sample, Q.detach()


def train_rekd(config: TrainConfig, train: Dataset, dev: Dataset, teacher: RationaleModel,
               model: RationaleModel | None = None, hooks=None) -> RunArtifacts:
    _check_regime(config, "rekd")
    if teacher.generator is None:
        raise ConfigError("teacher must be a rationale model with a generator")
    ts = teacher.spec
    if ts.L != train.L or ts.D != train.D or ts.C != train.C:
        raise ConfigError(f"teacher expects L={ts.L}, D={ts.D}, C={ts.C}; data has "
                          f"L={train.L}, D={train.D}, C={train.C}")
    model = _model_for(config, train, True, model)
    w = config.weights

    def step_loss(batch, tau, rng):
        G = sample_noise(rng, batch.L, len(batch))
        if config.share_gumbel_noise:
            G_T = G
        else:
            G_T = sample_noise(rng.child(1), batch.L, len(batch))
        S_T, Q_T = teacher_outputs(teacher, batch.X, G_T, tau)
        S_S, Q_S, pred, select, re = _re_terms(model, batch, tau, G, w)
        kd_r = kd_rationale(S_T, S_S)
        kd_y = kd_pred(Q_T, Q_S, tau)
        kd = kd_combined(kd_r, kd_y, tau, w)
        total = rekd_total(re, kd, w)
        return total, {"total": total.item(), "pred": pred.item(), "select": select.item(),
                       "kd_r": kd_r.item(), "kd_y": kd_y.item(), "kd": kd.item(),
                       "re": re.item(), "tau": tau, "tau_kd": tau,
                       "tau_teacher": S_T.tau, "tau_student": S_S.tau}

    art = _run(config, model, train, dev, step_loss, "loss_re", hooks, teacher=teacher)
    if teacher.checksum() != art.teacher_checksum:
        raise RuntimeError("teacher parameters changed during distillation")
    return art


def train(config: TrainConfig, train_set: Dataset, dev_set: Dataset,
          teacher: RationaleModel | None = None, hooks=None) -> RunArtifacts:
    if config.regime == "cls":
        return train_cls(config, train_set, dev_set, hooks=hooks)
    if config.regime == "re":
        return train_re(config, train_set, dev_set, hooks=hooks)
    if teacher is None:
        raise ConfigError("rekd needs a teacher model")
    return train_rekd(config, train_set, dev_set, teacher, hooks=hooks)
