"""Optimisation loops: teacher training, distillation, fine-tuning, evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .analysis import PredictionLog, compute_metric
from .data import DEFAULT_MAX_LEN, Dataset, TaskSpec, Vocab, batch_iter
from .distill import (DistillConfig, LayerMap, ProjectionSet, feature_loss, kd_response_loss,
                      resolve_layer_map, task_loss, total_loss)
from .model import ConfigError, Model, ModelConfig, build_model, copy_model, forward, init_from_teacher
from .tensor import NonFiniteError, Tensor, backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor],
              grads: dict[str, np.ndarray] | None = None) -> AdamState:
    """One bias-corrected Adam update, in place. Missing gradients count as zero."""
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params.values() if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


@dataclass(frozen=True)
class RunConfig:
    epochs: int = 10
    batch_size: int = 12
    seed: int = 0
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    max_len: int = DEFAULT_MAX_LEN
    distill: DistillConfig = field(default_factory=DistillConfig)
    layer_map: object = "auto"
    init_from_teacher: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")

    def adam(self) -> AdamState:
        return AdamState(self.lr, self.beta1, self.beta2, self.eps)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("epochs", "batch_size", "seed", "lr", "beta1",
                                             "beta2", "eps", "clip_norm", "max_len",
                                             "init_from_teacher")}
        lm = self.layer_map
        out["layer_map"] = lm if isinstance(lm, str) or lm is None else [list(p) for p in lm]
        out["distill"] = self.distill.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = dict(d)
        if "distill" in d:
            d["distill"] = DistillConfig(**d["distill"])
        lm = d.get("layer_map")
        if isinstance(lm, list):
            d["layer_map"] = tuple(tuple(p) for p in lm)
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_task: float
    loss_int: float
    loss_kd: float
    dev_metric: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    steps: list[tuple[float, float, float, float]] = field(default_factory=list)
    best_epoch: int | None = None

    COLUMNS = ("epoch", "loss_total", "loss_task", "loss_int", "loss_kd", "dev_metric")

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in self.COLUMNS[1:]])


@dataclass
class MetricReport:
    task: str
    metric: str
    value: float
    n: int

    def to_dict(self) -> dict:
        return {"task": self.task, "metric": self.metric, "value": self.value, "n": self.n}


# ---------------------------------------------------------------------------
# prediction and evaluation
# ---------------------------------------------------------------------------

def predict_logits(model: Model, ds: Dataset, vocab: Vocab, batch_size: int = 32,
                   max_len: int = DEFAULT_MAX_LEN) -> np.ndarray:
    rows = []
    with no_grad():
        for batch in batch_iter(ds, batch_size, vocab=vocab, max_len=max_len):
            rows.append(forward(model, batch).logits.data)
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, model.config.num_outputs))


def hard_predictions(logits: np.ndarray, task_kind: str) -> np.ndarray:
    return logits[:, 0] if task_kind == "regression" else logits.argmax(axis=1)


def _task_of(ds: Dataset, spec: TaskSpec | None) -> TaskSpec:
    spec = spec or ds.task
    if spec is None:
        raise ConfigError("dataset has no task spec attached; pass one explicitly")
    return spec


def evaluate(model: Model, ds: Dataset, spec: TaskSpec | None = None, *, vocab: Vocab,
             model_id: str = "model", batch_size: int = 32,
             max_len: int = DEFAULT_MAX_LEN) -> tuple[MetricReport, PredictionLog]:
    """Deterministic full pass over ``ds``; one log record per example, in order."""
    spec = _task_of(ds, spec)
    logits = predict_logits(model, ds, vocab, batch_size, max_len)
    preds = hard_predictions(logits, spec.task_kind)
    regression = spec.task_kind == "regression"
    records = []
    for ex, p, z in zip(ds.examples, preds, logits):
        records.append({
            "id": ex.id,
            "label": float(ex.label) if regression else int(ex.label),
            "pred": float(p) if regression else int(p),
            "logits": [float(x) for x in z],
            "model_id": model_id,
            "task": spec.name,
        })
    value = compute_metric(spec.metric, preds, ds.labels())
    return MetricReport(spec.name, spec.metric, float(value), len(ds)), PredictionLog(records)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

StepFn = Callable[[object, np.random.Generator], tuple[Tensor, tuple[float, float, float]]]


def _fit(model: Model, extra_params: dict[str, Tensor], ds: Dataset, run: RunConfig,
         vocab: Vocab, step_fn: StepFn, dev: Dataset | None, spec: TaskSpec) -> TrainLog:
    params = {**model.params, **extra_params}
    state = run.adam()
    trainlog = TrainLog()
    eval_ds = dev if dev is not None else ds
    best_state, best_metric = None, -math.inf
    drop_rng = np.random.default_rng([run.seed, 1])
    for epoch in range(1, run.epochs + 1):
        sums = np.zeros(4)
        n_steps = 0
        for batch in batch_iter(ds, run.batch_size, shuffle_seed=[run.seed, epoch],
                                vocab=vocab, max_len=run.max_len):
            for p in params.values():
                p.grad = None
            loss, parts = step_fn(batch, drop_rng)
            backward(loss, inputs=params.values())
            if run.clip_norm:
                clip_grad_norm(params, run.clip_norm)
            adam_step(state, params)
            row = (loss.item(),) + tuple(parts)
            trainlog.steps.append(row)
            sums += row
            n_steps += 1
        means = sums / max(n_steps, 1)
        logits = predict_logits(model, eval_ds, vocab, max_len=run.max_len)
        metric = compute_metric(spec.metric, hard_predictions(logits, spec.task_kind), eval_ds.labels())
        trainlog.records.append(EpochRecord(epoch, *map(float, means), float(metric)))
        log.info("epoch %d loss %.5f metric %.4f", epoch, means[0], metric)
        if metric > best_metric:
            best_metric, best_state = metric, model.state()
            trainlog.best_epoch = epoch
    for p in params.values():
        p.grad = None
    model.load_state(best_state)
    return trainlog


def _check_arity(cfg: ModelConfig, spec: TaskSpec) -> None:
    if cfg.num_outputs != spec.num_outputs or cfg.task_kind != spec.task_kind:
        raise ConfigError(
            f"model has {cfg.num_outputs} {cfg.task_kind} outputs; task {spec.name} needs "
            f"{spec.num_outputs} {spec.task_kind} outputs")


def _hard_step(model: Model, kind: str):
    def step(batch, rng):
        trace = forward(model, batch, rng=rng if model.config.dropout else None)
        loss = task_loss(trace.logits, batch.labels, kind)
        return loss, (loss.item(), 0.0, 0.0)
    return step


def train_teacher(cfg: ModelConfig, ds: Dataset, run: RunConfig, *, vocab: Vocab,
                  dev: Dataset | None = None, spec: TaskSpec | None = None) -> tuple[Model, TrainLog]:
    """Task-loss training from a seeded init; keeps the best-dev-metric epoch."""
    spec = _task_of(ds, spec)
    _check_arity(cfg, spec)
    model = build_model(cfg, run.seed)
    trainlog = _fit(model, {}, ds, run, vocab, _hard_step(model, cfg.task_kind), dev, spec)
    return model, trainlog


def finetune(model: Model, ds: Dataset, run: RunConfig, *, vocab: Vocab,
             dev: Dataset | None = None, spec: TaskSpec | None = None) -> tuple[Model, TrainLog]:
    """Like :func:`train_teacher` but starting from a copy of ``model``."""
    spec = _task_of(ds, spec)
    _check_arity(model.config, spec)
    tuned = copy_model(model).requires_grad_(True)
    trainlog = _fit(tuned, {}, ds, run, vocab, _hard_step(tuned, tuned.config.task_kind), dev, spec)
    return tuned, trainlog


@dataclass
class DistillResult:
    student: Model
    log: TrainLog
    layer_map: LayerMap
    projections: ProjectionSet

    def __iter__(self):
        return iter((self.student, self.log))


def distill(teacher: Model, student_cfg: ModelConfig, ds: Dataset, run: RunConfig, *,
            vocab: Vocab, dev: Dataset | None = None,
            spec: TaskSpec | None = None) -> DistillResult:
    """Train a fresh student against a frozen teacher.

    Every step evaluates the teacher without recording gradients and
    minimises ``w_hard * task + w_int * feature + w_kd * response``.
    """
    spec = _task_of(ds, spec)
    _check_arity(student_cfg, spec)
    tcfg = teacher.config
    if (tcfg.num_outputs, tcfg.task_kind) != (student_cfg.num_outputs, student_cfg.task_kind):
        raise ConfigError("teacher and student heads differ")
    lmap = resolve_layer_map(run.layer_map, student_cfg.num_layers, tcfg.num_layers)
    student = build_model(student_cfg, run.seed)
    if run.init_from_teacher:
        init_from_teacher(student, teacher, lmap)
    proj = ProjectionSet(lmap, student_cfg.hidden_dim, tcfg.hidden_dim, seed=run.seed)
    dc = run.distill
    kind = student_cfg.task_kind

    def step(batch, rng):
        with no_grad():
            t_trace = forward(teacher, batch)
        s_trace = forward(student, batch, rng=rng if student_cfg.dropout else None)
        l_task = task_loss(s_trace.logits, batch.labels, kind) if dc.w_hard else None
        l_int = feature_loss(t_trace, s_trace, lmap, proj) if dc.w_int else None
        if dc.w_kd:
            if kind == "regression":
                diff = s_trace.logits - t_trace.logits.data
                l_kd = (diff * diff).mean()
            else:
                l_kd = kd_response_loss(t_trace.logits, s_trace.logits, dc.temperature,
                                        dc.scale_kd_by_T2)
        else:
            l_kd = None
        loss = total_loss(l_task, l_int, l_kd, dc)
        parts = tuple(0.0 if x is None else x.item() for x in (l_task, l_int, l_kd))
        return loss, parts

    trainlog = _fit(student, proj.params(), ds, run, vocab, step, dev, spec)
    return DistillResult(student, trainlog, lmap, proj)
