"""Distillation losses and layer mappings.

The student is trained on a weighted sum of three terms: the hard task loss
against gold labels, a feature loss between mapped block outputs, and a
response loss between temperature-softened output distributions. Teacher
quantities always enter as constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ConfigError, ForwardTrace, ModelConfig
from .tensor import Tensor, ShapeError, log_softmax_rows, matmul, softmax_rows

LAYER_MAP_PRESETS = ("paper-3L", "paper-6L", "paper-9L", "identity", "uniform", "auto")

# 1-indexed (student block, teacher block) pairs for a 12-block teacher.
_PRESET_MAPS = {
    "paper-3L": (3, 12, ((1, 1), (2, 5), (3, 12))),
    "paper-6L": (6, 12, ((1, 1), (2, 5), (3, 7), (4, 9), (5, 11), (6, 12))),
    "paper-9L": (9, 12, ((1, 1), (2, 2), (3, 4), (4, 6), (5, 8), (6, 9), (7, 10), (8, 11), (9, 12))),
}


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 2.0
    w_hard: float = 0.33
    w_int: float = 0.33
    w_kd: float = 0.33
    scale_kd_by_T2: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        weights = (self.w_hard, self.w_int, self.w_kd)
        if any(w < 0 for w in weights):
            raise ConfigError("loss weights must be nonnegative")
        if not any(w > 0 for w in weights):
            raise ConfigError("at least one loss weight must be positive")

    def to_dict(self) -> dict:
        return {"temperature": self.temperature, "w_hard": self.w_hard, "w_int": self.w_int,
                "w_kd": self.w_kd, "scale_kd_by_T2": self.scale_kd_by_T2}


@dataclass(frozen=True)
class LayerMap:
    pairs: tuple[tuple[int, int], ...]

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def validate(self, student_layers: int, teacher_layers: int) -> LayerMap:
        check_layer_map(self.pairs, student_layers, teacher_layers)
        return self


def check_layer_map(pairs, student_layers: int, teacher_layers: int) -> None:
    """Raise ConfigError unless ``pairs`` is anchored and strictly increasing.

    With a single-block student the two anchors coincide; the block is tied
    to the teacher's last block.
    """
    pairs = [tuple(p) for p in pairs]
    if not pairs:
        raise ConfigError("layer map is empty")
    for s, t in pairs:
        if not (1 <= s <= student_layers and 1 <= t <= teacher_layers):
            raise ConfigError(f"pair ({s}, {t}) outside {student_layers}x{teacher_layers} blocks")
    for (s0, t0), (s1, t1) in zip(pairs, pairs[1:]):
        if not (s1 > s0 and t1 > t0):
            raise ConfigError(f"layer map not strictly increasing at ({s0},{t0}) -> ({s1},{t1})")
    if pairs[-1] != (student_layers, teacher_layers):
        raise ConfigError("layer map must connect the last student and teacher blocks")
    if student_layers > 1 and pairs[0] != (1, 1):
        raise ConfigError("layer map must connect the first student and teacher blocks")


def uniform_map(student_layers: int, teacher_layers: int) -> LayerMap:
    Ls, Lt = student_layers, teacher_layers
    if Ls == 1:
        return LayerMap(((1, Lt),))
    step = (Lt - 1) / (Ls - 1)
    return LayerMap(tuple((i, int(math.floor(1 + (i - 1) * step + 0.5))) for i in range(1, Ls + 1)))


def resolve_layer_map(spec, student_layers: int, teacher_layers: int) -> LayerMap:
    """Turn a preset name or an explicit pair list into a validated LayerMap.

    ``"auto"`` (or ``None``) picks the matching ``paper-*`` preset for a
    12-block teacher, identity for equal depths, and ``uniform`` otherwise.
    """
    Ls, Lt = student_layers, teacher_layers
    if Ls > Lt:
        raise ConfigError(f"student ({Ls} blocks) is deeper than teacher ({Lt} blocks)")
    if spec is None or spec == "auto":
        spec = next((n for n, (s, t, _) in _PRESET_MAPS.items() if (s, t) == (Ls, Lt)),
                    "identity" if Ls == Lt else "uniform")
    if isinstance(spec, str):
        if spec in _PRESET_MAPS:
            s, t, pairs = _PRESET_MAPS[spec]
            if (s, t) != (Ls, Lt):
                raise ConfigError(f"preset {spec} is defined for {s}->{t} blocks, not {Ls}->{Lt}")
            lm = LayerMap(pairs)
        elif spec == "identity":
            if Ls != Lt:
                raise ConfigError("identity map needs equal depths")
            lm = LayerMap(tuple((i, i) for i in range(1, Ls + 1)))
        elif spec == "uniform":
            lm = uniform_map(Ls, Lt)
        else:
            raise ConfigError(f"unknown layer-map preset {spec!r}; known: {', '.join(LAYER_MAP_PRESETS)}")
    else:
        lm = LayerMap(tuple((int(s), int(t)) for s, t in spec))
    return lm.validate(Ls, Lt)


class ProjectionSet:
    """Learned student->teacher width projections, one per mapped pair when widths differ."""

    def __init__(self, layer_map: LayerMap, student_dim: int, teacher_dim: int, seed: int = 0,
                 init_std: float = 0.02):
        self.student_dim, self.teacher_dim = student_dim, teacher_dim
        self.weights: dict[int, Tensor] = {}
        if student_dim != teacher_dim:
            rng = np.random.default_rng([seed, 7919])
            for s, _ in layer_map:
                self.weights[s] = Tensor(rng.standard_normal((student_dim, teacher_dim)) * init_std,
                                         requires_grad=True, name=f"proj.{s}")

    def params(self) -> dict[str, Tensor]:
        return {f"proj.{s}": w for s, w in self.weights.items()}

    def apply(self, student_block: int, h: Tensor) -> Tensor:
        w = self.weights.get(student_block)
        return h if w is None else matmul(h, w)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def softmax_temp(logits: Tensor, T: float) -> Tensor:
    if not T > 0:
        raise ConfigError("temperature must be > 0")
    return softmax_rows(logits * (1.0 / T))


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def kd_response_loss(z_t, z_s: Tensor, T: float, scale_T2: bool = False) -> Tensor:
    """Batch mean of KL(p_teacher || p_student) at temperature ``T``."""
    if not T > 0:
        raise ConfigError("temperature must be > 0")
    zt = _const(z_t)
    if zt.shape != z_s.shape:
        raise ShapeError(f"teacher logits {zt.shape} vs student logits {z_s.shape}")
    zt = zt / T
    zt = zt - zt.max(axis=-1, keepdims=True)
    log_pt = zt - np.log(np.exp(zt).sum(axis=-1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = log_softmax_rows(z_s * (1.0 / T))
    batch = zt.shape[0]
    const = float((pt * log_pt).sum())
    loss = (log_ps * pt).sum() * (-1.0 / batch) + const / batch
    return loss * (T * T) if scale_T2 else loss


def feature_loss(trace_t: ForwardTrace, trace_s: ForwardTrace, layer_map: LayerMap,
                 proj: ProjectionSet | None = None) -> Tensor:
    """Mean over mapped pairs of the MSE between (projected) student and teacher block outputs.

    When the student trace carries an attention mask, padded positions are
    left out of each MSE.
    """
    Ls, Lt = len(trace_s.block_outputs), len(trace_t.block_outputs)
    for s, t in layer_map:
        if not (1 <= s <= Ls and 1 <= t <= Lt):
            raise IndexError(f"map pair ({s}, {t}) out of range for {Ls}/{Lt} blocks")
    mask = trace_s.mask
    total = None
    for s, t in layer_map:
        hs = trace_s.block_outputs[s - 1]
        if proj is not None:
            hs = proj.apply(s, hs)
        ht = _const(trace_t.block_outputs[t - 1])
        if ht.shape != hs.shape:
            raise ShapeError(f"block outputs differ: student {hs.shape} vs teacher {ht.shape}")
        diff = hs - ht
        if mask is not None and not np.all(mask):
            w = np.broadcast_to(np.asarray(mask, dtype=np.float64)[..., None], diff.shape)
            term = (diff * diff * w).sum() * (1.0 / float(w.sum()))
        else:
            term = (diff * diff).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(layer_map))


def task_loss(outputs: Tensor, labels, kind: str) -> Tensor:
    """Mean cross-entropy (classification) or mean squared error (regression)."""
    labels = np.asarray(labels)
    if kind == "regression":
        pred = outputs.reshape(-1) if outputs.ndim == 2 else outputs
        if pred.shape != (labels.shape[0],) or (outputs.ndim == 2 and outputs.shape[1] != 1):
            raise ShapeError(f"regression output {outputs.shape} vs {labels.shape[0]} labels")
        diff = pred - labels.astype(np.float64)
        return (diff * diff).mean()
    if kind != "classification":
        raise ConfigError(f"unknown task kind {kind!r}")
    if outputs.ndim != 2 or outputs.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {outputs.shape} vs {labels.shape[0]} labels")
    C = outputs.shape[1]
    labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= C:
        raise ShapeError(f"label outside [0, {C})")
    onehot = np.eye(C)[labels]
    return (log_softmax_rows(outputs) * onehot).sum() * (-1.0 / labels.shape[0])


def total_loss(l_task, l_int, l_kd, cfg: DistillConfig):
    """Weighted sum; zero-weight terms are skipped so they may be ``None``."""
    out = None
    for w, term in ((cfg.w_hard, l_task), (cfg.w_int, l_int), (cfg.w_kd, l_kd)):
        if w == 0:
            continue
        if term is None:
            raise ValueError("a loss term with positive weight is missing")
        piece = term * w
        out = piece if out is None else out + piece
    return out if out is not None else 0.0


def student_config(teacher: ModelConfig, **changes) -> ModelConfig:
    """Teacher geometry with one or more knobs changed."""
    return teacher.derive(**changes)
