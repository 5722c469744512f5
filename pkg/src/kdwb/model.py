"""Post-LN transformer encoder shared by teachers and students."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from .tensor import Tensor, embedding, gelu, layer_norm, matmul, softmax_rows, tanh

MASK_VALUE = -1e9

# RoBERTa-base constants; only used to check parameter counts at full scale.
ROBERTA_VOCAB = 50265
ROBERTA_POSITIONS = 514


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    hidden_dim: int
    ffn_dim: int | None = None
    vocab_size: int = ROBERTA_VOCAB
    max_positions: int = ROBERTA_POSITIONS
    num_outputs: int = 2
    task_kind: str = "classification"
    dropout: float = 0.0
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden_dim)
        for name in ("num_layers", "num_heads", "hidden_dim", "ffn_dim",
                     "vocab_size", "max_positions", "num_outputs"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive int, got {value!r}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if self.task_kind not in ("classification", "regression"):
            raise ConfigError(f"unknown task_kind {self.task_kind!r}")
        if self.task_kind == "regression" and self.num_outputs != 1:
            raise ConfigError("regression models have exactly one output")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)

    def derive(self, **changes) -> ModelConfig:
        """Copy with some knobs changed; ffn_dim follows hidden_dim unless given."""
        if "hidden_dim" in changes and "ffn_dim" not in changes:
            changes["ffn_dim"] = 4 * changes["hidden_dim"]
        return replace(self, **changes)


# Named student geometries, as changes applied to a 12L/12AH/768D teacher.
STUDENT_VARIANTS: dict[str, dict] = {
    "9L": {"num_layers": 9},
    "6L": {"num_layers": 6},
    "3L": {"num_layers": 3},
    "8AH": {"num_heads": 8},
    "4AH": {"num_heads": 4},
    "516D": {"hidden_dim": 516},
    "384D": {"hidden_dim": 384},
    "6L_384D": {"num_layers": 6, "hidden_dim": 384},
}


def student_grid(teacher: ModelConfig) -> dict[str, ModelConfig]:
    """The named student variants scaled to ``teacher``.

    Depths and head counts keep their ratio to 12; widths keep their ratio to
    768, rounded to a multiple of the head count. A 12L/12AH/768D teacher
    yields the geometries of the variant table exactly.
    """
    L, H, D = teacher.num_layers, teacher.num_heads, teacher.hidden_dim
    out = {}
    for name, knobs in STUDENT_VARIANTS.items():
        changes = {}
        if "num_layers" in knobs:
            changes["num_layers"] = max(1, round(L * knobs["num_layers"] / 12))
        if "num_heads" in knobs:
            heads = max(1, round(H * knobs["num_heads"] / 12))
            while D % heads:
                heads -= 1
            changes["num_heads"] = heads
        if "hidden_dim" in knobs:
            changes["hidden_dim"] = max(H, round(D * knobs["hidden_dim"] / 768 / H) * H)
        out[name] = teacher.derive(**changes)
    return out


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape manifest implied by ``config``."""
    D, F = config.hidden_dim, config.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.token": (config.vocab_size, D),
        "embeddings.position": (config.max_positions, D),
        "embeddings.norm.gain": (D,),
        "embeddings.norm.bias": (D,),
    }
    for i in range(config.num_layers):
        p = f"blocks.{i}."
        for proj in ("query", "key", "value", "output"):
            shapes[p + f"attn.{proj}.weight"] = (D, D)
            # A key bias only adds q.b to every score of a query, which softmax
            # cancels, so it would be a parameter with identically zero gradient.
            if proj != "key":
                shapes[p + f"attn.{proj}.bias"] = (D,)
        shapes[p + "attn_norm.gain"] = (D,)
        shapes[p + "attn_norm.bias"] = (D,)
        shapes[p + "ffn.in.weight"] = (D, F)
        shapes[p + "ffn.in.bias"] = (F,)
        shapes[p + "ffn.out.weight"] = (F, D)
        shapes[p + "ffn.out.bias"] = (D,)
        shapes[p + "ffn_norm.gain"] = (D,)
        shapes[p + "ffn_norm.bias"] = (D,)
    shapes["pooler.weight"] = (D, D)
    shapes["pooler.bias"] = (D,)
    shapes["head.weight"] = (D, config.num_outputs)
    shapes["head.bias"] = (config.num_outputs,)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Closed-form scalar parameter count."""
    D, F, V, P, C = (config.hidden_dim, config.ffn_dim, config.vocab_size,
                     config.max_positions, config.num_outputs)
    embeddings = (V + P) * D + 2 * D
    block = 4 * D * D + 3 * D + (D * F + F) + (F * D + D) + 4 * D
    return embeddings + config.num_layers * block + (D * D + D) + (D * C + C)


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def requires_grad_(self, flag: bool) -> Model:
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def build_model(config: ModelConfig, seed: int, init_std: float = 0.02) -> Model:
    """Seeded init: truncated normal (+-2 std) weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = _truncated_normal(rng, shape, init_std)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return Model(config, params)


@dataclass
class TokenBatch:
    ids: np.ndarray                       # (batch, seq) int
    mask: np.ndarray                      # (batch, seq) 1 = real token
    labels: np.ndarray | None = None
    example_ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.ids.shape[0]


@dataclass
class ForwardTrace:
    logits: Tensor
    block_outputs: list[Tensor]
    pooled: Tensor
    mask: np.ndarray | None = None


def _linear(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return matmul(x, params[prefix + ".weight"]) + params[prefix + ".bias"]


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


def attention_bias(mask: np.ndarray) -> np.ndarray:
    """Additive (batch, 1, 1, seq) bias that removes padded keys."""
    return np.where(np.asarray(mask)[:, None, None, :] > 0, 0.0, MASK_VALUE)


def encoder_block(model: Model, i: int, h: Tensor, bias: np.ndarray,
                  rng: np.random.Generator | None = None) -> Tensor:
    cfg, P = model.config, model.params
    p = f"blocks.{i}."
    B, S, D = h.shape
    H, dh = cfg.num_heads, cfg.head_dim

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, S, H, dh).transpose(0, 2, 1, 3)

    q = heads(_linear(h, P, p + "attn.query"))
    k = heads(matmul(h, P[p + "attn.key.weight"]))
    v = heads(_linear(h, P, p + "attn.value"))
    scores = matmul(q, k.transpose()) * (1.0 / math.sqrt(dh)) + bias
    attn = _dropout(softmax_rows(scores), cfg.dropout, rng)
    ctx = matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, S, D)
    a = _dropout(_linear(ctx, P, p + "attn.output"), cfg.dropout, rng)
    h = layer_norm(h + a, P[p + "attn_norm.gain"], P[p + "attn_norm.bias"], cfg.layer_norm_eps)
    f = _linear(gelu(_linear(h, P, p + "ffn.in")), P, p + "ffn.out")
    f = _dropout(f, cfg.dropout, rng)
    return layer_norm(h + f, P[p + "ffn_norm.gain"], P[p + "ffn_norm.bias"], cfg.layer_norm_eps)


def embed(model: Model, ids: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
    cfg, P = model.config, model.params
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError("token ids must be a (batch, seq) array")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    S = ids.shape[1]
    if S > cfg.max_positions:
        raise ValueError(f"sequence length {S} exceeds max_positions {cfg.max_positions}")
    tok = embedding(P["embeddings.token"], ids)
    pos = P["embeddings.position"][0:S]
    h = layer_norm(tok + pos, P["embeddings.norm.gain"], P["embeddings.norm.bias"],
                   cfg.layer_norm_eps)
    return _dropout(h, cfg.dropout, rng)


def run_head(model: Model, h: Tensor) -> tuple[Tensor, Tensor]:
    pooled = tanh(_linear(h[:, 0, :], model.params, "pooler"))
    return _linear(pooled, model.params, "head"), pooled


def forward(model: Model, batch: TokenBatch | np.ndarray, mask: np.ndarray | None = None,
            rng: np.random.Generator | None = None) -> ForwardTrace:
    """Full encoder pass. ``rng`` enables dropout (training only)."""
    if isinstance(batch, TokenBatch):
        ids, mask = batch.ids, batch.mask
    else:
        ids = np.asarray(batch)
    if mask is None:
        mask = np.ones(ids.shape, dtype=np.int8)
    h = embed(model, ids, rng)
    bias = attention_bias(mask)
    outputs = []
    for i in range(model.config.num_layers):
        h = encoder_block(model, i, h, bias, rng)
        outputs.append(h)
    logits, pooled = run_head(model, h)
    return ForwardTrace(logits, outputs, pooled, np.asarray(mask))


def copy_model(model: Model) -> Model:
    params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
              for k, v in model.params.items()}
    return Model(model.config, params)


def init_from_teacher(student: Model, teacher: Model, pairs) -> list[str]:
    """Copy teacher weights into ``student`` wherever shapes permit.

    Embeddings, pooler and head are copied by name; block ``s`` receives
    teacher block ``t`` for every 1-indexed ``(s, t)`` in ``pairs``.
    Returns the student parameter names that were overwritten.
    """
    copied = []

    def take(dst: str, src: str):
        a, b = student.params.get(dst), teacher.params.get(src)
        if a is not None and b is not None and a.shape == b.shape:
            a.data = b.data.copy()
            copied.append(dst)

    for name in student.params:
        if not name.startswith("blocks."):
            take(name, name)
    for s, t in pairs:
        sp, tp = f"blocks.{s - 1}.", f"blocks.{t - 1}."
        for name in list(student.params):
            if name.startswith(sp):
                take(name, tp + name[len(sp):])
    return copied
