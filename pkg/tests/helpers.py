"""Shared builders for the test-suite (gradient cases, toy models, toy data)."""

from __future__ import annotations

import numpy as np

from kdwb import tensor as T
from kdwb.distill import (DistillConfig, ProjectionSet, feature_loss, kd_response_loss,
                          resolve_layer_map, task_loss, total_loss)
from kdwb.model import ModelConfig, TokenBatch, build_model, forward
from kdwb.tensor import Tensor, no_grad


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # Project onto random weights so no gradient is identically zero by symmetry.
    return (out * w).sum()


def primitive_cases(rng: np.random.Generator):
    """(name, f, x) triples: f maps a Tensor shaped like x to a scalar.

    Inputs are drawn from [-2, 2]; ``log`` gets a shifted positive input.
    """
    x = rng.uniform(-2, 2, (3, 4))
    other = rng.uniform(-2, 2, (3, 4))
    w34 = rng.uniform(-1, 1, (3, 4))
    m45 = rng.uniform(-2, 2, (4, 5))
    w35 = rng.uniform(-1, 1, (3, 5))
    bias = rng.uniform(-2, 2, (4,))
    gain = rng.uniform(0.5, 2, (4,))
    ids = rng.integers(0, 3, (2, 5))
    w2x5x4 = rng.uniform(-1, 1, (2, 5, 4))
    x3 = rng.uniform(-2, 2, (2, 3, 4))
    b3 = rng.uniform(-2, 2, (2, 4, 3))
    w233 = rng.uniform(-1, 1, (2, 3, 3))
    c = Tensor(other)
    return [
        ("add", lambda t: _weighted(t + c, w34), x),
        ("add_bias", lambda t: _weighted(Tensor(other) + t[0], w34), x),
        ("sub", lambda t: _weighted(c - t, w34), x),
        ("neg", lambda t: _weighted(-t, w34), x),
        ("mul", lambda t: _weighted(t * c, w34), x),
        ("square", lambda t: _weighted(t * t, w34), x),
        ("div", lambda t: _weighted(t / (other * other + 1.0), w34), x),
        ("exp", lambda t: _weighted(t.exp(), w34), x),
        ("log", lambda t: _weighted(t.log(), w34), np.abs(x) + 0.5),
        ("tanh", lambda t: _weighted(T.tanh(t), w34), x),
        ("gelu", lambda t: _weighted(T.gelu(t), w34), x),
        ("sum_axis", lambda t: (t.sum(axis=0) * w34[0]).sum(), x),
        ("mean", lambda t: (t.mean(axis=1, keepdims=True) * w34[:, :1]).sum(), x),
        ("reshape", lambda t: _weighted(t.reshape(4, 3), w34.reshape(4, 3)), x),
        ("transpose", lambda t: _weighted(t.transpose(), w34.T), x),
        ("getitem", lambda t: _weighted(t[1:, ::2], w34[1:, ::2]), x),
        ("embedding", lambda t: _weighted(T.embedding(t, ids), w2x5x4), x),
        ("matmul_left", lambda t: _weighted(t @ Tensor(m45), w35), x),
        ("matmul_right", lambda t: _weighted(Tensor(x) @ t, w35), m45),
        ("matmul_batched", lambda t: _weighted(t @ Tensor(b3), w233), x3),
        ("softmax_rows", lambda t: _weighted(T.softmax_rows(t), w34), x),
        ("log_softmax_rows", lambda t: _weighted(T.log_softmax_rows(t), w34), x),
        ("layer_norm_x", lambda t: _weighted(T.layer_norm(t, Tensor(gain), Tensor(bias)), w34), x),
        ("layer_norm_gain", lambda t: _weighted(T.layer_norm(Tensor(x), t, Tensor(bias)), w34), gain),
        ("layer_norm_bias", lambda t: _weighted(T.layer_norm(Tensor(x), Tensor(gain), t), w34), bias),
    ]


class CompositeCase:
    """A 2-layer student distilled from a 3-layer, wider teacher on one toy batch.

    ``loss_for(name)`` returns f(p) = total loss with student parameter
    ``name`` replaced by ``p``; projection weights are addressed as ``proj.S``.
    """

    def __init__(self, seed: int, vocab: int = 20, seq: int = 6, batch: int = 3):
        rng = np.random.default_rng(seed)
        tcfg = ModelConfig(3, 2, 12, vocab_size=vocab, max_positions=16, num_outputs=3)
        scfg = ModelConfig(2, 2, 8, vocab_size=vocab, max_positions=16, num_outputs=3)
        # Larger init than the default so activations and gradients are far from zero.
        self.teacher = build_model(tcfg, seed + 1, init_std=0.3)
        self.student = build_model(scfg, seed + 2, init_std=0.3)
        ids = rng.integers(4, vocab, (batch, seq))
        mask = np.ones((batch, seq), dtype=np.int8)
        mask[1, seq - 2:] = 0
        ids[1, seq - 2:] = 0
        self.batch = TokenBatch(ids, mask, rng.integers(0, 3, batch), [])
        self.layer_map = resolve_layer_map("auto", 2, 3)
        self.proj = ProjectionSet(self.layer_map, 8, 12, seed=seed, init_std=0.3)
        self.cfg = DistillConfig()
        with no_grad():
            self.t_trace = forward(self.teacher, self.batch)

    def params(self) -> dict[str, Tensor]:
        return {**self.student.params, **self.proj.params()}

    def loss(self) -> Tensor:
        s = forward(self.student, self.batch)
        return total_loss(task_loss(s.logits, self.batch.labels, "classification"),
                          feature_loss(self.t_trace, s, self.layer_map, self.proj),
                          kd_response_loss(self.t_trace.logits, s.logits, self.cfg.temperature),
                          self.cfg)

    def loss_for(self, name: str):
        if name.startswith("proj."):
            store, key = self.proj.weights, int(name.split(".")[1])
        else:
            store, key = self.student.params, name

        def f(p: Tensor) -> Tensor:
            old = store[key]
            store[key] = p
            try:
                return self.loss()
            finally:
                store[key] = old
        return f


def tiny_config(**kw) -> ModelConfig:
    base = dict(num_layers=2, num_heads=2, hidden_dim=8, vocab_size=30, max_positions=16,
                num_outputs=2)
    base.update(kw)
    return ModelConfig(**base)


# PASS/FAIL lines from the acceptance tests, echoed in the terminal summary.
ACCEPTANCE: list[str] = []
