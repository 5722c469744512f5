import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import tiny_config
from kdwb.checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from kdwb.model import (ConfigError, ModelConfig, TokenBatch, build_model, copy_model, forward,
                        init_from_teacher, param_count, param_shapes, student_grid)

# Sizes listed for the 12-layer teacher and its named students, in millions.
LISTED_MILLIONS = {"baseline": 124, "9L": 103, "6L": 82, "3L": 61, "8AH": 124, "4AH": 124,
                   "516D": 65, "384D": 41, "6L_384D": 30}
TEACHER = ModelConfig(12, 12, 768)


def full_grid():
    return {"baseline": TEACHER, **student_grid(TEACHER)}


# ---------------------------------------------------------------------------
# config and parameter counts
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("geom", [(12, 12, 768), (12, 12, 516)])
def test_listed_geometries_accepted(geom):
    cfg = ModelConfig(*geom)
    assert cfg.ffn_dim == 4 * cfg.hidden_dim


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        ModelConfig(2, 3, 8)


@pytest.mark.parametrize("kw", [dict(num_layers=0), dict(task_kind="ranking"),
                                dict(task_kind="regression", num_outputs=2), dict(dropout=1.0)])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        tiny_config(**kw)


def test_student_grid_geometries():
    grid = student_grid(TEACHER)
    got = {k: (c.num_layers, c.num_heads, c.hidden_dim) for k, c in grid.items()}
    assert got == {"9L": (9, 12, 768), "6L": (6, 12, 768), "3L": (3, 12, 768),
                   "8AH": (12, 8, 768), "4AH": (12, 4, 768), "516D": (12, 12, 516),
                   "384D": (12, 12, 384), "6L_384D": (6, 12, 384)}


@pytest.mark.parametrize("name", list(LISTED_MILLIONS))
def test_param_count_within_two_percent(name):
    count = param_count(full_grid()[name])
    assert abs(count / 1e6 - LISTED_MILLIONS[name]) <= 0.02 * LISTED_MILLIONS[name]


def test_head_count_does_not_change_param_count():
    assert param_count(ModelConfig(12, 12, 768)) == param_count(ModelConfig(12, 8, 768)) \
        == param_count(ModelConfig(12, 4, 768))


@pytest.mark.parametrize("name", list(LISTED_MILLIONS))
def test_param_count_matches_manifest(name):
    cfg = full_grid()[name]
    assert param_count(cfg) == sum(math.prod(s) for s in param_shapes(cfg).values())


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.sampled_from([1, 2, 4]), st.sampled_from([4, 8, 12]),
       st.integers(5, 40), st.integers(1, 3))
def test_param_count_matches_built_model(L, H, D, V, C):
    if D % H:
        return
    cfg = ModelConfig(L, H, D, vocab_size=V, max_positions=9, num_outputs=C)
    assert build_model(cfg, 0).num_parameters() == param_count(cfg)


def test_param_names_follow_config():
    a, b = build_model(tiny_config(), 0), build_model(tiny_config(), 5)
    assert list(a.params) == list(b.params) == list(param_shapes(tiny_config()))


# ---------------------------------------------------------------------------
# init and forward
# ---------------------------------------------------------------------------

def test_build_is_deterministic():
    a, b = build_model(tiny_config(), 11), build_model(tiny_config(), 11)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)
    c = build_model(tiny_config(), 12)
    assert not np.array_equal(a.params["head.weight"].data, c.params["head.weight"].data)


def test_init_statistics():
    m = build_model(ModelConfig(1, 2, 64, vocab_size=500, max_positions=8), 0)
    w = m.params["embeddings.token"].data
    assert abs(w).max() <= 0.04 + 1e-12
    assert w.std() == pytest.approx(0.02 * 0.88, rel=0.05)  # truncation at 2 sigma shrinks std
    assert np.all(m.params["blocks.0.attn.query.bias"].data == 0)
    assert np.all(m.params["blocks.0.ffn_norm.gain"].data == 1)


def test_trace_shapes():
    cfg = tiny_config(num_layers=3, num_outputs=3)
    ids = np.random.default_rng(0).integers(0, 30, (4, 7))
    tr = forward(build_model(cfg, 0), ids)
    assert tr.logits.shape == (4, 3)
    assert len(tr.block_outputs) == 3
    assert all(h.shape == (4, 7, 8) for h in tr.block_outputs)
    assert tr.pooled.shape == (4, 8)


def test_identical_rows_give_identical_logits():
    m = build_model(tiny_config(), 1, init_std=0.3)
    ids = np.tile(np.array([[2, 5, 9, 3, 7]]), (4, 1))
    logits = forward(m, ids).logits.data
    assert np.all(logits == logits[0])


def test_forward_is_bitwise_deterministic():
    m = build_model(tiny_config(), 1, init_std=0.3)
    ids = np.random.default_rng(2).integers(0, 30, (3, 6))
    assert np.array_equal(forward(m, ids).logits.data, forward(m, ids).logits.data)


def test_padding_does_not_change_logits():
    m = build_model(tiny_config(), 4, init_std=0.3)
    ids = np.array([[2, 8, 9, 3, 11]])
    short = forward(m, ids, np.ones((1, 5))).logits.data
    padded_ids = np.concatenate([ids, np.array([[0, 17, 4]])], axis=1)
    mask = np.array([[1, 1, 1, 1, 1, 0, 0, 0]])
    padded = forward(m, padded_ids, mask).logits.data
    np.testing.assert_allclose(padded, short, rtol=0, atol=1e-12)


@pytest.mark.parametrize("bad", [np.array([[0, 30]]), np.array([[-1, 2]])])
def test_out_of_range_token_rejected(bad):
    with pytest.raises(ValueError):
        forward(build_model(tiny_config(), 0), bad)


def test_too_long_sequence_rejected():
    with pytest.raises(ValueError):
        forward(build_model(tiny_config(), 0), np.zeros((1, 17), dtype=int))


def _oracle_forward(params: dict, cfg: ModelConfig, ids: list[int]) -> np.ndarray:
    """Independent loop-level reimplementation for one unpadded sequence."""
    P = {k: v.data for k, v in params.items()}
    eps, H, dh = cfg.layer_norm_eps, cfg.num_heads, cfg.head_dim

    def ln(v, g, b):
        mu = sum(v) / len(v)
        var = sum((a - mu) ** 2 for a in v) / len(v)
        return [g[i] * (v[i] - mu) / math.sqrt(var + eps) + b[i] for i in range(len(v))]

    def lin(v, w, b):
        return [sum(v[i] * w[i][j] for i in range(len(v))) + b[j] for j in range(len(b))]

    gelu = lambda a: a * 0.5 * (1.0 + math.erf(a / math.sqrt(2.0)))
    hs = [ln([P["embeddings.token"][t][d] + P["embeddings.position"][p][d] for d in range(cfg.hidden_dim)],
             P["embeddings.norm.gain"], P["embeddings.norm.bias"]) for p, t in enumerate(ids)]
    for i in range(cfg.num_layers):
        pre = f"blocks.{i}."
        q = [lin(h, P[pre + "attn.query.weight"], P[pre + "attn.query.bias"]) for h in hs]
        k = [lin(h, P[pre + "attn.key.weight"], [0.0] * cfg.hidden_dim) for h in hs]
        v = [lin(h, P[pre + "attn.value.weight"], P[pre + "attn.value.bias"]) for h in hs]
        ctx = []
        for s in range(len(hs)):
            row = []
            for head in range(H):
                sl = slice(head * dh, (head + 1) * dh)
                scores = [sum(a * b for a, b in zip(q[s][sl], k[u][sl])) / math.sqrt(dh) for u in range(len(hs))]
                m = max(scores)
                w = [math.exp(x - m) for x in scores]
                z = sum(w)
                row += [sum(w[u] / z * v[u][sl][j] for u in range(len(hs))) for j in range(dh)]
            ctx.append(row)
        new = []
        for s, h in enumerate(hs):
            a = lin(ctx[s], P[pre + "attn.output.weight"], P[pre + "attn.output.bias"])
            h1 = ln([h[d] + a[d] for d in range(len(h))], P[pre + "attn_norm.gain"], P[pre + "attn_norm.bias"])
            f = lin([gelu(x) for x in lin(h1, P[pre + "ffn.in.weight"], P[pre + "ffn.in.bias"])],
                    P[pre + "ffn.out.weight"], P[pre + "ffn.out.bias"])
            new.append(ln([h1[d] + f[d] for d in range(len(h1))], P[pre + "ffn_norm.gain"], P[pre + "ffn_norm.bias"]))
        hs = new
    pooled = [math.tanh(x) for x in lin(hs[0], P["pooler.weight"], P["pooler.bias"])]
    return np.array(lin(pooled, P["head.weight"], P["head.bias"]))


@pytest.mark.parametrize("ids", [[7], [2, 9, 3, 14]])
def test_forward_matches_straight_line_oracle(ids):
    cfg = tiny_config(num_outputs=3)
    m = build_model(cfg, 9, init_std=0.3)
    # Nonzero biases and gains so every term of the arithmetic is exercised.
    rng = np.random.default_rng(1)
    for name, p in m.params.items():
        if name.endswith((".bias", ".gain")):
            p.data = p.data + rng.normal(0, 0.2, p.shape)
    got = forward(m, np.array([ids])).logits.data[0]
    np.testing.assert_allclose(got, _oracle_forward(m.params, cfg, ids), rtol=1e-10, atol=1e-12)


def test_dropout_only_with_rng():
    cfg = tiny_config(dropout=0.5)
    m = build_model(cfg, 0, init_std=0.3)
    ids = np.array([[2, 5, 6, 3]])
    base = forward(m, ids).logits.data
    assert np.array_equal(base, forward(m, ids).logits.data)
    noisy = forward(m, ids, rng=np.random.default_rng(0)).logits.data
    assert not np.allclose(base, noisy)


def test_copy_model_is_independent():
    m = build_model(tiny_config(), 0)
    c = copy_model(m)
    c.params["head.bias"].data += 1.0
    assert np.all(m.params["head.bias"].data == 0)


def test_init_from_teacher_copies_mapped_blocks():
    teacher = build_model(tiny_config(num_layers=4), 1)
    student = build_model(tiny_config(num_layers=2), 2)
    copied = init_from_teacher(student, teacher, [(1, 1), (2, 4)])
    assert "blocks.1.ffn.in.weight" in copied
    assert np.array_equal(student.params["blocks.1.ffn.in.weight"].data,
                          teacher.params["blocks.3.ffn.in.weight"].data)
    assert np.array_equal(student.params["embeddings.token"].data, teacher.params["embeddings.token"].data)


def test_init_from_teacher_skips_shape_mismatch():
    teacher = build_model(tiny_config(hidden_dim=12), 1)
    student = build_model(tiny_config(), 2)
    # Only the width-independent head bias fits.
    assert init_from_teacher(student, teacher, [(1, 1), (2, 2)]) == ["head.bias"]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = build_model(tiny_config(num_outputs=3), 3, init_std=0.3)
    path = save_checkpoint(m, tmp_path / "m.kdwb")
    back = load_checkpoint(path)
    assert back.config == m.config
    ids = np.random.default_rng(0).integers(0, 30, (4, 6))
    a, b = forward(m, ids).logits.data, forward(back, ids).logits.data
    assert np.all(np.abs(a - b) <= 1e-5 * np.abs(a) + 1e-7)


def test_checkpoint_bytes_are_deterministic(tmp_path):
    m = build_model(tiny_config(), 3)
    save_checkpoint(m, tmp_path / "a.kdwb")
    save_checkpoint(build_model(tiny_config(), 3), tmp_path / "b.kdwb")
    assert (tmp_path / "a.kdwb").read_bytes() == (tmp_path / "b.kdwb").read_bytes()


def test_checkpoint_layout(tmp_path):
    m = build_model(tiny_config(num_layers=3), 0)
    raw = save_checkpoint(m, tmp_path / "m.kdwb").read_bytes()
    magic, version, hlen = struct.unpack_from("<4sII", raw)
    assert (magic, version) == (b"KDWB", 1)
    header = json.loads(raw[12:12 + hlen])
    assert [n for n, _ in header["manifest"]] == list(m.params)
    assert len(raw) == 12 + hlen + 4 * param_count(m.config)


def test_header_count_matches_recomputed_count(tmp_path):
    m = build_model(tiny_config(num_layers=3), 0)
    path = save_checkpoint(m, tmp_path / "m.kdwb")
    loaded = load_checkpoint(path)
    assert param_count(loaded.config) == read_header(path)["param_count"] == loaded.num_parameters()


def _corrupt(tmp_path, mutate):
    path = save_checkpoint(build_model(tiny_config(), 0), tmp_path / "m.kdwb")
    path.write_bytes(mutate(bytearray(path.read_bytes())))
    return path


def _edit_header(raw: bytearray, edit) -> bytearray:
    hlen = struct.unpack_from("<I", raw, 8)[0]
    header = json.loads(raw[12:12 + hlen])
    edit(header)
    new = json.dumps(header).encode()
    return bytearray(raw[:8] + struct.pack("<I", len(new)) + new + raw[12 + hlen:])


@pytest.mark.parametrize("mutate, message", [
    (lambda r: b"XXXX" + r[4:], "magic"),
    (lambda r: r[:4] + struct.pack("<I", 2) + r[8:], "version"),
    (lambda r: r[:-4], "data bytes"),
    (lambda r: r[:20], "truncated"),
    (lambda r: r[:6], "truncated"),
    (lambda r: _edit_header(r, lambda h: h["manifest"].pop()), "names"),
    (lambda r: _edit_header(r, lambda h: h["config"].update(num_layers=3)), "names"),
    (lambda r: _edit_header(r, lambda h: h.update(param_count=1)), "count"),
    (lambda r: _edit_header(r, lambda h: h["manifest"][0].__setitem__(1, [31, 8])), "shape"),
])
def test_corrupt_checkpoints_rejected(tmp_path, mutate, message):
    with pytest.raises(CheckpointError, match=message):
        load_checkpoint(_corrupt(tmp_path, mutate))
