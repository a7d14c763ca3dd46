import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avatarforge import neural as nn
from avatarforge.autodiff import CheckpointError, ShapeError, Tensor, load_weights, save_weights


def softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def store64():
    return nn.ParamStore(np.float64)


def test_positional_encoding_layout():
    p = np.array([[0.25, 0.5, -1.0]])
    pe = nn.positional_encoding(p, 2)
    assert pe.shape == (1, 3 + 12)
    assert np.array_equal(pe[0, :3], p[0])
    # first sine block is sin(pi p), the second sin(2 pi p)
    assert np.allclose(pe[0, 3:6], np.sin(np.pi * p[0]))
    assert np.allclose(pe[0, 6:9], np.sin(2 * np.pi * p[0]))
    assert np.allclose(pe[0, 9:12], np.cos(np.pi * p[0]))
    with pytest.raises(ValueError):
        nn.positional_encoding(np.array([[np.nan, 0, 0]]), 2)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 4), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
def test_cross_attention_matches_numpy(heads, n_q, n_k, seed):
    rng = np.random.default_rng(seed)
    dim = 4 * heads
    s = store64()
    nn.init_cross_attention(s, "a", dim, heads, rng)
    q = rng.normal(size=(n_q, dim))
    c = rng.normal(size=(n_k, dim))
    out, weights = nn.cross_attention_layer(Tensor(q), Tensor(c), s, "a", heads, return_weights=True)
    P = {k: v.data for k, v in s.items()}
    Q, K, V = q @ P["a.q_proj"], c @ P["a.k_proj"], c @ P["a.v_proj"]
    d = dim // heads
    heads_out = []
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        A = softmax(Q[:, sl] @ K[:, sl].T / np.sqrt(d))
        assert np.allclose(weights[h].data, A)
        heads_out.append(A @ V[:, sl])
    x = q + np.concatenate(heads_out, axis=1) @ P["a.o_proj"]
    ff = np.maximum(x @ P["a.ff.0.weight"] + P["a.ff.0.bias"], 0) @ P["a.ff.1.weight"] + P["a.ff.1.bias"]
    assert np.allclose(out.data, x + ff)


def test_cross_attention_shape_checks():
    s = store64()
    with pytest.raises(ShapeError):
        nn.init_cross_attention(s, "a", 6, 4, np.random.default_rng(0))
    nn.init_cross_attention(s, "b", 8, 2, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        nn.cross_attention_layer(Tensor(np.zeros((2, 8))), Tensor(np.zeros((3, 4))), s, "b", 2)


def test_vec_gru_matches_equations():
    rng = np.random.default_rng(1)
    s = store64()
    nn.init_vec_gru(s, "g", 3, 5, rng)
    x, h = rng.normal(size=(4, 3)), rng.normal(size=(4, 5))
    P = {k: v.data for k, v in s.items()}
    xh = np.c_[x, h]
    z = sigmoid(xh @ P["g.z.weight"] + P["g.z.bias"])
    r = sigmoid(xh @ P["g.r.weight"] + P["g.r.bias"])
    cand = np.tanh(np.c_[x, r * h] @ P["g.h.weight"] + P["g.h.bias"])
    ref = (1 - z) * h + z * cand
    assert np.allclose(nn.vec_gru_cell(Tensor(x), Tensor(h), s, "g").data, ref)
    # the update gate starts mostly closed
    assert np.all(P["g.z.bias"] == nn.GRU_GATE_BIAS)


def test_closed_update_gate_keeps_state():
    rng = np.random.default_rng(2)
    s = store64()
    nn.init_conv_gru(s, "g", 2, 3, rng)
    s["g.z.weight"].data[:] = 0
    s["g.z.bias"].data[:] = -1e3
    h = rng.normal(size=(5, 5, 3))
    out = nn.conv_gru_cell(Tensor(rng.normal(size=(5, 5, 2))), Tensor(h), s, "g")
    assert np.array_equal(out.data, h)
    with pytest.raises(ShapeError):
        nn.conv_gru_cell(Tensor(np.zeros((4, 4, 2))), Tensor(h), s, "g")


def test_patch_encoder_constant_image_gives_identical_tokens():
    s = store64()
    nn.init_patch_encoder(s, "e", 4, 8, np.random.default_rng(3))
    tok = nn.patch_encoder(np.full((16, 16, 3), 0.3), s, "e", 4)
    assert tok.shape == (16, 8)
    assert np.allclose(tok.data, tok.data[0])
    with pytest.raises(ShapeError):
        nn.patch_encoder(np.zeros((10, 16, 3)), s, "e", 4)


def test_patch_order_is_row_major():
    s = store64()
    nn.init_patch_encoder(s, "e", 4, 8, np.random.default_rng(4))
    img = np.zeros((8, 24, 3))   # a 2 x 6 patch grid
    base = nn.patch_encoder(img, s, "e", 4).data
    img[0:4, 20:24] = 1.0   # patch (row 0, col 5)
    moved = nn.patch_encoder(img, s, "e", 4).data
    changed = np.flatnonzero(np.abs(moved - base).max(axis=1) > 0)
    # two 3x3 convs reach two grid cells: columns 3..5 of both rows
    assert changed.tolist() == [3, 4, 5, 9, 10, 11]


@pytest.mark.parametrize("factor", [2, 4])
def test_upsample_matches_opencv(factor):
    x = np.random.default_rng(5).random((5, 7, 3)).astype(np.float64)
    got = nn.upsample(Tensor(x), factor).data
    ref = cv2.resize(x, (7 * factor, 5 * factor), interpolation=cv2.INTER_LINEAR)
    assert np.allclose(got, ref, atol=1e-5)


def test_tex_decoder_shapes_and_stage_count():
    rng = np.random.default_rng(6)
    s = store64()
    nn.init_tex_decoder(s, "d", 8, (6, 4), 5, rng)
    tex, feats = nn.tex_decoder(Tensor(rng.normal(size=(4, 4, 8))), s, "d", 2)
    assert tex.shape == (16, 16, 3) and feats.shape == (16, 16, 5)
    assert tex.data.min() > 0 and tex.data.max() < 1
    with pytest.raises(ShapeError):
        nn.tex_decoder(Tensor(np.zeros((4, 4, 8))), s, "d", 3)
    assert nn.decoder_stages(16, 128) == 3
    with pytest.raises(ShapeError):
        nn.decoder_stages(16, 96)


def test_param_store_and_checkpoint_roundtrip(tmp_path):
    s = nn.ParamStore()
    nn.init_mlp(s, "m", [3, 4, 2], np.random.default_rng(7))
    with pytest.raises(KeyError):
        s.add("m.0.weight", np.zeros((3, 4)))
    save_weights(s.state_dict(), tmp_path / "w.bin")
    back = load_weights(tmp_path / "w.bin")
    assert list(back) == s.names()
    t = nn.ParamStore()
    nn.init_mlp(t, "m", [3, 4, 2], np.random.default_rng(99))
    t.load_state_dict(back)
    for k in s.names():
        assert np.array_equal(t[k].data, s[k].data)
    with pytest.raises(KeyError):
        t.load_state_dict({"m.0.weight": back["m.0.weight"]})
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + (tmp_path / "w.bin").read_bytes()[4:])
    with pytest.raises(CheckpointError):
        load_weights(tmp_path / "bad.bin")
