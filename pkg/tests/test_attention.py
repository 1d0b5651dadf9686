import math

import numpy as np
import pytest

from avclip import numerics as nx
from avclip.attention import (AvBlockParams, BackboneParams, CrossParams, MhaParams, SpatialParams,
                              a2v_attention, audio_patch_saliency, av_block, forward_video, mha,
                              spatial_attention, v2a_attention)
from avclip.model import init_model
from avclip.numerics import Tensor
from avclip.params import LayerNormParams

from conftest import randomize_gates, tiny_config


# ---------------------------------------------------------------- numpy oracles

def naive_mha(q_in, k_in, v_in, p: MhaParams):
    """Head-by-head, row-by-row attention with explicit loops."""
    d = q_in.shape[1]
    h = p.heads
    dh = d // h
    q, k, v = q_in @ p.w_q.data, k_in @ p.w_k.data, v_in @ p.w_v.data
    out = np.zeros((q_in.shape[0], d))
    for head in range(h):
        cols = slice(head * dh, (head + 1) * dh)
        for i in range(q.shape[0]):
            scores = np.array([np.dot(q[i, cols], k[j, cols]) / math.sqrt(dh) for j in range(k.shape[0])])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            out[i, cols] = sum(w[j] * v[j, cols] for j in range(k.shape[0]))
    return out @ p.w_o.data


def np_ln(x, p: LayerNormParams):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * p.gain.data + p.bias.data


def np_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def oracle_forward(v0, a0, params: BackboneParams):
    """Layer-by-layer, frame-by-frame numpy reimplementation returning (f, per-layer states)."""
    v, a = v0.copy(), a0.copy()
    states = []
    for block in params.blocks:
        t_count = v.shape[0]
        s = np.stack([v[t] + naive_mha(*(np_ln(v[t], block.spatial.ln),) * 3, block.spatial.attn)
                      for t in range(t_count)])
        v_mid, a_next = s.copy(), a.copy()
        if block.variant in ("A2V_V2A", "A2V_only"):
            c = block.a2v
            kv = np_ln(a, c.ln_kv)
            for t in range(t_count):
                att = naive_mha(np_ln(s[t], c.ln_q), kv, kv, c.attn)
                v_mid[t] = s[t] + att @ c.gate.w.data + c.gate.b.data
        if block.variant == "A2V_V2A":
            c = block.v2a
            for t in range(t_count):
                kv = np_ln(s[t], c.ln_kv)
                att = naive_mha(np_ln(a[t:t + 1], c.ln_q), kv, kv, c.attn)
                a_next[t] = a[t] + (att @ c.gate.w.data + c.gate.b.data)[0]
        f = block.ffn
        hdn = np_gelu(np_ln(v_mid, f.ln) @ f.fc1.w.data + f.fc1.b.data)
        v = v_mid + hdn @ f.fc2.w.data + f.fc2.b.data
        a = a_next
        states.append((v.copy(), a.copy()))
    pooled = v[:, 0].mean(axis=0)
    return np_ln(pooled, params.ln_final), states


# ---------------------------------------------------------------- mha

def test_single_key_attention_is_value_path(rng):
    p = MhaParams.init(rng, 8, 2)
    q, kv = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    out, w = mha(Tensor(q), Tensor(kv), Tensor(kv), p, return_weights=True)
    assert np.all(w.data == 1.0)
    np.testing.assert_allclose(out.data, kv @ p.w_v.data @ p.w_o.data, atol=1e-14)


def test_duplicated_keys_leave_output_unchanged(rng):
    p = MhaParams.init(rng, 4, 2)
    q, k, v = (rng.normal(size=(2, 4)) for _ in range(3))
    base = mha(Tensor(q), Tensor(k), Tensor(v), p).data
    dup = mha(Tensor(q), Tensor(np.concatenate([k, k])), Tensor(np.concatenate([v, v])), p).data
    np.testing.assert_allclose(dup, base, atol=1e-12)


@pytest.mark.parametrize("m,n,d,h", [(3, 5, 8, 2), (1, 4, 6, 3), (6, 6, 16, 4), (2, 1, 4, 1)])
def test_mha_matches_naive_loops(rng, m, n, d, h):
    p = MhaParams.init(rng, d, h)
    q, k, v = rng.normal(size=(m, d)), rng.normal(size=(n, d)), rng.normal(size=(n, d))
    np.testing.assert_allclose(mha(Tensor(q), Tensor(k), Tensor(v), p).data, naive_mha(q, k, v, p),
                               atol=1e-10, rtol=0)


def test_mha_weights_row_stochastic(rng):
    p = MhaParams.init(rng, 8, 4)
    _, w = mha(Tensor(rng.normal(size=(3, 5, 8)) * 5), Tensor(rng.normal(size=(3, 7, 8))),
               Tensor(rng.normal(size=(3, 7, 8))), p, return_weights=True)
    assert np.abs(w.data.sum(-1) - 1).max() <= 1e-12


def test_mha_shape_errors(rng):
    p = MhaParams.init(rng, 4, 2)
    with pytest.raises(nx.ShapeError):
        mha(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 4))), Tensor(np.ones((2, 4))), p)
    with pytest.raises(ValueError):
        MhaParams.init(rng, 6, 4)


def test_mha_gradcheck(rng):
    p = MhaParams.init(rng, 6, 3)
    q, k = Tensor(rng.normal(size=(2, 3, 6))), Tensor(rng.normal(size=(2, 4, 6)))
    w = Tensor(rng.normal(size=(2, 3, 6)))
    fn = lambda: (mha(q, k, k, p) * w).sum()  # noqa: E731
    assert nx.gradcheck(fn, [q, k, p.w_q, p.w_k, p.w_v, p.w_o]) <= 1e-5


# ---------------------------------------------------------------- spatial / a2v / v2a

def _spatial(rng, d=8, h=2):
    return SpatialParams(LayerNormParams.init(d), MhaParams.init(rng, d, h))


def test_spatial_matches_per_frame_oracle(rng):
    p = _spatial(rng)
    v = rng.normal(size=(3, 4, 8))
    out = spatial_attention(Tensor(v), p).data
    for t in range(3):
        h = np_ln(v[t], p.ln)
        np.testing.assert_allclose(out[t], v[t] + naive_mha(h, h, h, p.attn), atol=1e-10)


def test_spatial_frames_are_independent(rng):
    p = _spatial(rng)
    v = rng.normal(size=(3, 4, 8))
    base = spatial_attention(Tensor(v), p).data
    v[2] += rng.normal(size=(4, 8))
    moved = spatial_attention(Tensor(v), p).data
    assert np.abs(moved[:2] - base[:2]).max() <= 1e-12
    single = spatial_attention(Tensor(v[:1]), p).data
    np.testing.assert_array_equal(single[0], moved[0])


def test_a2v_zero_gate_is_identity(rng):
    c = CrossParams.init(rng, 8, 2)
    s, a = rng.normal(size=(3, 4, 8)), rng.normal(size=(3, 8))
    np.testing.assert_array_equal(a2v_attention(Tensor(s), Tensor(a), c).data, s)


def test_a2v_invariant_to_audio_permutation(rng):
    c = CrossParams.init(rng, 8, 2)
    c.gate.w.data = rng.normal(size=(8, 8))
    s, a = rng.normal(size=(3, 4, 8)), rng.normal(size=(3, 8))
    base = a2v_attention(Tensor(s), Tensor(a), c).data
    for perm in ([2, 0, 1], [1, 2, 0], [0, 2, 1]):
        moved = a2v_attention(Tensor(s), Tensor(a[perm]), c).data
        assert np.abs(moved - base).max() <= 1e-10


def test_a2v_single_audio_row_broadcasts_value(rng):
    c = CrossParams.init(rng, 8, 2)
    c.gate.w.data = np.eye(8)
    s, a = rng.normal(size=(1, 4, 8)), rng.normal(size=(1, 8))
    value = np_ln(a, c.ln_kv) @ c.attn.w_v.data @ c.attn.w_o.data
    np.testing.assert_allclose(a2v_attention(Tensor(s), Tensor(a), c).data[0], s[0] + value, atol=1e-12)


def test_a2v_rejects_t_mismatch(rng):
    c = CrossParams.init(rng, 8, 2)
    with pytest.raises(nx.ShapeError):
        a2v_attention(Tensor(np.ones((3, 4, 8))), Tensor(np.ones((2, 8))), c)


def test_v2a_zero_gate_identity_and_locality(rng):
    c = CrossParams.init(rng, 8, 2)
    s, a = rng.normal(size=(3, 4, 8)), rng.normal(size=(3, 8))
    np.testing.assert_array_equal(v2a_attention(Tensor(a), Tensor(s), c).data, a)
    c.gate.w.data = rng.normal(size=(8, 8))
    base = v2a_attention(Tensor(a), Tensor(s), c).data
    perm = np.array([3, 1, 0, 2])
    s_perm = s.copy()
    s_perm[1] = s[1, perm]
    assert np.abs(v2a_attention(Tensor(a), Tensor(s_perm), c).data - base).max() <= 1e-10
    s_other = s.copy()
    s_other[2] += rng.normal(size=(4, 8))
    moved = v2a_attention(Tensor(a), Tensor(s_other), c).data
    np.testing.assert_array_equal(moved[:2], base[:2])
    assert not np.allclose(moved[2], base[2])


def test_cross_attention_gradcheck(rng):
    c1, c2 = CrossParams.init(rng, 6, 2), CrossParams.init(rng, 6, 2)
    for c in (c1, c2):
        c.gate.w.data = rng.normal(size=(6, 6))
    s, a = Tensor(rng.normal(size=(2, 3, 6))), Tensor(rng.normal(size=(2, 6)))
    w1, w2 = Tensor(rng.normal(size=(2, 3, 6))), Tensor(rng.normal(size=(2, 6)))
    fn = lambda: (a2v_attention(s, a, c1) * w1).sum() + (v2a_attention(a, s, c2) * w2).sum()  # noqa: E731
    params = [s, a, c1.attn.w_q, c1.attn.w_k, c1.gate.w, c1.ln_kv.gain, c2.attn.w_v, c2.ln_q.bias]
    assert nx.gradcheck(fn, params) <= 1e-5


# ---------------------------------------------------------------- blocks

@pytest.mark.parametrize("variant", ["A2V_V2A", "A2V_only"])
def test_fresh_block_matches_video_only(rng, variant):
    blk = AvBlockParams.init(rng, 8, 2, variant)
    v, a = Tensor(rng.normal(size=(2, 3, 4, 8))), Tensor(rng.normal(size=(2, 3, 8)))
    vn, an = av_block(v, a, blk)
    vo, ao = av_block(v, a, blk, variant="video_only")
    np.testing.assert_array_equal(vn.data, vo.data)
    np.testing.assert_array_equal(an.data, a.data)


@pytest.mark.parametrize("variant", ["A2V_V2A", "A2V_only", "Joint_AV", "video_only"])
def test_block_shapes(rng, variant):
    blk = AvBlockParams.init(rng, 8, 2, variant)
    randomize_gates(type("M", (), {"backbone": type("B", (), {"blocks": [blk]})}), rng)
    vn, an = av_block(Tensor(rng.normal(size=(3, 4, 8))), Tensor(rng.normal(size=(3, 8))), blk)
    assert vn.shape == (3, 4, 8) and an.shape == (3, 8)


def test_a2v_only_passes_audio_through(rng):
    blk = AvBlockParams.init(rng, 8, 2, "A2V_only")
    blk.a2v.gate.w.data = rng.normal(size=(8, 8))
    a = Tensor(rng.normal(size=(3, 8)))
    _, an = av_block(Tensor(rng.normal(size=(3, 4, 8))), a, blk)
    np.testing.assert_array_equal(an.data, a.data)


def test_joint_av_mixes_audio_into_frames(rng):
    blk = AvBlockParams.init(rng, 8, 2, "Joint_AV")
    v = Tensor(rng.normal(size=(2, 4, 8)))
    a = rng.normal(size=(2, 8))
    out1, _ = av_block(v, Tensor(a), blk)
    a[1] += rng.normal(size=8)
    out2, _ = av_block(v, Tensor(a), blk)
    np.testing.assert_array_equal(out1.data[0], out2.data[0])
    assert not np.allclose(out1.data[1], out2.data[1])


# ---------------------------------------------------------------- full backbone

def _inputs(cfg, rng, batch=()):
    v0 = rng.normal(size=batch + (cfg.frames, cfg.n_patches + 1, cfg.d))
    a0 = rng.normal(size=batch + (cfg.frames, cfg.d))
    return v0, a0


def test_forward_matches_layer_loop_oracle(rng):
    cfg = tiny_config(layers=3, num_av_blocks=2, frames=3)
    model = init_model(cfg, seed=3)
    randomize_gates(model, rng)
    v0, a0 = _inputs(cfg, rng)
    f, v, a = forward_video(Tensor(v0), Tensor(a0), cfg, model.backbone, return_states=True)
    f_ref, states = oracle_forward(v0, a0, model.backbone)
    np.testing.assert_allclose(f.data, f_ref, atol=1e-10)
    np.testing.assert_allclose(v.data, states[-1][0], atol=1e-10)
    np.testing.assert_allclose(a.data, states[-1][1], atol=1e-10)


def test_forward_single_frame_single_layer(rng):
    cfg = tiny_config(layers=1, num_av_blocks=0, frames=1)
    model = init_model(cfg)
    v0, a0 = _inputs(cfg, rng)
    f = forward_video(Tensor(v0), Tensor(a0), cfg, model.backbone).data
    f_ref, _ = oracle_forward(v0, a0, model.backbone)
    np.testing.assert_allclose(f, f_ref, atol=1e-10)
    assert model.backbone.blocks[0].a2v is None


def test_zero_gates_make_audio_irrelevant(rng):
    cfg = tiny_config()
    model = init_model(cfg)
    v0, a0 = _inputs(cfg, rng, (3,))
    f_rand = forward_video(Tensor(v0), Tensor(a0), cfg, model.backbone).data
    f_zero = forward_video(Tensor(v0), Tensor(np.zeros_like(a0)), cfg, model.backbone).data
    np.testing.assert_array_equal(f_rand, f_zero)


def test_layers_beyond_k_are_video_only():
    cfg = tiny_config(layers=4, num_av_blocks=1)
    model = init_model(cfg)
    assert [b.variant for b in model.backbone.blocks] == ["A2V_V2A"] + ["video_only"] * 3


def test_forward_rejects_inconsistent_config(rng):
    cfg = tiny_config()
    model = init_model(cfg)
    v0, a0 = _inputs(tiny_config(frames=3), rng)
    with pytest.raises(nx.ShapeError):
        forward_video(Tensor(v0), Tensor(a0), cfg, model.backbone)
    with pytest.raises(ValueError):
        forward_video(Tensor(v0), Tensor(a0), tiny_config(layers=3), model.backbone)


def test_end_to_end_gradcheck_through_all_paths(rng):
    cfg = tiny_config()
    model = init_model(cfg, seed=11)
    randomize_gates(model, rng)
    v0, a0 = (Tensor(x) for x in _inputs(cfg, rng))
    head = Tensor(rng.normal(size=cfg.d))
    fn = lambda: (forward_video(v0, a0, cfg, model.backbone) * head).sum()  # noqa: E731
    blk = model.backbone.blocks[0]
    params = [v0, a0, blk.spatial.attn.w_q, blk.a2v.attn.w_k, blk.a2v.gate.w, blk.v2a.attn.w_q,
              blk.v2a.attn.w_v, blk.ffn.fc1.w, model.backbone.blocks[1].a2v.attn.w_v]
    assert nx.gradcheck(fn, params) <= 1e-4


# ---------------------------------------------------------------- saliency

def test_saliency_examples(rng):
    v = rng.normal(size=(2, 4, 5))
    a = rng.normal(size=(2, 5))
    v[0, 2] = a[0] * 3.0
    v[1, 1] = np.array([1.0, -1.0, 0, 0, 0])
    a[1] = np.array([1.0, 1.0, 0, 0, 0])
    sal = audio_patch_saliency(a, v)
    assert sal.shape == (2, 3)
    assert sal[0, 1] == pytest.approx(1.0)
    assert sal[1, 0] == pytest.approx(0.0, abs=1e-15)
    assert np.all(np.abs(sal) <= 1.0)
