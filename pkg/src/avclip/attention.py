"""Audiovisual transformer backbone.

Shapes follow a ``(..., T, N+1, d)`` convention for the visual token grid and
``(..., T, d)`` for the audio track; any leading axes are batch axes.

Each block runs spatial self-attention per frame, then two cross-attention
paths that both read the same spatial output ``S`` and the same incoming audio:

* audio-to-video: every visual token of frame ``t`` queries all ``T`` audio rows,
* video-to-audio: audio row ``t`` queries the ``N+1`` tokens of frame ``t``,

each followed by a zero-initialised linear gate so that a fresh block is an
exact identity on the cross-modal paths. A pre-norm feed-forward sublayer
closes the block on the visual stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .numerics import ShapeError, Tensor
from .params import LayerNormParams, LinearParams, xavier_uniform


@dataclass
class MhaParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    @classmethod
    def init(cls, rng, d: int, heads: int) -> "MhaParams":
        if d % heads:
            raise ValueError(f"heads ({heads}) must divide d ({d})")
        return cls(*(xavier_uniform(rng, d, d) for _ in range(4)), heads=heads)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, m, d = x.shape
    x = x.reshape(tuple(lead) + (m, heads, d // heads))
    n = len(lead)
    return nx.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, m, dh = x.shape
    n = len(lead)
    x = nx.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return x.reshape(tuple(lead) + (m, h * dh))


def mha(q_in: Tensor, k_in: Tensor, v_in: Tensor, p: MhaParams, return_weights: bool = False):
    """Multi-head attention ``softmax(Q K^T / sqrt(d/h)) V`` followed by ``W_O``.

    Leading axes of the three inputs broadcast against each other.
    """
    d = p.w_q.shape[0]
    if q_in.shape[-1] != d or k_in.shape[-1] != d or v_in.shape[-1] != d:
        raise ShapeError(f"mha: feature extents {q_in.shape}, {k_in.shape}, {v_in.shape} vs d={d}")
    if k_in.shape[-2] != v_in.shape[-2]:
        raise ShapeError(f"mha: keys {k_in.shape} and values {v_in.shape} differ in length")
    q = _split_heads(nx.linear(q_in, p.w_q), p.heads)
    k = _split_heads(nx.linear(k_in, p.w_k), p.heads)
    v = _split_heads(nx.linear(v_in, p.w_v), p.heads)
    scores = nx.scale(nx.matmul(q, nx.swap_last(k)), 1.0 / np.sqrt(d // p.heads))
    weights = nx.softmax_rows(scores)
    out = nx.linear(_merge_heads(nx.matmul(weights, v)), p.w_o)
    return (out, weights) if return_weights else out


@dataclass
class SpatialParams:
    ln: LayerNormParams
    attn: MhaParams


@dataclass
class CrossParams:
    ln_q: LayerNormParams
    ln_kv: LayerNormParams
    attn: MhaParams
    gate: LinearParams

    @classmethod
    def init(cls, rng, d: int, heads: int) -> "CrossParams":
        return cls(LayerNormParams.init(d), LayerNormParams.init(d),
                   MhaParams.init(rng, d, heads), LinearParams.zero(d, d))


@dataclass
class FfnParams:
    ln: LayerNormParams
    fc1: LinearParams
    fc2: LinearParams

    @classmethod
    def init(cls, rng, d: int, mult: int = 4) -> "FfnParams":
        return cls(LayerNormParams.init(d), LinearParams.init(rng, d, mult * d),
                   LinearParams.init(rng, mult * d, d))


def _ln(x: Tensor, p: LayerNormParams) -> Tensor:
    return nx.layer_norm(x, p.gain, p.bias)


def spatial_attention(v: Tensor, p: SpatialParams) -> Tensor:
    """Pre-norm self-attention inside each frame; frames never mix."""
    h = _ln(v, p.ln)
    return v + mha(h, h, h, p.attn)


def a2v_attention(s: Tensor, a: Tensor, p: CrossParams) -> Tensor:
    t = s.shape[-3]
    if a.shape[-2] != t:
        raise ShapeError(f"a2v: audio has {a.shape[-2]} timesteps, visual grid has {t} frames")
    kv = _ln(a, p.ln_kv)
    kv = kv.reshape(kv.shape[:-2] + (1,) + kv.shape[-2:])  # same audio keys for every frame
    out = mha(_ln(s, p.ln_q), kv, kv, p.attn)
    return s + nx.linear(out, p.gate.w, p.gate.b)


def v2a_attention(a: Tensor, s: Tensor, p: CrossParams) -> Tensor:
    if a.shape[-2] != s.shape[-3] or a.shape[-1] != s.shape[-1]:
        raise ShapeError(f"v2a: audio {a.shape} does not pair with visual grid {s.shape}")
    q = _ln(a, p.ln_q)
    q = q.reshape(q.shape[:-1] + (1, q.shape[-1]))
    kv = _ln(s, p.ln_kv)
    out = mha(q, kv, kv, p.attn)
    out = out.reshape(a.shape)
    return a + nx.linear(out, p.gate.w, p.gate.b)


def ffn_residual(x: Tensor, p: FfnParams) -> Tensor:
    h = nx.gelu(nx.linear(_ln(x, p.ln), p.fc1.w, p.fc1.b))
    return x + nx.linear(h, p.fc2.w, p.fc2.b)


@dataclass
class AvBlockParams:
    variant: str
    spatial: SpatialParams
    ffn: FfnParams
    a2v: CrossParams | None = None
    v2a: CrossParams | None = None
    joint_ln_audio: LayerNormParams | None = None

    @classmethod
    def init(cls, rng, d: int, heads: int, variant: str) -> "AvBlockParams":
        spatial = SpatialParams(LayerNormParams.init(d), MhaParams.init(rng, d, heads))
        block = cls(variant, spatial, FfnParams.init(rng, d))
        if variant in ("A2V_V2A", "A2V_only"):
            block.a2v = CrossParams.init(rng, d, heads)
        if variant == "A2V_V2A":
            block.v2a = CrossParams.init(rng, d, heads)
        if variant == "Joint_AV":
            block.joint_ln_audio = LayerNormParams.init(d)
        return block


def joint_attention(v: Tensor, a: Tensor, p: AvBlockParams) -> tuple[Tensor, Tensor]:
    """Self-attention over each frame's tokens concatenated with that frame's audio row."""
    n1 = v.shape[-2]
    audio = _ln(a, p.joint_ln_audio)
    audio = audio.reshape(audio.shape[:-1] + (1, audio.shape[-1]))
    x = nx.concat([_ln(v, p.spatial.ln), audio], axis=-2)
    out = mha(x, x, x, p.spatial.attn)
    return v + out[..., :n1, :], a + out[..., n1, :]


def av_block(v: Tensor, a: Tensor, p: AvBlockParams, variant: str | None = None):
    """One backbone layer; ``variant`` overrides the block's own variant."""
    variant = variant or p.variant
    if variant == "Joint_AV":
        v_mid, a_next = joint_attention(v, a, p)
    else:
        s = spatial_attention(v, p.spatial)
        v_mid, a_next = s, a
        if variant in ("A2V_V2A", "A2V_only"):
            v_mid = a2v_attention(s, a, p.a2v)
        if variant == "A2V_V2A":
            a_next = v2a_attention(a, s, p.v2a)
    return ffn_residual(v_mid, p.ffn), a_next


@dataclass
class BackboneParams:
    blocks: list
    ln_final: LayerNormParams

    @classmethod
    def init(cls, rng, cfg: ModelConfig) -> "BackboneParams":
        blocks = [AvBlockParams.init(rng, cfg.d, cfg.heads, v) for v in cfg.block_variants()]
        return cls(blocks, LayerNormParams.init(cfg.d))


def forward_video(v0: Tensor, a0: Tensor, cfg: ModelConfig, params: BackboneParams,
                  variants: list[str] | None = None, return_states: bool = False):
    """Run every block, mean-pool the per-frame CLS tokens and apply the final norm.

    ``variants`` replaces the per-layer variant list (e.g. all ``"video_only"``
    to evaluate the same weights without the audio paths).
    """
    variants = variants or [b.variant for b in params.blocks]
    if len(params.blocks) != cfg.layers or len(variants) != cfg.layers:
        raise ValueError(f"config has {cfg.layers} layers but params have {len(params.blocks)}")
    if v0.shape[-3:] != (cfg.frames, cfg.n_patches + 1, cfg.d):
        raise ShapeError(f"visual tokens {v0.shape} do not match config "
                         f"(T={cfg.frames}, N+1={cfg.n_patches + 1}, d={cfg.d})")
    v, a = v0, a0
    for block, variant in zip(params.blocks, variants):
        v, a = av_block(v, a, block, variant)
    pooled = nx.mean(v[..., 0, :], axis=-2)
    f = _ln(pooled, params.ln_final)
    return (f, v, a) if return_states else f


def audio_patch_saliency(a_final, v_final) -> np.ndarray:
    """Cosine similarity between audio row ``t`` and each patch token of frame ``t``.

    Returns an array of shape ``(..., T, N)`` clipped to [-1, 1]; the CLS token is excluded.
    """
    a = np.asarray(getattr(a_final, "data", a_final))
    v = np.asarray(getattr(v_final, "data", v_final))[..., 1:, :]
    dots = np.einsum("...td,...tnd->...tn", a, v)
    norms = np.linalg.norm(a, axis=-1)[..., None] * np.linalg.norm(v, axis=-1)
    sal = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > nx.NORM_FLOOR)
    return np.clip(sal, -1.0, 1.0)
