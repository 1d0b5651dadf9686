"""Input embeddings: frame sampling, patch tokens, audio rows and the text CLS vector."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import FfnParams, MhaParams, ffn_residual, mha
from .config import ModelConfig
from .numerics import ShapeError, Tensor
from .params import LayerNormParams, LinearParams, normal


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3) in [0, 1]
    frame_times: np.ndarray = None
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3 or self.frames.shape[0] < 1:
            raise ShapeError(f"clip frames must be (T, H, W, 3) with T >= 1, got {self.frames.shape}")
        if self.frame_times is None:
            self.frame_times = np.arange(self.frames.shape[0], dtype=float)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class AudioSpectrogram:
    spect: np.ndarray  # (T, M, C)
    span_seconds: float = 10.0

    def __post_init__(self):
        self.spect = np.asarray(self.spect)
        if self.spect.ndim != 3 or min(self.spect.shape) < 1:
            raise ShapeError(f"spectrogram stack must be (T, M, C), got {self.spect.shape}")


@dataclass
class TextSequence:
    tokens: np.ndarray
    max_text_tokens: int = 64

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if not 1 <= self.tokens.shape[-1] <= self.max_text_tokens:
            raise ValueError(f"text length {self.tokens.shape[-1]} outside [1, {self.max_text_tokens}]")


def sample_frames(total_frames: int, num: int, strategy: str = "uniform", seed=None) -> np.ndarray:
    """Choose ``num`` strictly increasing frame indices out of ``total_frames``.

    ``uniform`` spaces indices linearly from the first to the last frame with
    floor rounding (a single frame picks the middle one). ``random_segment``
    cuts the clip into ``num`` equal segments and draws one index per segment.
    """
    if num < 1 or num > total_frames:
        raise ValueError(f"cannot sample {num} frames from a clip of {total_frames}")
    if strategy == "uniform":
        if num == 1:
            return np.array([(total_frames - 1) // 2])
        return np.arange(num) * (total_frames - 1) // (num - 1)
    if strategy == "random_segment":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        edges = np.arange(num + 1) * total_frames // num
        return np.array([rng.integers(lo, hi) for lo, hi in zip(edges[:-1], edges[1:])])
    raise ValueError(f"unknown sampling strategy {strategy!r}")


def patchify(frames, patch: int) -> np.ndarray:
    """``(..., T, H, W, 3)`` -> ``(..., T, N, 3 P^2)``; patches in row-major order, pixels channel-last."""
    frames = np.asarray(getattr(frames, "frames", frames))
    *lead, h, w, c = frames.shape
    if h % patch or w % patch:
        raise ShapeError(f"frame {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = frames.reshape(tuple(lead) + (gh, patch, gw, patch, c))
    n = len(lead)
    x = x.transpose(tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    return x.reshape(tuple(lead) + (gh * gw, patch * patch * c))


def unpatchify(patches: np.ndarray, patch: int, height: int, width: int) -> np.ndarray:
    *lead, num, dim = patches.shape
    gh, gw = height // patch, width // patch
    c = dim // (patch * patch)
    if num != gh * gw or c * patch * patch != dim:
        raise ShapeError(f"patch array {patches.shape} does not tile a {height}x{width} frame")
    x = patches.reshape(tuple(lead) + (gh, gw, patch, patch, c))
    n = len(lead)
    x = x.transpose(tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    return x.reshape(tuple(lead) + (height, width, c))


@dataclass
class VideoEmbedParams:
    proj: LinearParams
    cls: Tensor
    pos_spatial: Tensor
    pos_temporal: Tensor

    @classmethod
    def init(cls, rng, cfg: ModelConfig) -> "VideoEmbedParams":
        d = cfg.d
        return cls(LinearParams.init(rng, 3 * cfg.patch**2, d), normal(rng, d),
                   normal(rng, (cfg.n_patches + 1, d)), normal(rng, (cfg.frames, d)))


def embed_video(patches, p: VideoEmbedParams) -> Tensor:
    """Patch tokens plus a per-frame CLS token at index 0, with factorised positions.

    The spatial table has ``N+1`` rows shared by all frames; the temporal table
    has ``T`` rows shared by all tokens of a frame.
    """
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    *lead, t, n, dim = patches.shape
    if dim != p.proj.w.shape[0]:
        raise ShapeError(f"patch dim {dim} does not match embedding input {p.proj.w.shape[0]}")
    if n + 1 != p.pos_spatial.shape[0] or t != p.pos_temporal.shape[0]:
        raise ShapeError(f"grid (T={t}, N={n}) does not match positional tables "
                         f"{p.pos_spatial.shape} / {p.pos_temporal.shape}")
    d = p.cls.shape[0]
    tokens = nx.linear(patches, p.proj.w, p.proj.b)
    cls = nx.broadcast_to(p.cls, tuple(lead) + (t, 1, d))
    grid = nx.concat([cls, tokens], axis=-2)
    return grid + p.pos_spatial + p.pos_temporal.reshape(t, 1, d)


@dataclass
class ToyAudioEncoder:
    """Average-pool each spectrogram onto a coarse grid, then a two-layer perceptron."""

    l1: LinearParams
    l2: LinearParams
    pool: tuple = (4, 4)

    @classmethod
    def init(cls, rng, cfg: ModelConfig) -> "ToyAudioEncoder":
        gm, gc = cfg.audio_pool
        return cls(LinearParams.init(rng, gm * gc, cfg.audio_hidden),
                   LinearParams.init(rng, cfg.audio_hidden, cfg.d), pool=tuple(cfg.audio_pool))

    @property
    def out_dim(self) -> int:
        return self.l2.w.shape[1]

    def macs_per_spectrogram(self) -> int:
        return self.l1.w.size + self.l2.w.size

    def __call__(self, spect) -> Tensor:
        spect = np.asarray(getattr(spect, "data", spect))
        *lead, m, c = spect.shape
        gm, gc = self.pool
        if m % gm or c % gc:
            raise ShapeError(f"spectrogram {m}x{c} is not divisible into a {gm}x{gc} pool grid")
        pooled = spect.reshape(tuple(lead) + (gm, m // gm, gc, c // gc)).mean(axis=(-3, -1))
        x = Tensor(pooled.reshape(tuple(lead) + (gm * gc,)))
        h = nx.gelu(nx.linear(x, self.l1.w, self.l1.b))
        return nx.linear(h, self.l2.w, self.l2.b)


def encode_audio(spect, encoder, d: int) -> Tensor:
    """Encode every timestep's spectrogram independently into a ``(..., T, d)`` track."""
    if encoder.out_dim != d:
        raise ShapeError(f"audio encoder emits {encoder.out_dim} features, model width is {d}")
    return encoder(getattr(spect, "spect", spect))


@dataclass
class TextLayerParams:
    ln: LayerNormParams
    attn: MhaParams
    ffn: FfnParams


@dataclass
class TextEncoderParams:
    table: Tensor  # (vocab + 1, d); the last row is the CLS token
    pos: Tensor
    layers: list = field(default_factory=list)

    @classmethod
    def init(cls, rng, cfg: ModelConfig) -> "TextEncoderParams":
        d = cfg.d
        layers = [TextLayerParams(LayerNormParams.init(d), MhaParams.init(rng, d, cfg.heads),
                                  FfnParams.init(rng, d)) for _ in range(cfg.text_layers)]
        return cls(normal(rng, (cfg.vocab_size + 1, d)), normal(rng, (cfg.max_text_tokens + 1, d)), layers)

    @property
    def cls_id(self) -> int:
        return self.table.shape[0] - 1


def encode_text(tokens, p: TextEncoderParams) -> Tensor:
    """Prepend CLS, add positions, run the text layers and return the CLS output ``(..., d)``."""
    ids = np.asarray(getattr(tokens, "tokens", tokens), dtype=np.int64)
    length = ids.shape[-1]
    if length < 1 or length + 1 > p.pos.shape[0]:
        raise ValueError(f"text length {length} outside [1, {p.pos.shape[0] - 1}]")
    if ids.min() < 0 or ids.max() >= p.cls_id:
        raise IndexError(f"token id out of vocabulary [0, {p.cls_id})")
    ids = np.concatenate([np.full(ids.shape[:-1] + (1,), p.cls_id), ids], axis=-1)
    x = nx.embedding(p.table, ids) + p.pos[: length + 1]
    for layer in p.layers:
        h = nx.layer_norm(x, layer.ln.gain, layer.ln.bias)
        x = x + mha(h, h, h, layer.attn)
        x = ffn_residual(x, layer.ffn)
    return x[..., 0, :]
