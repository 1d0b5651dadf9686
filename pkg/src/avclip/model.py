"""The full retrieval model: video/audio tower, text tower and the learnable logit scale."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import BackboneParams, forward_video
from .config import ModelConfig
from .embeddings import (TextEncoderParams, ToyAudioEncoder, VideoEmbedParams, embed_video,
                         encode_audio, encode_text, patchify)
from .numerics import Tensor
from .params import named_parameters


@dataclass
class AudioVisualModel:
    cfg: ModelConfig
    video_embed: VideoEmbedParams
    audio_encoder: ToyAudioEncoder
    backbone: BackboneParams
    text: TextEncoderParams
    logit_scale: Tensor

    def named_parameters(self):
        for name in ("video_embed", "audio_encoder", "backbone", "text", "logit_scale"):
            yield from named_parameters(getattr(self, name), name)

    def parameters(self):
        return [t for _, t in self.named_parameters()]


def init_model(cfg: ModelConfig, seed: int = 0, logit_scale_init: float = math.log(1 / 0.07)) -> AudioVisualModel:
    cfg.validate()
    rng = np.random.default_rng(seed)
    return AudioVisualModel(
        cfg=cfg,
        video_embed=VideoEmbedParams.init(rng, cfg),
        audio_encoder=ToyAudioEncoder.init(rng, cfg),
        backbone=BackboneParams.init(rng, cfg),
        text=TextEncoderParams.init(rng, cfg),
        logit_scale=Tensor(logit_scale_init, requires_grad=True),
    )


def embed_inputs(model: AudioVisualModel, frames, spects, with_audio: bool = True) -> tuple[Tensor, Tensor]:
    """Raw ``(..., T, H, W, 3)`` frames and ``(..., T, M, C)`` spectrograms to ``(V0, A0)``.

    With ``with_audio=False`` the audio encoder is skipped and ``A0`` is zeros.
    """
    v0 = embed_video(patchify(frames, model.cfg.patch), model.video_embed)
    if with_audio:
        a0 = encode_audio(spects, model.audio_encoder, model.cfg.d)
    else:
        a0 = Tensor(np.zeros(v0.shape[:-2] + (model.cfg.d,), dtype=v0.data.dtype))
    return v0, a0


def encode_videos(model: AudioVisualModel, frames, spects, variants=None, return_states=False):
    variants = variants or [b.variant for b in model.backbone.blocks]
    # an all video-only stack never reads the audio stream
    needs_audio = return_states or any(v != "video_only" for v in variants)
    v0, a0 = embed_inputs(model, frames, spects, with_audio=needs_audio)
    return forward_video(v0, a0, model.cfg, model.backbone, variants=variants, return_states=return_states)


def encode_texts(model: AudioVisualModel, tokens) -> Tensor:
    return encode_text(tokens, model.text)
