"""Closed-form multiply-add and activation-memory accounting.

Only matrix-product multiply-adds are counted; softmax, layer norm, GELU and
residual additions are ignored. Totals are reported in GFLOPs with one
multiply-add counted as two floating point operations.

The per-layer terms mirror the execution order of the backbone, so on a
configuration small enough to run they agree with the multiply-adds counted by
:func:`avclip.numerics.count_macs` during a real forward pass.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .config import VARIANTS, ConfigError

CONVENTION = ("FLOPs = 2 x multiply-adds of matrix products; softmax, layer norm, GELU and "
              "elementwise ops not counted; memory = largest layer's live activations x batch x 4 bytes")

COMPONENTS = ("patch_embed", "spatial_qkvo", "spatial_scores_mix", "ffn", "a2v", "v2a",
              "joint_av", "audio_encoder", "text_encoder")

# ResNet-18 at 224x224 input is ~1.8e9 multiply-adds
RESNET18_MACS = 1.8e9


@dataclass
class ArchConfig:
    d: int = 768
    heads: int = 12
    layers: int = 12
    patch: int = 32
    height: int = 224
    width: int = 224
    frames_video: int = 32
    frames_audio: int = 32
    audio_macs: float = RESNET18_MACS
    variant: str = "A2V_V2A"
    num_av_blocks: int | None = None
    ffn_mult: int = 4
    include_text: bool = True
    text_tokens: int = 128
    text_layers: int = 12
    text_d: int = 512
    batch_size: int = 1

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def av_blocks(self) -> int:
        return self.layers if self.num_av_blocks is None else self.num_av_blocks

    def uses_audio(self) -> bool:
        return self.variant != "video_only" and self.av_blocks > 0

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.d % self.heads:
            raise ConfigError("heads must divide d")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError("frame size must be divisible by the patch size")
        if min(self.frames_video, self.frames_audio, self.layers, self.text_tokens) < 0:
            raise ConfigError("counts must be non-negative")
        if not 0 <= self.av_blocks <= self.layers:
            raise ConfigError("num_av_blocks must lie in [0, layers]")
        if self.uses_audio() and self.frames_video and self.frames_audio != self.frames_video:
            raise ConfigError("audio timesteps must pair one-to-one with video frames")
        return self


def vit_b32_geometry(variant: str, frames: int, **overrides) -> ArchConfig:
    """ViT-B/32 geometry; audio is present only for the audiovisual variants."""
    audio = 0 if variant == "video_only" else frames
    return ArchConfig(variant=variant, frames_video=frames, frames_audio=audio, **overrides).validate()


@dataclass
class CostReport:
    config: dict
    macs: dict = field(default_factory=dict)
    memory_values: int = 0
    convention: str = CONVENTION

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    @property
    def gflops(self) -> dict:
        return {k: 2 * v / 1e9 for k, v in self.macs.items()}

    @property
    def total_gflops(self) -> float:
        return 2 * self.total_macs / 1e9

    @property
    def memory_mb(self) -> float:
        return self.memory_values * 4 / 2**20

    def as_dict(self) -> dict:
        return {"convention": self.convention, "config": self.config,
                "macs": dict(self.macs), "total_macs": self.total_macs,
                "gflops": self.gflops, "total_gflops": self.total_gflops,
                "activation_memory_mb": self.memory_mb}

    def table(self) -> str:
        lines = [f"# {self.convention}", f"{'component':<20}{'GMACs':>14}{'GFLOPs':>14}"]
        for k in COMPONENTS:
            lines.append(f"{k:<20}{self.macs[k] / 1e9:>14.3f}{2 * self.macs[k] / 1e9:>14.3f}")
        lines.append(f"{'total':<20}{self.total_macs / 1e9:>14.3f}{self.total_gflops:>14.3f}")
        lines.append(f"{'activation memory':<20}{self.memory_mb:>13.1f} MB (batch {self.config['batch_size']})")
        return "\n".join(lines)


def _layer_macs(variant: str, t: int, ta: int, n1: int, d: int, mult: int) -> dict:
    out = dict.fromkeys(COMPONENTS, 0)
    if t == 0:
        return out
    out["ffn"] = 2 * mult * t * n1 * d * d
    if variant == "Joint_AV":
        n2 = n1 + 1
        out["joint_av"] = 4 * t * n2 * d * d + 2 * t * n2 * n2 * d
        return out
    out["spatial_qkvo"] = 4 * t * n1 * d * d
    out["spatial_scores_mix"] = 2 * t * n1 * n1 * d
    if variant in ("A2V_V2A", "A2V_only"):
        # query, output and gate per visual token; audio keys/values projected once per layer
        out["a2v"] = 3 * t * n1 * d * d + 2 * ta * d * d + 2 * t * n1 * ta * d
    if variant == "A2V_V2A":
        out["v2a"] = 3 * ta * d * d + 2 * t * n1 * d * d + 2 * ta * n1 * d
    return out


def _layer_memory(variant: str, t: int, ta: int, n1: int, d: int, h: int, mult: int) -> int:
    if t == 0:
        return ta * d
    x = t * n1 * d
    if variant == "Joint_AV":
        n2 = n1 + 1
        xj = t * n2 * d
        return 6 * xj + 2 * h * t * n2 * n2 + (5 + 2 * mult) * x
    vals = (11 + 2 * mult) * x + 2 * h * t * n1 * n1 + ta * d
    if variant in ("A2V_V2A", "A2V_only"):
        vals += 6 * x + 3 * ta * d + 2 * h * t * n1 * ta
    if variant == "A2V_V2A":
        vals += 3 * x + 6 * ta * d + 2 * h * ta * n1
    return vals


def count_flops(cfg: ArchConfig) -> CostReport:
    cfg.validate()
    d, n, mult = cfg.d, cfg.n_patches, cfg.ffn_mult
    t = cfg.frames_video
    ta = cfg.frames_audio if cfg.uses_audio() else 0
    n1 = n + 1
    macs = dict.fromkeys(COMPONENTS, 0)
    macs["patch_embed"] = t * n * 3 * cfg.patch**2 * d
    peak = 0
    for layer in range(cfg.layers):
        variant = cfg.variant if layer < cfg.av_blocks else "video_only"
        for k, v in _layer_macs(variant, t, ta, n1, d, mult).items():
            macs[k] += v
        peak = max(peak, _layer_memory(variant, t, ta, n1, d, cfg.heads, mult))
    macs["audio_encoder"] = int(ta * cfg.audio_macs)
    if cfg.include_text:
        lt, dt = cfg.text_tokens + 1, cfg.text_d
        macs["text_encoder"] = cfg.text_layers * ((4 + 2 * mult) * lt * dt * dt + 2 * lt * lt * dt)
    return CostReport(dataclasses.asdict(cfg), macs, peak * cfg.batch_size)


def compare(a: ArchConfig | CostReport, b: ArchConfig | CostReport) -> dict:
    """Totals, per-component GFLOPs and ``b / a`` ratios; asserts nothing."""
    ra = a if isinstance(a, CostReport) else count_flops(a)
    rb = b if isinstance(b, CostReport) else count_flops(b)

    def ratio(x, y):
        if x == y:
            return 1.0
        return y / x if x else float("inf")

    rows = [{"component": k, "a_gflops": ra.gflops[k], "b_gflops": rb.gflops[k],
             "b_over_a": ratio(ra.macs[k], rb.macs[k])} for k in COMPONENTS]
    return {
        "convention": CONVENTION,
        "a_total_gflops": ra.total_gflops,
        "b_total_gflops": rb.total_gflops,
        "flops_b_over_a": ratio(ra.total_macs, rb.total_macs),
        "a_memory_mb": ra.memory_mb,
        "b_memory_mb": rb.memory_mb,
        "memory_b_over_a": ratio(ra.memory_values, rb.memory_values),
        "cheaper": "a" if ra.total_macs < rb.total_macs else "b" if rb.total_macs < ra.total_macs else "tie",
        "components": rows,
    }


def frames_sweep(frames=(8, 16, 32, 64, 96), **overrides) -> list[dict]:
    """GFLOPs of the audiovisual and video-only models over a range of frame counts."""
    rows = []
    for t in frames:
        av = count_flops(vit_b32_geometry("A2V_V2A", t, **overrides))
        vo = count_flops(vit_b32_geometry("video_only", t, **overrides))
        rows.append({"frames": t, "av_gflops": av.total_gflops, "video_only_gflops": vo.total_gflops,
                     "av_memory_mb": av.memory_mb, "video_only_memory_mb": vo.memory_mb})
    return rows
