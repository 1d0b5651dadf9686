"""Configuration records and the strict JSON run-config loader."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

VARIANTS = ("A2V_V2A", "A2V_only", "Joint_AV", "video_only")
SAMPLING = ("uniform", "random_segment")


class ConfigError(ValueError):
    pass


@dataclass
class SyntheticDatasetSpec:
    num_clips: int = 500
    total_frames: int = 16
    frames: int = 4
    height: int = 16
    width: int = 16
    patch: int = 8
    spect_m: int = 8
    spect_c: int = 8
    vocab_size: int = 40
    text_len: int = 10
    latent_dim: int = 10
    rho: float = 0.3
    noise: float = 0.05
    val_fraction: float = 0.2
    seed: int = 0

    @property
    def levels(self) -> int:
        return self.vocab_size // self.latent_dim

    def validate(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError("frame height and width must be divisible by the patch size")
        if not 1 <= self.frames <= self.total_frames:
            raise ConfigError("need 1 <= frames <= total_frames")
        if self.levels < 2:
            raise ConfigError("vocab_size must give at least two levels per latent component")
        if self.text_len < 1 or self.latent_dim < 1 or self.num_clips < 2:
            raise ConfigError("text_len, latent_dim must be >= 1 and num_clips >= 2")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        return self


@dataclass
class ModelConfig:
    d: int = 32
    heads: int = 4
    layers: int = 2
    num_av_blocks: int | None = None
    variant: str = "A2V_V2A"
    patch: int = 8
    height: int = 16
    width: int = 16
    frames: int = 4
    spect_m: int = 8
    spect_c: int = 8
    audio_hidden: int = 64
    audio_pool: tuple = (4, 4)
    vocab_size: int = 40
    max_text_tokens: int = 64
    text_layers: int = 1

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def av_blocks(self) -> int:
        return self.layers if self.num_av_blocks is None else self.num_av_blocks

    def block_variants(self) -> list[str]:
        return [self.variant if i < self.av_blocks else "video_only" for i in range(self.layers)]

    def validate(self):
        if self.d % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide d ({self.d})")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0 <= self.av_blocks <= self.layers:
            raise ConfigError("num_av_blocks must lie in [0, layers]")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError("frame height and width must be divisible by the patch size")
        gm, gc = self.audio_pool
        if self.spect_m % gm or self.spect_c % gc:
            raise ConfigError("audio_pool must divide the spectrogram extents")
        return self

    @classmethod
    def for_dataset(cls, spec: SyntheticDatasetSpec, **arch) -> "ModelConfig":
        return cls(patch=spec.patch, height=spec.height, width=spec.width, frames=spec.frames,
                   spect_m=spec.spect_m, spect_c=spec.spect_c, vocab_size=spec.vocab_size,
                   max_text_tokens=max(spec.text_len, arch.pop("max_text_tokens", 64)),
                   **arch).validate()


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 8
    lr_slow: float = 1e-7
    lr_new: float = 1e-4
    weight_decay: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    logit_scale_init: float = math.log(1 / 0.07)
    eval_every: int = 50
    sampling: str = "uniform"

    def validate(self):
        if self.sampling not in SAMPLING:
            raise ConfigError(f"unknown sampling {self.sampling!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        return self


# keys of ModelConfig that are architecture choices; geometry comes from the dataset
ARCH_KEYS = ("d", "heads", "layers", "num_av_blocks", "variant", "audio_hidden",
             "audio_pool", "max_text_tokens", "text_layers")


@dataclass
class RunConfig:
    seed: int = 0
    data: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    arch: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig.for_dataset(self.data, **dict(self.arch))

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self.data)
        data.pop("seed")
        arch = {k: list(v) if isinstance(v, tuple) else v for k, v in self.arch.items()}
        return {"seed": self.seed, "data": data, "model": arch, "train": dataclasses.asdict(self.train)}


def _strict(cls, section: dict, where: str, allowed=None):
    names = {f.name for f in dataclasses.fields(cls)} if allowed is None else set(allowed)
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {sorted(unknown)}")
    return section


def parse_run_config(raw: dict) -> RunConfig:
    _strict(RunConfig, raw, "top level", allowed=("seed", "data", "model", "train"))
    seed = int(raw.get("seed", 0))
    data_raw = dict(_strict(SyntheticDatasetSpec, raw.get("data", {}), "data"))
    if "seed" in data_raw:
        raise ConfigError("[data] takes no seed; use the top-level seed key")
    data = SyntheticDatasetSpec(**data_raw, seed=seed).validate()
    arch = dict(_strict(None, raw.get("model", {}), "model", allowed=ARCH_KEYS))
    if "audio_pool" in arch:
        arch["audio_pool"] = tuple(arch["audio_pool"])
    train = TrainConfig(**_strict(TrainConfig, raw.get("train", {}), "train")).validate()
    cfg = RunConfig(seed=seed, data=data, arch=arch, train=train)
    cfg.model  # validates the architecture against the dataset geometry
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    return parse_run_config(json.loads(Path(path).read_text()))
