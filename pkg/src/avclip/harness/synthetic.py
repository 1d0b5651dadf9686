"""Synthetic paired clips whose temporal content lives mostly in the audio.

Every clip draws a discrete latent ``z`` (``latent_dim`` components with
``vocab_size // latent_dim`` levels each). The text is ``z`` spelled out
through a fixed codebook. A fraction ``rho`` of the components is painted into
every frame as smooth colour patterns; the remaining components are written
into the spectrograms, each one confined to a single temporal segment of the
clip, so a model that sees only a few frames can recover them only by
listening.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import SyntheticDatasetSpec
from ..embeddings import AudioSpectrogram, TextSequence, VideoClip

FORMAT = "avclip-dataset"
VERSION = 1
VISUAL_AMPLITUDE = 0.15


@dataclass
class Dataset:
    spec: SyntheticDatasetSpec
    frames: np.ndarray  # (n, total_frames, H, W, 3) float32 in [0, 1]
    spects: np.ndarray  # (n, total_frames, M, C) float32
    tokens: np.ndarray  # (n, L) int64
    latents: np.ndarray  # (n, latent_dim) int64
    visual_components: np.ndarray
    audio_components: np.ndarray

    def __len__(self):
        return self.frames.shape[0]

    @property
    def val_idx(self) -> np.ndarray:
        n = len(self)
        n_val = max(1, int(round(n * self.spec.val_fraction)))
        return np.arange(n - n_val, n)

    @property
    def train_idx(self) -> np.ndarray:
        return np.arange(0, len(self) - len(self.val_idx))

    def triple(self, i: int, frame_idx=None):
        """The ``(VideoClip, AudioSpectrogram, TextSequence)`` for clip ``i``."""
        fidx = np.arange(self.frames.shape[1]) if frame_idx is None else np.asarray(frame_idx)
        clip = VideoClip(self.frames[i, fidx], frame_times=fidx / 3.0, source_id=f"clip{i:05d}")
        return clip, AudioSpectrogram(self.spects[i, fidx]), TextSequence(self.tokens[i], len(self.tokens[i]))


def _smooth_patterns(rng, count: int, height: int, width: int) -> np.ndarray:
    """Unit-RMS low-frequency colour patterns, shape ``(count, H, W, 3)``."""
    y, x = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing="ij")
    out = np.zeros((count, height, width, 3))
    for i in range(count):
        for _ in range(2):
            fy, fx = rng.integers(0, 3, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.cos(2 * np.pi * (fy * y + fx * x) + phase)
            out[i] += wave[..., None] * rng.normal(size=3)
        out[i] /= np.sqrt(np.mean(out[i] ** 2))
    return out


def generate_synthetic(spec: SyntheticDatasetSpec) -> Dataset:
    spec.validate()
    streams = np.random.SeedSequence(spec.seed).spawn(5)
    code_rng, lat_rng, vis_rng, aud_rng, noise_rng = (np.random.default_rng(s) for s in streams)
    n, total, dim, levels = spec.num_clips, spec.total_frames, spec.latent_dim, spec.levels

    codebook = code_rng.permutation(spec.vocab_size)[: dim * levels].reshape(dim, levels)
    z = lat_rng.integers(0, levels, size=(n, dim))
    positions = np.arange(spec.text_len) % dim
    tokens = codebook[positions[None, :], z[:, positions]]

    n_vis = int(round(spec.rho * dim))
    visual, audio = np.arange(n_vis), np.arange(n_vis, dim)

    image = np.full((n, spec.height, spec.width, 3), 0.5)
    if n_vis:
        pats = _smooth_patterns(vis_rng, n_vis * levels, spec.height, spec.width)
        pats = pats.reshape(n_vis, levels, spec.height, spec.width, 3)
        image += VISUAL_AMPLITUDE / np.sqrt(n_vis) * pats[visual[None, :], z[:, visual]].sum(axis=1)
    frames = image[:, None] + spec.noise * noise_rng.standard_normal((n, total, spec.height, spec.width, 3))
    frames = np.clip(frames, 0.0, 1.0)

    # audio component j is audible only in temporal segment j mod T
    segment_of_frame = np.arange(total) * spec.frames // total
    spects = spec.noise * noise_rng.standard_normal((n, total, spec.spect_m, spec.spect_c))
    if len(audio):
        pats = aud_rng.standard_normal((len(audio), levels, spec.spect_m, spec.spect_c))
        for j, comp in enumerate(audio):
            audible = segment_of_frame == (j % spec.frames)
            spects[:, audible] += pats[j, z[:, comp]][:, None]

    return Dataset(spec, frames.astype(np.float32), spects.astype(np.float32),
                   tokens.astype(np.int64), z.astype(np.int64), visual, audio)


ARRAYS = ("frames", "spects", "tokens", "latents", "visual_components", "audio_components")


def save_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in ARRAYS:
        arr = getattr(ds, name)
        np.save(directory / f"{name}.npy", arr, allow_pickle=False)
        files[name] = {"file": f"{name}.npy", "shape": list(arr.shape), "dtype": str(arr.dtype)}
    manifest = {"format": FORMAT, "version": VERSION, "spec": dataclasses.asdict(ds.spec),
                "arrays": files, "train_clips": len(ds.train_idx), "val_clips": len(ds.val_idx)}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise ValueError(f"{directory} does not hold a version-{VERSION} avclip dataset")
    arrays = {}
    for name in ARRAYS:
        entry = manifest["arrays"][name]
        arr = np.load(directory / entry["file"], allow_pickle=False)
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"{name}: manifest shape {entry['shape']} but file holds {arr.shape}")
        arrays[name] = arr
    return Dataset(SyntheticDatasetSpec(**manifest["spec"]), **arrays)
