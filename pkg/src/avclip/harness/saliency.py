"""Audio-to-patch saliency export (grayscale PGM grid, JSON values, PNG figure)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import plotting
from ..attention import audio_patch_saliency
from ..model import AudioVisualModel, encode_videos
from ..numerics import no_grad


class CheckpointMismatch(ValueError):
    pass


def saliency_maps(model: AudioVisualModel, frames, spects) -> np.ndarray:
    """Per-frame saliency grids of shape ``(T, H/P, W/P)``."""
    cfg = model.cfg
    frames = np.asarray(frames)
    spects = np.asarray(spects)
    want_f = (cfg.frames, cfg.height, cfg.width, 3)
    want_s = (cfg.frames, cfg.spect_m, cfg.spect_c)
    if frames.shape != want_f or spects.shape != want_s:
        raise CheckpointMismatch(f"clip {frames.shape}/{spects.shape} does not fit the model "
                                 f"(expects {want_f} and {want_s})")
    with no_grad():
        _, v, a = encode_videos(model, frames[None], spects[None], return_states=True)
    sal = audio_patch_saliency(a.data[0], v.data[0])
    return sal.reshape(cfg.frames, cfg.height // cfg.patch, cfg.width // cfg.patch)


def to_pgm_grid(grids: np.ndarray, scale: int = 8, border: int = 1) -> np.ndarray:
    """Tile ``(T, gh, gw)`` maps in [-1, 1] side by side as 8-bit gray, upscaled by ``scale``."""
    t, gh, gw = grids.shape
    cell_h, cell_w = gh * scale, gw * scale
    canvas = np.zeros((cell_h + 2 * border, t * (cell_w + border) + border), dtype=np.uint8)
    pix = np.round((np.clip(grids, -1, 1) + 1) * 127.5).astype(np.uint8)
    for i in range(t):
        up = np.kron(pix[i], np.ones((scale, scale), dtype=np.uint8))
        x0 = border + i * (cell_w + border)
        canvas[border:border + cell_h, x0:x0 + cell_w] = up
    return canvas


def write_pgm(path, image: np.ndarray) -> Path:
    path = Path(path)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.astype(np.uint8).tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path} is not an 8-bit binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def export_saliency(model: AudioVisualModel, frames, spects, out_dir, stem: str = "saliency",
                    figure: bool = True) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grids = saliency_maps(model, frames, spects)
    paths = {"pgm": write_pgm(out_dir / f"{stem}.pgm", to_pgm_grid(grids))}
    payload = {"frames": grids.shape[0], "grid": list(grids.shape[1:]),
               "range": [-1.0, 1.0], "values": grids.round(8).tolist()}
    paths["json"] = out_dir / f"{stem}.json"
    paths["json"].write_text(json.dumps(payload, indent=1))
    if figure:
        paths["png"] = plotting.saliency_grid(grids, out_dir / f"{stem}.png")
    return {"grids": grids, "paths": paths}
