"""Ablation sweeps: block variant, number of audiovisual blocks, frame sampling."""

from __future__ import annotations

import csv
import dataclasses
import logging
from pathlib import Path

import numpy as np

from ..config import RunConfig
from ..training import evaluate, train

log = logging.getLogger(__name__)

BLOCK_VARIANTS = ("video_only", "Joint_AV", "A2V_only", "A2V_V2A")


def _run(dataset, run_cfg: RunConfig, seeds, label, **arch) -> dict:
    model_cfg = dataclasses.replace(run_cfg.model, **arch).validate()
    train_cfg = dataclasses.replace(run_cfg.train, eval_every=0)
    per_seed = []
    for seed in seeds:
        result = train(dataset, model_cfg, train_cfg, seed=seed)
        per_seed.append(evaluate(result.model, dataset))
        log.info("%s seed %d: R@1 %.1f", label, seed, per_seed[-1].r1)
    r1 = np.array([r.r1 for r in per_seed])
    return {"label": label, "seeds": list(seeds), "r1": r1.tolist(), "r1_mean": float(r1.mean()),
            "r1_min": float(r1.min()), "r1_max": float(r1.max()),
            "r5_mean": float(np.mean([r.r5 for r in per_seed])),
            "mnr_mean": float(np.mean([r.mnr for r in per_seed]))}


def run_ablation_blocks(run_cfg: RunConfig, dataset, seeds, variants=BLOCK_VARIANTS) -> list[dict]:
    """Train every block variant with the same seeds and report mean and range of val R@1."""
    return [_run(dataset, run_cfg, seeds, v, variant=v) for v in variants]


def run_ablation_k(run_cfg: RunConfig, dataset, seeds, ks=None, variant: str = "A2V_V2A") -> list[dict]:
    """Audiovisual blocks in the first ``k`` layers, the rest video-only."""
    layers = run_cfg.model.layers
    ks = sorted({0, layers // 2, layers}) if ks is None else ks
    return [_run(dataset, run_cfg, seeds, f"k={k}", variant=variant, num_av_blocks=k) for k in ks]


def run_ablation_sampling(run_cfg: RunConfig, dataset, seeds, strategies=("uniform", "random_segment"),
                          variant: str = "video_only") -> list[dict]:
    rows = []
    for strategy in strategies:
        cfg = dataclasses.replace(run_cfg, train=dataclasses.replace(run_cfg.train, sampling=strategy))
        rows.append(_run(dataset, cfg, seeds, strategy, variant=variant))
    return rows


COLUMNS = ("label", "seeds", "r1", "r1_mean", "r1_min", "r1_max", "r5_mean", "mnr_mean")


def write_table_csv(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COLUMNS)
        for r in rows:
            writer.writerow([" ".join(map(str, r[c])) if isinstance(r[c], list) else r[c] for c in COLUMNS])
    return path
