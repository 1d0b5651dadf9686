"""Command line entry point: ``avclip <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import costmodel, plotting
from .config import RunConfig, load_run_config
from .embeddings import sample_frames
from .harness import ablation
from .harness.saliency import export_saliency
from .harness.synthetic import generate_synthetic, load_dataset, save_dataset
from .training import evaluate, load_checkpoint, save_checkpoint, train, write_curve_csv

log = logging.getLogger("avclip")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _run_config(args) -> RunConfig:
    return load_run_config(args.config) if args.config else RunConfig()


def _dataset(args, cfg: RunConfig):
    if getattr(args, "data", None):
        ds = load_dataset(args.data)
        if dataclasses.replace(ds.spec, seed=cfg.seed) != cfg.data:
            raise SystemExit(f"dataset in {args.data} was generated from a different [data] config")
        return ds
    return generate_synthetic(cfg.data)


def cmd_config(args):
    print(_dump(RunConfig().to_dict()))


def cmd_generate(args):
    cfg = _run_config(args)
    ds = generate_synthetic(cfg.data)
    out = save_dataset(ds, args.out)
    print(f"wrote {len(ds)} clips ({len(ds.train_idx)} train / {len(ds.val_idx)} val) to {out}")


def cmd_train(args):
    cfg = _run_config(args)
    ds = _dataset(args, cfg)
    out = Path(args.out)
    result = train(ds, cfg.model, cfg.train, seed=cfg.seed)
    ckpt = save_checkpoint(out / "checkpoint.npz", result.model, {"run_config": cfg.to_dict()})
    write_curve_csv(out / "loss.csv", result.curve)
    (out / "config.json").write_text(_dump(cfg.to_dict()))
    evals = [{"step": s, **r.as_dict(with_ranks=False)} for s, r in result.evals]
    (out / "val_metrics.json").write_text(_dump(evals))
    if result.curve:
        plotting.loss_curve(result.curve, out / "loss.png", result.evals)
    print(f"checkpoint: {ckpt}")
    if evals:
        print(_dump(evals[-1]))


def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    idx = {"val": ds.val_idx, "train": ds.train_idx, "all": np.arange(len(ds))}[args.split]
    res = evaluate(model, ds, idx)
    text = _dump(res.as_dict(with_ranks=not args.no_ranks))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_ablate(args):
    cfg = _run_config(args)
    ds = _dataset(args, cfg)
    seeds = args.seeds or [cfg.seed, cfg.seed + 1, cfg.seed + 2]
    if args.sweep == "blocks":
        rows = ablation.run_ablation_blocks(cfg, ds, seeds, args.variants or ablation.BLOCK_VARIANTS)
    elif args.sweep == "k":
        rows = ablation.run_ablation_k(cfg, ds, seeds, args.ks)
    else:
        rows = ablation.run_ablation_sampling(cfg, ds, seeds)
    out = Path(args.out)
    csv_path = ablation.write_table_csv(rows, out / f"ablation_{args.sweep}.csv")
    plotting.ablation_bars(rows, out / f"ablation_{args.sweep}.png", title=f"{args.sweep} sweep")
    print(csv_path.read_text(), end="")


def cmd_cost(args):
    overrides = {k: v for k, v in (("d", args.d), ("heads", args.heads), ("layers", args.layers),
                                   ("num_av_blocks", args.k)) if v is not None}
    if args.no_text:
        overrides["include_text"] = False
    if args.audio_macs is not None:
        overrides["audio_macs"] = args.audio_macs
    a = costmodel.vit_b32_geometry(args.variant, args.frames, **overrides)
    report = costmodel.count_flops(a)
    payload = {"report": report.as_dict()}
    text = report.table()
    if args.compare_frames:
        b = costmodel.vit_b32_geometry(args.compare_variant, args.compare_frames, **overrides)
        rb = costmodel.count_flops(b)
        payload["compare"] = costmodel.compare(report, rb)
        payload["compare_report"] = rb.as_dict()
        text += "\n\n" + rb.table()
        c = payload["compare"]
        text += (f"\n\n{args.variant}@{args.frames}: {c['a_total_gflops']:.1f} GFLOPs, "
                 f"{args.compare_variant}@{args.compare_frames}: {c['b_total_gflops']:.1f} GFLOPs, "
                 f"ratio {c['flops_b_over_a']:.3f}; memory ratio {c['memory_b_over_a']:.3f}")
    print(_dump(payload))
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cost.json").write_text(_dump(payload) + "\n")
        (out / "cost.txt").write_text(text + "\n")
        rows = costmodel.frames_sweep(**overrides)
        with open(out / "frames_sweep.csv", "w") as fh:
            fh.write(",".join(rows[0]) + "\n")
            for r in rows:
                fh.write(",".join(f"{v:.6g}" for v in r.values()) + "\n")
        plotting.cost_tradeoff(rows, out / "frames_sweep.png")


def cmd_saliency(args):
    model, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    fidx = sample_frames(ds.frames.shape[1], model.cfg.frames, "uniform")
    res = export_saliency(model, ds.frames[args.clip, fidx], ds.spects[args.clip, fidx],
                          args.out, stem=f"saliency_clip{args.clip}")
    for kind, path in res["paths"].items():
        print(f"{kind}: {path}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avclip", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("config", help="print the default run config as JSON")
    s.set_defaults(func=cmd_config)

    s = sub.add_parser("generate", help="write a synthetic dataset directory")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("train", help="train and write checkpoint + loss CSV")
    s.add_argument("--config")
    s.add_argument("--data", help="dataset directory (generated from the config when omitted)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="text-to-video retrieval metrics as JSON")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("val", "train", "all"), default="val")
    s.add_argument("--no-ranks", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="variant / k / sampling sweeps to CSV")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--sweep", choices=("blocks", "k", "sampling"), default="blocks")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--variants", nargs="+", choices=ablation.BLOCK_VARIANTS)
    s.add_argument("--ks", type=int, nargs="+")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("cost", help="analytic GFLOPs / activation memory (ViT-B/32 geometry)")
    s.add_argument("--variant", default="A2V_V2A", choices=ablation.BLOCK_VARIANTS)
    s.add_argument("--frames", type=int, default=32)
    s.add_argument("--compare-variant", default="video_only", choices=ablation.BLOCK_VARIANTS)
    s.add_argument("--compare-frames", type=int, default=96, help="0 disables the comparison")
    s.add_argument("--d", type=int)
    s.add_argument("--heads", type=int)
    s.add_argument("--layers", type=int)
    s.add_argument("--k", type=int, help="number of audiovisual blocks")
    s.add_argument("--audio-macs", type=float, help="multiply-adds per spectrogram")
    s.add_argument("--no-text", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_cost)

    s = sub.add_parser("saliency", help="export audio-to-patch saliency for one clip")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--clip", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_saliency)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
