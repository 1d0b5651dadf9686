"""Contrastive objective, grouped Adam, the training loop and checkpoint files."""

from __future__ import annotations

import dataclasses
import json
import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import ModelConfig, TrainConfig
from .embeddings import sample_frames
from .harness.metrics import rank_metrics
from .model import AudioVisualModel, encode_texts, encode_videos, init_model
from .numerics import NonFiniteError, ShapeError, Tape, Tensor
from .params import load_state_dict

log = logging.getLogger(__name__)

MAX_LOGIT_SCALE = 100.0
CHECKPOINT_FORMAT = "avclip-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}; step aborted")
        self.name = name


class TrainingDiverged(RuntimeError):
    pass


def similarity_matrix(f_batch: Tensor, g_batch: Tensor) -> Tensor:
    """Cosine similarity ``M[i, j] = cos(f_i, g_j)`` between video and text rows."""
    if f_batch.shape != g_batch.shape or f_batch.ndim != 2:
        raise ShapeError(f"video {f_batch.shape} and text {g_batch.shape} batches must be (B, d)")
    fn, f_bad = nx.l2_normalize(f_batch, return_mask=True)
    gn, g_bad = nx.l2_normalize(g_batch, return_mask=True)
    if f_bad.any() or g_bad.any():
        warnings.warn(f"zero-norm embeddings: video rows {np.flatnonzero(f_bad).tolist()}, "
                      f"text rows {np.flatnonzero(g_bad).tolist()}", RuntimeWarning, stacklevel=2)
    return nx.matmul(fn, nx.swap_last(gn))


def contrastive_loss(sim: Tensor, logit_scale: Tensor) -> Tensor:
    """Mean of the video-to-text and text-to-video cross-entropies with diagonal targets.

    The temperature is ``exp(logit_scale)`` capped at 100.
    """
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {sim.shape}")
    b = sim.shape[0]
    scale = nx.clamp_max(nx.exp(logit_scale), MAX_LOGIT_SCALE)
    logits = sim * scale
    diag = (np.arange(b), np.arange(b))
    rows = nx.log_softmax(logits, axis=1)[diag]
    cols = nx.log_softmax(logits, axis=0)[diag]
    return nx.scale((rows + cols).sum(), -0.5 / b)


# --------------------------------------------------------------------------
# parameter groups and Adam

_SLOW = re.compile(r"^(text\.|backbone\.blocks\.\d+\.spatial\.)")


def param_groups(model: AudioVisualModel, cfg: TrainConfig) -> list[dict]:
    """Split parameters into the slow group (text tower and spatial attention) and the rest."""
    slow, new = [], []
    for name, t in model.named_parameters():
        (slow if _SLOW.match(name) else new).append((name, t))
    groups = [
        {"name": "slow", "params": slow, "lr": cfg.lr_slow, "weight_decay": cfg.weight_decay},
        {"name": "new", "params": new, "lr": cfg.lr_new, "weight_decay": 0.0},
    ]
    audit_groups(model, groups)
    return groups


def audit_groups(model: AudioVisualModel, groups: list[dict]):
    """Every parameter must belong to exactly one group."""
    seen: dict[int, str] = {}
    for g in groups:
        for name, t in g["params"]:
            if id(t) in seen:
                raise ValueError(f"parameter {name} appears in groups {seen[id(t)]} and {g['name']}")
            seen[id(t)] = g["name"]
    missing = [name for name, t in model.named_parameters() if id(t) not in seen]
    if missing:
        raise ValueError(f"parameters without a group: {missing}")


class Adam:
    """Bias-corrected Adam with per-group learning rate and decoupled weight decay."""

    def __init__(self, groups: list[dict], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = groups
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for g in groups for name, t in g["params"]}
        self.v = {name: np.zeros_like(t.data) for g in groups for name, t in g["params"]}

    def step(self):
        grads = {}
        for g in self.groups:
            for name, t in g["params"]:
                grad = np.zeros_like(t.data) if t.grad is None else t.grad
                if grad.shape != t.shape:
                    raise ShapeError(f"gradient for {name} has shape {grad.shape}, parameter {t.shape}")
                if not np.isfinite(grad).all():
                    raise NonFiniteGradient(name)
                grads[name] = grad
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        for g in self.groups:
            lr, wd = g["lr"], g["weight_decay"]
            for name, t in g["params"]:
                grad = grads[name]
                m = self.m[name] = b1 * self.m[name] + (1 - b1) * grad
                v = self.v[name] = b2 * self.v[name] + (1 - b2) * grad * grad
                if wd:
                    t.data = t.data - lr * wd * t.data
                t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for g in self.groups:
            for _, t in g["params"]:
                t.grad = None


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: AudioVisualModel
    curve: list = field(default_factory=list)  # (step, loss, lr_slow, lr_new)
    evals: list = field(default_factory=list)  # (step, RetrievalResult)


def _streams(seed: int):
    init, batches, frames = np.random.SeedSequence(seed).spawn(3)
    return (int(init.generate_state(1)[0]), np.random.default_rng(batches),
            np.random.default_rng(frames))


def gather_batch(dataset, idx, num_frames: int, strategy: str, rng=None):
    """Frames ``(B, T, H, W, 3)``, spectrograms ``(B, T, M, C)`` and tokens for clip indices."""
    total = dataset.frames.shape[1]
    if strategy == "uniform":
        fidx = np.broadcast_to(sample_frames(total, num_frames, "uniform"), (len(idx), num_frames))
    else:
        fidx = np.stack([sample_frames(total, num_frames, strategy, rng) for _ in idx])
    rows = np.asarray(idx)[:, None]
    return dataset.frames[rows, fidx], dataset.spects[rows, fidx], dataset.tokens[idx]


def embed_split(model: AudioVisualModel, dataset, idx, batch_size: int = 64, variants=None):
    """Video and text embeddings for a split, evaluated without a tape."""
    fs, gs = [], []
    with nx.no_grad():
        for lo in range(0, len(idx), batch_size):
            chunk = idx[lo:lo + batch_size]
            frames, spects, tokens = gather_batch(dataset, chunk, model.cfg.frames, "uniform")
            fs.append(encode_videos(model, frames, spects, variants=variants).data)
            gs.append(encode_texts(model, tokens).data)
    return np.concatenate(fs), np.concatenate(gs)


def evaluate(model: AudioVisualModel, dataset, idx=None, variants=None):
    """Text-to-video retrieval over ``idx`` (the validation split by default)."""
    idx = dataset.val_idx if idx is None else np.asarray(idx)
    f, g = embed_split(model, dataset, idx, variants=variants)
    with nx.no_grad():
        sim = similarity_matrix(Tensor(g), Tensor(f)).data
    return rank_metrics(sim)


def batch_loss(model: AudioVisualModel, frames, spects, tokens) -> Tensor:
    f = encode_videos(model, frames, spects)
    g = encode_texts(model, tokens)
    return contrastive_loss(similarity_matrix(f, g), model.logit_scale)


def train(dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int = 0,
          model: AudioVisualModel | None = None) -> TrainResult:
    """Deterministic contrastive training on ``dataset.train_idx``.

    Validation metrics are recorded every ``eval_every`` steps and after the last step.
    """
    train_cfg.validate()
    init_seed, batch_rng, frame_rng = _streams(seed)
    if model is None:
        model = init_model(model_cfg, seed=init_seed, logit_scale_init=train_cfg.logit_scale_init)
    groups = param_groups(model, train_cfg)
    opt = Adam(groups, betas=(train_cfg.beta1, train_cfg.beta2), eps=train_cfg.eps)
    result = TrainResult(model)

    train_idx = np.asarray(dataset.train_idx)
    bs = min(train_cfg.batch_size, len(train_idx))
    order, cursor = batch_rng.permutation(train_idx), 0
    for step in range(1, train_cfg.steps + 1):
        if cursor + bs > len(order):
            order, cursor = batch_rng.permutation(train_idx), 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        frames, spects, tokens = gather_batch(dataset, idx, model_cfg.frames, train_cfg.sampling, frame_rng)
        try:
            with Tape() as tape:
                loss = batch_loss(model, frames, spects, tokens)
                tape.backward(loss)
            opt.step()
        except (NonFiniteError, NonFiniteGradient) as err:
            raise TrainingDiverged(f"step {step}: {err}; clips {idx.tolist()}") from err
        opt.zero_grad()
        result.curve.append((step, loss.item(), train_cfg.lr_slow, train_cfg.lr_new))
        if train_cfg.eval_every and (step % train_cfg.eval_every == 0 or step == train_cfg.steps):
            res = evaluate(model, dataset)
            result.evals.append((step, res))
            log.info("step %d loss %.4f val R@1 %.1f MnR %.2f", step, loss.item(), res.r1, res.mnr)
    return result


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: AudioVisualModel, extra: dict | None = None):
    cfg = dataclasses.asdict(model.cfg)
    cfg["audio_pool"] = list(cfg["audio_pool"])
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "model": cfg,
            "shapes": {name: list(t.shape) for name, t in model.named_parameters()}}
    if extra:
        meta.update(extra)
    arrays = {f"param/{name}": t.data for name, t in model.named_parameters()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path) -> tuple[AudioVisualModel, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} avclip checkpoint")
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    mcfg = dict(meta["model"])
    mcfg["audio_pool"] = tuple(mcfg["audio_pool"])
    model = init_model(ModelConfig(**mcfg))
    load_state_dict(model, state)
    return model, meta


def write_curve_csv(path, curve):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("step,loss,lr_slow,lr_new\n")
        for step, loss, lr_slow, lr_new in curve:
            fh.write(f"{step},{loss:.10g},{lr_slow:g},{lr_new:g}\n")
    return path
