import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avclip import plotting
from avclip.config import ModelConfig, RunConfig, TrainConfig
from avclip.costmodel import frames_sweep
from avclip.harness import ablation
from avclip.harness.metrics import rank_metrics, true_ranks
from avclip.harness.saliency import CheckpointMismatch, export_saliency, read_pgm, saliency_maps
from avclip.harness.synthetic import generate_synthetic, load_dataset, save_dataset
from avclip.model import init_model

from conftest import TINY_ARCH, randomize_gates, tiny_spec


def ranks_oracle(sim, truth):
    """Position of the true item after a stable descending sort."""
    out = []
    for i, row in enumerate(sim):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        out.append(order.index(truth[i]) + 1)
    return np.array(out)


# ---------------------------------------------------------------- synthetic data

def test_generation_is_deterministic():
    a, b = generate_synthetic(tiny_spec(seed=3)), generate_synthetic(tiny_spec(seed=3))
    for name in ("frames", "spects", "tokens", "latents"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    c = generate_synthetic(tiny_spec(seed=4))
    assert not np.array_equal(a.latents, c.latents)


def test_shapes_split_and_dtypes():
    ds = generate_synthetic(tiny_spec(num_clips=50))
    assert ds.frames.shape == (50, 4, 4, 4, 3) and ds.frames.dtype == np.float32
    assert ds.spects.shape == (50, 4, 4, 4) and ds.tokens.shape == (50, 4)
    assert ds.val_idx.tolist() == list(range(40, 50)) and ds.train_idx.tolist() == list(range(40))
    assert ds.frames.min() >= 0 and ds.frames.max() <= 1
    clip, spect, text = ds.triple(3, [0, 2])
    assert clip.frames.shape == (2, 4, 4, 3) and spect.spect.shape == (2, 4, 4)


def test_text_spells_the_latent():
    ds = generate_synthetic(tiny_spec(num_clips=200, text_len=8))
    dim = ds.spec.latent_dim
    seen = {}
    for z, toks in zip(ds.latents, ds.tokens):
        for pos, tok in enumerate(toks):
            key = (pos % dim, z[pos % dim])
            assert seen.setdefault(key, tok) == tok
    # distinct (component, level) pairs use distinct tokens
    assert len(set(seen.values())) == len(seen)


def test_all_visual_leaves_spectrograms_noise_only():
    ds = generate_synthetic(tiny_spec(rho=1.0, noise=0.05))
    assert len(ds.audio_components) == 0
    assert np.abs(ds.spects).max() < 0.05 * 7


def test_all_audio_leaves_frames_latent_free():
    ds = generate_synthetic(tiny_spec(rho=0.0, noise=0.05, num_clips=100, total_frames=8))
    assert len(ds.visual_components) == 0
    clip_means = ds.frames.mean(axis=1)
    assert np.abs(clip_means - 0.5).max() < 0.05 * 7 / np.sqrt(8)


def test_audio_component_lives_in_its_segment():
    spec = tiny_spec(rho=0.0, noise=0.0, latent_dim=2, vocab_size=8, text_len=2, total_frames=4, frames=2)
    ds = generate_synthetic(spec)
    z = ds.latents
    # component 0 sounds in frames 0-1, component 1 in frames 2-3
    for seg, comp in ((slice(0, 2), 0), (slice(2, 4), 1)):
        for level in range(spec.levels):
            rows = ds.spects[z[:, comp] == level][:, seg]
            if len(rows):
                assert np.abs(rows - rows[0, 0]).max() < 1e-6


def test_dataset_roundtrip(tmp_path):
    ds = generate_synthetic(tiny_spec())
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.spec == ds.spec
    np.testing.assert_array_equal(back.spects, ds.spects)
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    manifest["version"] = 99
    (tmp_path / "d" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "d")


# ---------------------------------------------------------------- metrics

def test_rank_hand_case():
    sim = np.array([[0.9, 0.1, 0.0, 0.2],
                    [0.8, 0.5, 0.1, 0.0],
                    [0.0, 0.1, 0.7, 0.3],
                    [0.9, 0.8, 0.7, 0.1]])
    res = rank_metrics(sim)
    assert res.ranks == [1, 2, 1, 4]
    assert (res.r1, res.r5, res.r10, res.mnr) == (50.0, 100.0, 100.0, 2.0)


def test_ties_favour_lower_gallery_index():
    assert true_ranks(np.zeros((4, 4))).tolist() == [1, 2, 3, 4]
    sim = np.array([[0.5, 0.5, 0.5], [0.5, 0.5, 0.5], [0.1, 0.9, 0.9]])
    assert true_ranks(sim).tolist() == [1, 2, 2]


def test_dominant_diagonal_and_reversed():
    g = 10
    assert rank_metrics(np.eye(g) * 5 + np.random.default_rng(0).random((g, g))).r1 == 100.0
    rev = rank_metrics(-np.eye(g))
    assert rev.ranks == [g] * g and rev.mnr == g and rev.r5 == 0.0 and rev.r10 == 100.0


@settings(max_examples=50, deadline=None)
@given(sim=arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)),
                  elements=st.sampled_from([-1.0, -0.5, 0.0, 0.25, 0.5, 1.0])),
       data=st.data())
def test_ranks_match_sort_oracle_with_ties(sim, data):
    truth = np.array(data.draw(st.lists(st.integers(0, sim.shape[1] - 1), min_size=sim.shape[0],
                                        max_size=sim.shape[0])))
    np.testing.assert_array_equal(true_ranks(sim, truth), ranks_oracle(sim, truth))


def test_monotone_transform_and_gallery_permutation():
    rng = np.random.default_rng(5)
    sim = rng.normal(size=(6, 6))
    base = rank_metrics(sim)
    assert rank_metrics(np.exp(3 * sim) + 2).ranks == base.ranks
    perm = rng.permutation(6)
    inv = np.argsort(perm)
    assert true_ranks(sim[:, perm], inv).tolist() == base.ranks


def test_rank_input_validation():
    with pytest.raises(ValueError):
        true_ranks(np.zeros((3, 3)), [0, 1])
    with pytest.raises(IndexError):
        true_ranks(np.zeros((2, 3)), [0, 3])


# ---------------------------------------------------------------- saliency

def _model_and_clip(rng):
    spec = tiny_spec()
    cfg = ModelConfig.for_dataset(spec, **TINY_ARCH)
    model = init_model(cfg)
    randomize_gates(model, rng)
    return model, rng.random((2, 4, 4, 3)), rng.random((2, 4, 4))


def test_saliency_export(tmp_path, rng):
    model, frames, spects = _model_and_clip(rng)
    res = export_saliency(model, frames, spects, tmp_path, stem="s")
    grids = res["grids"]
    assert grids.shape == (2, 2, 2) and np.all(np.isfinite(grids)) and np.abs(grids).max() <= 1
    img = read_pgm(res["paths"]["pgm"])
    assert img.shape == (2 * 8 + 2, 2 * (2 * 8 + 1) + 1)
    payload = json.loads(res["paths"]["json"].read_text())
    np.testing.assert_allclose(payload["values"], grids, atol=1e-8)
    assert res["paths"]["png"].stat().st_size > 0


def test_saliency_rejects_mismatched_clip(rng):
    model, frames, spects = _model_and_clip(rng)
    with pytest.raises(CheckpointMismatch):
        saliency_maps(model, frames[:1], spects[:1])


# ---------------------------------------------------------------- ablation tables

@pytest.fixture(scope="module")
def small_run():
    spec = tiny_spec()
    cfg = RunConfig(seed=0, data=spec, arch=dict(TINY_ARCH, layers=2),
                    train=TrainConfig(steps=3, batch_size=8))
    return cfg, generate_synthetic(spec)


def test_ablation_tables(tmp_path, small_run):
    cfg, ds = small_run
    rows = ablation.run_ablation_blocks(cfg, ds, [0, 1], ["video_only", "A2V_V2A"])
    assert [r["label"] for r in rows] == ["video_only", "A2V_V2A"]
    for r in rows:
        assert len(r["r1"]) == 2 and r["r1_min"] <= r["r1_mean"] <= r["r1_max"]
    k_rows = ablation.run_ablation_k(cfg, ds, [0])
    assert [r["label"] for r in k_rows] == ["k=0", "k=1", "k=2"]
    s_rows = ablation.run_ablation_sampling(cfg, ds, [0])
    assert [r["label"] for r in s_rows] == ["uniform", "random_segment"]
    path = ablation.write_table_csv(rows + k_rows, tmp_path / "t.csv")
    with open(path) as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 5 and table[0]["seeds"] == "0 1"
    assert plotting.ablation_bars(rows, tmp_path / "t.png").stat().st_size > 0


def test_ablation_is_reproducible(small_run):
    cfg, ds = small_run
    a = ablation.run_ablation_blocks(cfg, ds, [2], ["A2V_only"])
    b = ablation.run_ablation_blocks(cfg, ds, [2], ["A2V_only"])
    assert a == b


def test_plots_write_files(tmp_path):
    curve = [(i, 2.0 / i, 1e-7, 1e-4) for i in range(1, 6)]
    assert plotting.loss_curve(curve, tmp_path / "l.png").stat().st_size > 0
    assert plotting.cost_tradeoff(frames_sweep((4, 8)), tmp_path / "c.png").stat().st_size > 0
