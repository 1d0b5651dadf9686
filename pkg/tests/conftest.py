import numpy as np
import pytest

from avclip.config import ModelConfig, SyntheticDatasetSpec

ACCEPTANCE_LINES = []


def tiny_config(**kw) -> ModelConfig:
    """T=2 frames, N=3 patches, d=8, h=2, F=2."""
    base = dict(d=8, heads=2, layers=2, patch=2, height=2, width=6, frames=2, spect_m=4,
                spect_c=4, audio_hidden=6, audio_pool=(2, 2), vocab_size=12, max_text_tokens=8,
                text_layers=1)
    base.update(kw)
    return ModelConfig(**base).validate()


def tiny_spec(**kw) -> SyntheticDatasetSpec:
    base = dict(num_clips=40, total_frames=4, frames=2, height=4, width=4, patch=2, spect_m=4,
                spect_c=4, vocab_size=12, text_len=4, latent_dim=4, rho=0.5)
    base.update(kw)
    return SyntheticDatasetSpec(**base).validate()


TINY_ARCH = dict(d=8, heads=2, layers=1, audio_hidden=6, audio_pool=(2, 2), max_text_tokens=8,
                 text_layers=1)


def randomize_gates(model, rng, std=0.3):
    for block in model.backbone.blocks:
        for cross in (block.a2v, block.v2a):
            if cross is not None:
                cross.gate.w.data = rng.normal(0, std, cross.gate.w.shape)
                cross.gate.b.data = rng.normal(0, std, cross.gate.b.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
