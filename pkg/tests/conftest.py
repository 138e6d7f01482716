import numpy as np
import pytest
import torch

from cmcsep import data, dsp
from cmcsep.model import desk_config

TINY_STFT = dsp.DESK_STFT


def tiny_model_config(**overrides):
    base = dict(
        embed_dim=16,
        audio_hidden=16,
        video_blstm_hidden=16,
        fusion_blstm_hidden=16,
        video_height=16,
        video_width=16,
        frontend_channels=4,
        resnet_widths=(4, 8, 8, 16),
        dropout=0.5,
    )
    base.update(overrides)
    return desk_config(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture(scope="session")
def synth_cfg():
    return data.SynthConfig(n_speakers=4, duration_s=1.0, video_size=16)


@pytest.fixture(scope="session")
def synth_samples(synth_cfg):
    return data.build_dataset(synth_cfg, TINY_STFT, n_speakers=2, rng_seed=3, n_samples=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
