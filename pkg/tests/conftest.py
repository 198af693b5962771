import numpy as np
import pytest
import torch

from mipreid.config import ModelConfig
from mipreid.dataset import SynthSpec, generate_dataset

torch.set_num_threads(1)


def tiny_model_config():
    return ModelConfig(
        image_height=16,
        image_width=8,
        channels=3,
        patch_size=4,
        embed_dim=8,
        num_layers=2,
        num_heads=2,
        mlp_ratio=2.0,
        modality_prompt_len=2,
        instance_prompt_len=2,
        num_identities=3,
        bank_size=3,
        seed=0,
    )


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    spec = SynthSpec(num_train_ids=6, num_test_ids=4, images_per_id_per_modality=6, seed=3)
    return generate_dataset(spec)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance checks")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
