import numpy as np
import pytest
import torch
from hypothesis import settings

from refcolor.backbone import ModelConfig
from refcolor.checkpoint import Checkpoint
from refcolor.datagen import generate_triples

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("default")


@pytest.fixture(scope="session")
def cfg():
    return ModelConfig()


@pytest.fixture(scope="session")
def triples():
    return generate_triples(8, 0)


def perturb_(module: torch.nn.Module, seed: int, scale: float = 0.05) -> None:
    """Add seeded noise to every parameter, standing in for training updates."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=gen) * scale)


@pytest.fixture
def stage1_checkpoint(cfg):
    """A checkpoint that looks like it completed stages 0, 1a and 1b: the U-Net output is nonzero."""
    ckpt = Checkpoint.fresh(cfg)
    perturb_(ckpt.model.unet, 1)
    perturb_(ckpt.model.sketch_encoder, 2)
    ckpt.stages = ["0", "1a", "1b"]
    ckpt.model.bg_encoder.load_state_dict(ckpt.model.unet.encoder.state_dict())
    ckpt.model.style_encoder.load_state_dict(ckpt.model.unet.encoder.state_dict())
    return ckpt


def rand_image(rng: np.random.Generator, channels: int = 3, size: int = 64) -> np.ndarray:
    return rng.uniform(0, 1, (channels, size, size)).astype(np.float32)


ACCEPTANCE_REPORT: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_REPORT.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_REPORT:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_REPORT:
            terminalreporter.write_line(line)
