import pytest
import torch

from semc.config import RunConfig

ACCEPTANCE_LINES = []


def tiny_config(**overrides) -> RunConfig:
    """Narrow 64 px network that runs in milliseconds."""
    cfg = RunConfig()
    cfg.backbone.input_size = 64
    cfg.backbone.stage_channels = (4, 8, 16, 32)
    cfg.backbone.blocks = (1, 1, 1, 1)
    cfg.ssfm.reduction = 4
    cfg.mcrm.embed_dim = 8
    cfg.mcrm.queue_size = 16
    cfg.model.num_classes = 3
    cfg.train.batch_size = 4
    for k, v in overrides.items():
        cfg.set(k.replace("__", "."), v)
    return cfg.validate()


def grad_toy_config(**overrides) -> RunConfig:
    """B=2, N=2, C=3, d=8 with 8-channel 4x4 deep features (128 px input)."""
    cfg = RunConfig()
    cfg.backbone.input_size = 128
    cfg.backbone.stage_channels = (1, 2, 4, 8)
    cfg.backbone.blocks = (1, 1, 1, 1)
    cfg.backbone.num_experts = 2
    cfg.ssfm.reduction = 4
    cfg.mcrm.embed_dim = 8
    cfg.mcrm.queue_size = 8
    cfg.model.num_classes = 3
    cfg.train.batch_size = 2
    for k, v in overrides.items():
        cfg.set(k.replace("__", "."), v)
    return cfg.validate()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    yield


@pytest.fixture
def record_acceptance():
    def record(criterion: str, passed: bool, detail: str = ""):
        ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'}  {criterion}  {detail}".rstrip())
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
