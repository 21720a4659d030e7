from __future__ import annotations

import pytest
import torch

from uniflow.config import RunConfig

ACCEPTANCE_LINES: list[str] = []


def tiny_config(**overrides) -> RunConfig:
    base = dict(
        image_size=8,
        patch_size=2,
        encoder_layers=2,
        hidden_dim=8,
        num_heads=2,
        mlp_ratio=2,
        latent_dim=4,
        gtb_depth=1,
        flow_head_depth=1,
        flow_head_width=16,
        batch_size=4,
        epochs=1,
        synthetic_size=16,
        synthetic_eval_size=8,
        checkpoint_every=5,
        log_flush_every=5,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return tiny_config()


@pytest.fixture
def torch_seed():
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(1234)
        yield


@pytest.fixture(scope="session")
def acceptance_report():
    def record(criterion: int, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {criterion:>2}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
