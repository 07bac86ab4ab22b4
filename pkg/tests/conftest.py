import pytest
import torch

from bgdiff.core import BackgroundDiffusion, DenoiserConfig
from bgdiff.data import SynthConfig, synthesize_corpus

torch.set_num_threads(1)

SMALL = dict(base_channels=16, channel_mults=(1, 2), attention_resolutions=(8,), prompt_dim=16, num_heads=2)


@pytest.fixture
def small_config():
    return DenoiserConfig(image_size=16, **SMALL)


@pytest.fixture
def small_model(small_config):
    torch.manual_seed(0)
    return BackgroundDiffusion(small_config, ["laptop", "rice_cooker", "refrigerator"])


def randomize_zero_convs(branch, scale=0.1, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for conv in branch.zero_convs:
            for p in conv.parameters():
                p.copy_(torch.randn(p.shape, generator=g) * scale)
        for p in branch.hint[-1].parameters():
            p.copy_(torch.randn(p.shape, generator=g) * scale)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return synthesize_corpus(SynthConfig(num_categories=3, records_per_category=24, image_size=16, seed=3), out)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = {}


def record_acceptance(number: int, title: str, passed: bool, detail: str):
    ACCEPTANCE_LINES[number] = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
