import pytest

from serverless_moe import ModelConfig

# Lines recorded by test_acceptance.py, echoed after the run.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def toy():
    return ModelConfig()


@pytest.fixture(scope="session")
def small():
    return ModelConfig(num_layers=2, embed_dim=16, ffn_dim=32, num_experts=4, num_shared=1, top_k=2)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
