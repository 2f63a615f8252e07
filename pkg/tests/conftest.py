import pytest

from sfuda.config import RunConfig, to_ini


def tiny_config(**adapt) -> RunConfig:
    """A run that finishes in about a second; for plumbing tests only."""
    return RunConfig().replace(
        data={"n_source": 120, "n_target": 100},
        source={"epochs": 5},
        adapt=dict({"epochs": 3, "batch_size": 32, "k_neighbors": 5, "queue_capacity": 64}, **adapt),
    )


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(to_ini(tiny_config()))
    return path


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
