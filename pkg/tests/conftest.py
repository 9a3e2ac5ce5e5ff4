import pytest

from pathfusion.scene import SceneConfig, build_scene, generate_routes
from pathfusion.sensors import generate_dataset


@pytest.fixture(scope="session")
def scene():
    return build_scene(SceneConfig())


@pytest.fixture(scope="session")
def routes(scene):
    return generate_routes(scene, 4)


@pytest.fixture(scope="session")
def small_dataset(scene, routes):
    """40 samples with every modality at default resolution."""
    return generate_dataset(scene, routes, n_samples=40, gps_window=8, seed=3, config_digest=SceneConfig().digest())


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the end-of-run acceptance summary."""

    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
