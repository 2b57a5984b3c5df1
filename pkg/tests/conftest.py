import pytest

from whorlpose.synthgen import generate_batch, read_truth, truth_path

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion, then assert."""

    def record(name: str, ok: bool, detail: str = ""):
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """Three small synthetic trees with ground truth, shared across tests."""
    d = tmp_path_factory.mktemp("synth")
    paths = generate_batch(d, 3, seed0=100, point_density_pts_per_m=300.0)
    return d, paths, {p.stem: read_truth(truth_path(d, p.stem)) for p in paths}
