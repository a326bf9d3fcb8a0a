import numpy as np
import pytest

from illumest import synth

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def record_criterion():
    """Record one acceptance line; the summary prints at the end of the run."""

    def record(name: str, passed: bool, detail: str) -> None:
        _ACCEPTANCE.append((name, passed, detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def gray_scene():
    spec = synth.SceneSpec(width=64, height=64, gray_fraction=1.0,
                           illuminant=(0.8, 1.0, 0.6), texture_amplitude=0.2, seed=3)
    return synth.render(spec)


@pytest.fixture
def mixed_scene():
    spec = synth.SceneSpec(width=96, height=96, gray_fraction=0.3,
                           albedo_palette=((0.7, 0.3, 0.2), (0.2, 0.5, 0.7), (0.4, 0.6, 0.2)),
                           illuminant=(0.9, 1.0, 0.7), seed=11)
    return synth.render(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
