import numpy as np
import pytest
import torch

from groundseg.lidar_io import Box, SceneSpec, generate_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture(scope="session")
def small_scene():
    spec = SceneSpec(obstacles=(Box((10.0, 0.0), (2.0, 2.0, 2.0)), Box((-8.0, 12.0), (4.0, 1.8, 1.5))),
                     noise_sigma=0.01)
    return generate_scene(spec, seed=3)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; shown in the terminal summary."""

    def record(n: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}" + (f" | {detail}" if detail else "")
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
