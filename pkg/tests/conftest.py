import numpy as np
import pytest

from meft.adapter import AdapterWeights, BaseFfn


def random_layer(rng, d, n, r, activation="silu", scale=1.0):
    base = BaseFfn(rng.standard_normal((d, n)) * scale, rng.standard_normal((n, d)) * scale, activation)
    adapter = AdapterWeights(rng.standard_normal((d, r)) * scale, rng.standard_normal((r, d)) * scale)
    return base, adapter


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one line each; the lines are repeated in the
# terminal summary so they survive output capture
ACCEPTANCE_LINES: list[str] = []


def acceptance(cid: str, name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {cid} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)
