import contextlib
import time

import pytest
import torch

from talon.config import ModelConfig
from talon.series import RegimeSpec, SynthSpec, synth_generate

torch.set_num_threads(1)

ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


@contextlib.contextmanager
def criterion(number: int, budget_s: float):
    """Record a pass/fail line for an acceptance criterion, including its time budget."""
    info: dict = {}
    start = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        detail = ", ".join(f"{k}={v}" for k, v in info.items())
        message = f"{type(exc).__name__}: {exc}".splitlines()[0]
        ACCEPTANCE_RESULTS.append((number, False, f"{elapsed:.1f}s {detail}; {message}"))
        raise
    elapsed = time.perf_counter() - start
    ok = elapsed < budget_s
    detail = ", ".join(f"{k}={v}" for k, v in info.items())
    ACCEPTANCE_RESULTS.append((number, ok, f"{elapsed:.1f}s (budget {budget_s:g}s) {detail}"))
    assert ok, f"criterion {number} exceeded its {budget_s}s budget ({elapsed:.1f}s)"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def small_config():
    return ModelConfig(L=48, S=16, period=8, d=16, n_layers=1, n_heads=2, max_positions=16, epochs=1, batch=8, seed=42)


@pytest.fixture(scope="session")
def regime_series():
    spec = SynthSpec(
        [RegimeSpec("linear-trend", 64), RegimeSpec("sinusoid", 64, {"period": 8.0}), RegimeSpec("ar1", 64)],
        length=600,
        channels=2,
    )
    return synth_generate(spec, seed=3)
