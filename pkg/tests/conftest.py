import numpy as np
import pytest

from fata import tensor as T


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


def numeric_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture
def record():
    """Log one acceptance verdict; printed now and again in the terminal summary."""
    def _record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE.append((number, passed, detail))
        print(f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}", flush=True)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
