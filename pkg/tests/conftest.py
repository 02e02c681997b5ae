import numpy as np
import pytest

from sslab import autodiff as ad


def numeric_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + step
        hi = f(x)
        x[i] = orig - step
        lo = f(x)
        x[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return g


def grad_close(analytic: np.ndarray, numeric: np.ndarray, rel: float = 1e-4, abs_: float = 1e-7) -> bool:
    """Relative error below ``rel``, or absolute below ``abs_`` where both are near zero."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return bool(np.all((diff <= rel * scale) | (diff <= abs_)))


def reverse_grad(f_tensor, x: np.ndarray) -> np.ndarray:
    with ad.Tape() as tape:
        t = ad.Tensor(x, requires_grad=True)
        loss = f_tensor(t)
    return tape.backward(loss)[t.node_id]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria (criteria 6 and 7 take minutes)")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call":
                continue
            for key, detail in rep.user_properties:
                if key == "acceptance":
                    name = rep.nodeid.rsplit("::", 1)[-1]
                    lines.append((name, "PASS" if rep.passed else "FAIL", detail))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"{verdict}  {name}: {detail}")
