import numpy as np
import pytest

from skinn import autodiff as ad


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def tape_grad(f, x):
    """Value and autodiff gradient of ``f`` (a function of one Var)."""
    tape = ad.Tape()
    xv = tape.lift(np.asarray(x, dtype=float))
    out = f(xv)
    if np.ndim(ad.value(out)):
        out = ad.vsum(out)
    (g,) = ad.grad(out, [xv])
    return float(ad.value(out)), np.asarray(g, dtype=float)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def check(number: int, title: str, ok: bool, detail: str = ""):
        lines.append((number, f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}  {detail}".rstrip()))
        assert ok, f"criterion {number} failed: {detail}"

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
