import numpy as np
import pytest

from abl_lab import nn


def numeric_grad(f, params, h=1e-5, coords=None):
    """Central differences of scalar ``f(params)`` at the given coordinates.

    ``coords`` is a list of ``(param_index, flat_index)``; all coordinates
    when omitted.
    """
    if coords is None:
        coords = [(k, j) for k, p in enumerate(params) for j in range(p.size)]
    out = np.empty(len(coords))
    for c, (k, j) in enumerate(coords):
        flat = params[k].reshape(-1)
        old = flat[j]
        flat[j] = old + h
        up = f(params)
        flat[j] = old - h
        down = f(params)
        flat[j] = old
        out[c] = (up - down) / (2 * h)
    return out


def flatten_grads(grads, coords):
    arrays = []
    for gw, gb in grads:
        arrays.extend([gw, gb])
    return np.array([arrays[k].reshape(-1)[j] for k, j in coords])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net():
    return nn.init_network([6, 5, 4], seed=3)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, with its measured detail."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance" not in rep.nodeid or rep.when != "call":
                continue
            props = dict(rep.user_properties)
            if "criterion" in props:
                lines.append((props["criterion"], outcome.upper()[:4], props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for num, status, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {num:2d}: {status}  {detail}")
