import numpy as np
import pytest

from relight import tensor as T


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


def rand(shape, seed, low=-1.0, high=1.0):
    return T.randu(shape, seed, low, high)


def naive_conv(x, w, b, stride, pad):
    """Direct loop cross-correlation with zero padding."""
    N, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, o, i, j] = (patch * w[o]).sum() + (0 if b is None else b.reshape(-1)[o])
    return out


# acceptance criteria report one line each; printed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
