import numpy as np
import pytest

from label2label import tensor as T


def numeric_grad(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (modified in place)."""
    flat = arr.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(arr.shape)


def max_rel_err(ad, fd):
    ad, fd = np.asarray(ad), np.asarray(fd)
    return float(np.max(np.abs(ad - fd) / np.maximum(1.0, np.abs(fd))))


def autodiff_vs_fd(build, tensors, h=1e-5):
    """Worst relative error of autodiff against central differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    loss = build()
    T.backward(loss)
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def value():
        with T.no_grad():
            return build().item()

    worst = 0.0
    for t, g in zip(tensors, grads):
        worst = max(worst, max_rel_err(g, numeric_grad(value, t.data, h)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
