import numpy as np
import pytest

from pate_pp.netcore import init_dense


def numeric_grad(loss_fn, arrays, eps=1e-5):
    """Central finite differences of ``loss_fn()`` w.r.t. each array, perturbed in place."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            up = loss_fn()
            flat[k] = old - eps
            down = loss_fn()
            flat[k] = old
            gflat[k] = (up - down) / (2 * eps)
        out.append(g)
    return out


def rel_error(analytic, numeric):
    """Max abs deviation, normalised by the largest numeric gradient entry."""
    a = np.concatenate([x.ravel() for x in analytic])
    n = np.concatenate([x.ravel() for x in numeric])
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net(rng):
    return init_dense([4, 6, 5, 3], ["tanh", "leaky_relu", "identity"], rng)


_CRITERIA = {}


def record_criterion(n, ok, detail):
    _CRITERIA[n] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
