import numpy as np
import pytest

from irformer.core.tensor import Tensor


def numeric_grad(f, arrays, index, h=1e-5):
    """Central finite differences of scalar f(*arrays) w.r.t. arrays[index]."""
    base = [a.copy() for a in arrays]
    x = base[index]
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(*base)
        flat[i] = old - h
        down = f(*base)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    """
    Elementwise |a - n| / max(|a|, |n|, floor), floor = 1e-3 * max|n|, so
    entries that are tiny compared with the gradient's scale do not blow up
    the ratio through finite-difference round-off.
    """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max())
    if scale == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3 * scale)
    return float((np.abs(analytic - numeric) / denom).max())


def gradcheck(op, arrays, h=1e-5, seed=0):
    """
    Max relative error between backward() and finite differences for every
    input of ``op`` (a function of Tensors returning a Tensor).  The output is
    contracted with a fixed random weight so every element participates.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = op(*[Tensor(a) for a in arrays])
    weight = np.random.default_rng(seed).uniform(0.5, 1.5, probe.shape)

    def scalar(*arrs):
        return float((op(*[Tensor(a) for a in arrs]).data * weight).sum())

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    (out * Tensor(weight)).sum().backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        num = numeric_grad(scalar, arrays, i, h)
        worst = max(worst, relative_error(t.grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}")
