import numpy as np
import pytest

from clearct import tensor as T

# criterion id -> (passed, detail); filled by test_acceptance, printed at the end of the run
ACCEPTANCE: dict = {}


def fd_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f(x)`` computed entry by entry on a copy."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x.copy())
        flat[i] = orig - eps
        fm = f(x.copy())
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a: np.ndarray, n: np.ndarray, floor: float = 0.0) -> float:
    """Normwise relative error ``max|a-n| / max(max|a|, max|n|, floor)``; 0 when everything vanishes.

    ``floor`` keeps structurally zero gradients from dividing finite-difference
    noise by zero.
    """
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return 0.0 if scale == 0 else float(np.abs(a - n).max() / scale)


def analytic_grads(build, arrays):
    """Gradients of scalar ``build(*tensors)`` with respect to each input array."""
    T.reset_tape()
    ts = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*ts)
    T.backward(out)
    T.reset_tape()
    return [np.zeros(np.shape(a)) if t.grad is None else t.grad for t, a in zip(ts, arrays)]


def value_of(build, arrays) -> float:
    with T.no_grad():
        return build(*[T.Tensor(a) for a in arrays]).item()


def check_op_grads(build, arrays, eps: float = 1e-6) -> float:
    """Worst normwise relative error over all inputs of ``build``."""
    grads = analytic_grads(build, arrays)
    worst = 0.0
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = list(arrays)
            args[i] = x
            return value_of(build, args)
        worst = max(worst, rel_err(grads[i], fd_grad(f, a, eps)))
    return worst


@pytest.fixture(autouse=True)
def _fresh_tape():
    T.reset_tape()
    yield
    T.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
