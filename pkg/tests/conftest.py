import numpy as np
import pytest

from memflow.network import ModelConfig, _unroll, grad_loss, init_params, loss


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_theta(n=2, n_mem=3, widths=(5, 5), seed=0):
    cfg = ModelConfig(n=n, n_mem=n_mem, hidden_widths=widths)
    return cfg, init_params(cfg, np.random.default_rng(seed))


def random_batch(rng, n, n_mem, n_rec, B=8):
    return rng.standard_normal((B, n * (n_mem + 1))), rng.standard_normal((B, n * n_rec))


def relu_pattern(theta, x_in, n_rec):
    """All ReLU on/off flags across the unroll, flattened."""
    B = x_in.shape[0]
    hist = x_in.reshape(B, theta.n_mem + 1, theta.n)
    _, caches = _unroll(theta, hist, n_rec, keep_cache=True)
    flags = [m.ravel() for _, masks in caches for m in masks]
    return np.concatenate(flags) if flags else np.zeros(0, dtype=bool)


def finite_difference_check(theta, x_in, y_out, h=1e-6, floor=1e-4):
    """Compare the analytic gradient to central differences, component by component.

    A component is skipped when the +h and -h evaluations switch any ReLU
    (the loss is not differentiable across that interval). The relative error
    uses ``max(|g|, |fd|, floor)`` as denominator so that components near zero
    are judged on absolute error. Returns (max_rel_error, n_checked, n_skipped).
    """
    n_rec = y_out.shape[1] // theta.n
    g = grad_loss(theta, x_in, y_out).flat()
    p = theta.flat()
    worst, checked, skipped = 0.0, 0, 0
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h
        tp, tm = theta.with_flat(p + e), theta.with_flat(p - e)
        if not np.array_equal(relu_pattern(tp, x_in, n_rec), relu_pattern(tm, x_in, n_rec)):
            skipped += 1
            continue
        fd = (loss(tp, x_in, y_out) - loss(tm, x_in, y_out)) / (2 * h)
        worst = max(worst, abs(g[i] - fd) / max(abs(g[i]), abs(fd), floor))
        checked += 1
    return worst, checked, skipped


ACCEPTANCE_LINES = []


def report_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
