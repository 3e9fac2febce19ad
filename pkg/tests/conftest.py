import numpy as np
import pytest

from lccompress.model import LEAST_SQUARES, LOGISTIC, MLP, LossTask, init_weights, train_reference


def make_task(family, seed=0, N=30, D=4, noise=0.3, hidden=3, classes=3):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, D))
    if family == LEAST_SQUARES:
        y = X @ rng.standard_normal(D) + 0.5 + noise * rng.standard_normal(N)
        return LossTask(family, X, y)
    if family == LOGISTIC:
        z = X @ rng.standard_normal(D) + noise * rng.standard_normal(N)
        return LossTask(family, X, (z > 0).astype(float))
    y = rng.integers(0, classes, N)
    return LossTask(family, X, y, mlp_hidden=hidden, n_classes=classes)


def random_weights(task, seed=0, scale=1.0):
    w = init_weights(task, seed)
    rng = np.random.default_rng(seed + 1000)
    return w.copy(scale * rng.standard_normal(w.size))


def reference(task, seed=0):
    return train_reference(task, seed=seed).w


@pytest.fixture(params=[LEAST_SQUARES, LOGISTIC, MLP])
def family(request):
    return request.param


def zero_loss_task(dim):
    """Least-squares task whose loss ignores the weight layer (all inputs zero).

    With the bias held at 0 the L step reduces to the pure quadratic penalty.
    """
    return LossTask(LEAST_SQUARES, np.zeros((1, dim)), [0.0])


def exact_penalized_minimizer(task, idx, target, mu):
    """Closed-form minimizer of the least-squares loss plus mu/2 ||w[idx] - target||^2."""
    A = np.hstack([task.inputs, np.ones((task.n_points, 1))])
    H = A.T @ A
    rhs = A.T @ task.targets
    H[idx, idx] += mu
    rhs[idx] += mu * np.asarray(target)
    return np.linalg.solve(H, rhs)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES = []


def acceptance(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
