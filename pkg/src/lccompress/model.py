"""Loss tasks, weight vectors and gradients for the reference models.

Three loss families are supported, all summed (not averaged) over the
training points:

* ``least-squares``: ``0.5 * sum((X w + b - y)**2)``
* ``logistic``: binary cross-entropy with labels in {0, 1}
* ``mlp-xent``: one tanh hidden layer followed by softmax cross-entropy

An optional ``l2_reg`` adds ``0.5 * l2_reg * ||w||**2`` over every parameter.
Minibatch losses carry the fraction ``|B| / N`` of that term so that
disjoint batches add up to the full loss.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .schedules import LearnRateSchedule

LEAST_SQUARES = "least-squares"
LOGISTIC = "logistic"
MLP = "mlp-xent"
FAMILIES = (LEAST_SQUARES, LOGISTIC, MLP)
CONVEX_FAMILIES = (LEAST_SQUARES, LOGISTIC)


def _layout_size(shape):
    return int(np.prod(shape, dtype=np.int64))


@dataclass
class WeightVector:
    """Flat parameter vector with a per-layer layout and a compression mask."""

    values: np.ndarray
    layout: list
    compress_mask: np.ndarray

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64).ravel()
        self.layout = [(str(name), tuple(int(s) for s in shape)) for name, shape in self.layout]
        self.compress_mask = np.array(self.compress_mask, dtype=bool).ravel()
        total = sum(_layout_size(shape) for _, shape in self.layout)
        if total != self.values.size:
            raise ConfigError(f"layout describes {total} parameters but got {self.values.size}")
        if self.compress_mask.size != self.values.size:
            raise ConfigError("compress_mask length differs from the number of parameters")
        bad = np.flatnonzero(~np.isfinite(self.values))
        if bad.size:
            raise NumericError(f"non-finite weight at index {bad[0]}", index=int(bad[0]))

    @property
    def size(self):
        return self.values.size

    @property
    def n_masked(self):
        return int(self.compress_mask.sum())

    def copy(self, values=None):
        return WeightVector(
            self.values.copy() if values is None else values,
            list(self.layout),
            self.compress_mask.copy(),
        )

    def layer_slice(self, name):
        start = 0
        for lname, shape in self.layout:
            n = _layout_size(shape)
            if lname == name:
                return slice(start, start + n)
            start += n
        raise ConfigError(f"no layer named {name!r}")

    def layer_shape(self, name):
        for lname, shape in self.layout:
            if lname == name:
                return shape
        raise ConfigError(f"no layer named {name!r}")

    def layer(self, name):
        return self.values[self.layer_slice(name)].reshape(self.layer_shape(name))

    def masked(self):
        return self.values[self.compress_mask]

    def with_masked(self, x):
        out = self.values.copy()
        out[self.compress_mask] = x
        return self.copy(out)


@dataclass
class LossTask:
    family: str
    inputs: np.ndarray
    targets: np.ndarray
    mlp_hidden: int = None
    l2_reg: float = 0.0
    n_classes: int = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown loss family {self.family!r}; expected one of {FAMILIES}")
        X = np.asarray(self.inputs, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ConfigError(f"inputs must be a non-empty N x D array, got shape {X.shape}")
        self.inputs = X
        y = np.asarray(self.targets).ravel()
        if y.size != X.shape[0]:
            raise ConfigError(f"{X.shape[0]} inputs but {y.size} targets")
        if not self.l2_reg >= 0:
            raise ConfigError(f"l2_reg must be >= 0, got {self.l2_reg}")
        self.l2_reg = float(self.l2_reg)
        if self.family == LEAST_SQUARES:
            self.targets = y.astype(np.float64)
        elif self.family == LOGISTIC:
            y = y.astype(np.float64)
            if not np.all((y == 0) | (y == 1)):
                raise ConfigError("logistic targets must be 0 or 1")
            self.targets = y
        else:
            if self.mlp_hidden is None or int(self.mlp_hidden) < 1:
                raise ConfigError("mlp-xent needs a positive mlp_hidden")
            self.mlp_hidden = int(self.mlp_hidden)
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ConfigError("mlp-xent targets must be class indices")
            y = y.astype(np.int64)
            if self.n_classes is None:
                self.n_classes = max(int(y.max()) + 1, 2)
            self.n_classes = int(self.n_classes)
            if y.min() < 0 or y.max() >= self.n_classes:
                raise ConfigError(f"class index out of range [0, {self.n_classes})")
            self.targets = y
        bad = np.argwhere(~np.isfinite(X))
        if bad.size:
            raise ConfigError(f"non-finite input at row {bad[0][0]}")

    @property
    def n_points(self):
        return self.inputs.shape[0]

    @property
    def n_features(self):
        return self.inputs.shape[1]

    @property
    def is_convex(self):
        return self.family in CONVEX_FAMILIES

    def layout(self):
        D = self.n_features
        if self.is_convex:
            return [("weights", (1, D)), ("bias", (1,))]
        H, C = self.mlp_hidden, self.n_classes
        return [("W1", (H, D)), ("b1", (H,)), ("W2", (C, H)), ("b2", (C,))]

    def default_mask(self):
        """Weight matrices participate in the constraint, biases do not."""
        return np.concatenate([
            np.full(_layout_size(shape), len(shape) == 2) for _, shape in self.layout()
        ])

    @property
    def n_params(self):
        return sum(_layout_size(shape) for _, shape in self.layout())


@dataclass
class GradientReport:
    max_rel_err: float
    worst_index: int
    step_used: float

    def ok(self, tol=1e-5):
        return self.max_rel_err < tol


def init_weights(task, seed=0, scale=0.1, mask=None):
    """Random starting point; biases start at zero."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in task.layout():
        if len(shape) == 1:
            parts.append(np.zeros(shape[0]))
        elif task.is_convex:
            parts.append(scale * rng.standard_normal(_layout_size(shape)))
        else:
            parts.append(rng.standard_normal(_layout_size(shape)) / np.sqrt(shape[1]))
    return WeightVector(
        np.concatenate(parts), task.layout(), task.default_mask() if mask is None else mask
    )


def _check(task, w):
    values = w.values if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64)
    if values.size != task.n_params:
        raise ConfigError(
            f"{task.family} task with D={task.n_features} needs {task.n_params} "
            f"parameters, got {values.size}"
        )
    return values


def _unpack_mlp(task, v):
    D, H, C = task.n_features, task.mlp_hidden, task.n_classes
    i = 0
    W1 = v[i:i + H * D].reshape(H, D); i += H * D
    b1 = v[i:i + H]; i += H
    W2 = v[i:i + C * H].reshape(C, H); i += C * H
    b2 = v[i:i + C]
    return W1, b1, W2, b2


def _raise_nonfinite(terms, idx):
    bad = np.flatnonzero(~np.isfinite(terms))
    if bad.size:
        n = int(idx[bad[0]])
        raise NumericError(f"non-finite loss at training point {n}", index=n)


def _loss_and_grad(task, v, idx, want_grad=True):
    # overflow shows up as a non-finite term, which is reported with its index
    with np.errstate(over="ignore", invalid="ignore"):
        return _loss_and_grad_raw(task, v, idx, want_grad)


def _loss_and_grad_raw(task, v, idx, want_grad):
    X = task.inputs[idx]
    y = task.targets[idx]
    frac = len(idx) / task.n_points
    if task.is_convex:
        wv, b = v[:-1], v[-1]
        z = X @ wv + b
        if task.family == LEAST_SQUARES:
            r = z - y
            terms = 0.5 * r * r
            dz = r
        else:
            terms = np.logaddexp(0.0, z) - y * z
            dz = 0.5 * (1.0 + np.tanh(0.5 * z)) - y
        _raise_nonfinite(terms, idx)
        loss = terms.sum()
        grad = None
        if want_grad:
            grad = np.empty_like(v)
            grad[:-1] = X.T @ dz
            grad[-1] = dz.sum()
    else:
        W1, b1, W2, b2 = _unpack_mlp(task, v)
        h = np.tanh(X @ W1.T + b1)
        logits = h @ W2.T + b2
        zmax = logits.max(axis=1, keepdims=True)
        ez = np.exp(logits - zmax)
        sez = ez.sum(axis=1, keepdims=True)
        lse = np.log(sez[:, 0]) + zmax[:, 0]
        terms = lse - logits[np.arange(len(y)), y]
        _raise_nonfinite(terms, idx)
        loss = terms.sum()
        grad = None
        if want_grad:
            dlogits = ez / sez
            dlogits[np.arange(len(y)), y] -= 1.0
            dW2 = dlogits.T @ h
            db2 = dlogits.sum(axis=0)
            dpre = (dlogits @ W2) * (1.0 - h * h)
            dW1 = dpre.T @ X
            db1 = dpre.sum(axis=0)
            grad = np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])
    if task.l2_reg:
        loss = loss + frac * 0.5 * task.l2_reg * (v @ v)
        if want_grad:
            grad = grad + frac * task.l2_reg * v
    return float(loss), grad


def loss_eval(task, w):
    """Total loss summed over all training points."""
    v = _check(task, w)
    return _loss_and_grad(task, v, np.arange(task.n_points), want_grad=False)[0]


def loss_grad(task, w):
    """Exact gradient of :func:`loss_eval`."""
    v = _check(task, w)
    return _loss_and_grad(task, v, np.arange(task.n_points))[1]


def loss_and_grad(task, w):
    v = _check(task, w)
    return _loss_and_grad(task, v, np.arange(task.n_points))


def _batch_indices(task, batch):
    idx = np.asarray(batch, dtype=np.int64).ravel()
    if idx.size == 0:
        raise ConfigError("empty minibatch")
    if idx.min() < 0 or idx.max() >= task.n_points:
        raise ConfigError(f"minibatch index out of range [0, {task.n_points})")
    return idx


def minibatch_grad(task, w, batch):
    """Gradient of the partial loss over the (0-based) indices in ``batch``."""
    v = _check(task, w)
    return _loss_and_grad(task, v, _batch_indices(task, batch))[1]


def minibatch_loss(task, w, batch):
    v = _check(task, w)
    return _loss_and_grad(task, v, _batch_indices(task, batch), want_grad=False)[0]


def design_matrix(task):
    """Inputs with a trailing column of ones for the bias."""
    return np.hstack([task.inputs, np.ones((task.n_points, 1))])


def lipschitz_bound(task):
    """Upper bound on the Lipschitz constant of the loss gradient (convex families)."""
    if not task.is_convex:
        raise ConfigError(f"no Lipschitz bound for {task.family}; use the SGD L step")
    A = design_matrix(task)
    top = float(np.linalg.eigvalsh(A.T @ A)[-1])
    if task.family == LOGISTIC:
        top *= 0.25
    return top + task.l2_reg


def grad_check(task, w, grad_fn=None, rel_tol=1e-5, abs_tol=1e-8):
    """Compare an analytic gradient against central differences.

    The relative error of coordinate ``i`` is ``|g_i - fd_i| / max(|g_i|, |fd_i|, abs_tol/rel_tol)``,
    so coordinates whose absolute error is below ``abs_tol`` always pass.
    """
    v = _check(task, w).copy()
    g = loss_grad(task, v) if grad_fn is None else np.asarray(grad_fn(task, v), dtype=np.float64)
    steps = 1e-6 * (1.0 + np.abs(v))
    fd = np.empty_like(v)
    for i in range(v.size):
        old = v[i]
        v[i] = old + steps[i]
        fp = loss_eval(task, v)
        v[i] = old - steps[i]
        fm = loss_eval(task, v)
        v[i] = old
        fd[i] = (fp - fm) / (2.0 * steps[i])
    floor = abs_tol / rel_tol
    err = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)
    worst = int(np.argmax(err))
    return GradientReport(float(err[worst]), worst, float(steps[worst]))


@dataclass
class TrainResult:
    w: WeightVector
    iterations: int
    loss: float
    grad_norm: float
    converged: bool
    history: list = field(default_factory=list)


def train_reference(
    task,
    w0=None,
    *,
    seed=0,
    max_iter=20000,
    grad_tol=1e-8,
    schedule=None,
    batch_size=None,
    max_epochs=500,
    log_every=100,
):
    """Fit the uncompressed reference model.

    Convex families use full-batch gradient descent with step ``1/M``;
    ``mlp-xent`` uses SGD over shuffled minibatches with ``schedule``.
    ``history`` holds ``(iteration, loss, grad_norm)`` tuples.
    """
    w = init_weights(task, seed) if w0 is None else w0.copy()
    v = w.values
    history = []
    if task.is_convex and schedule is None:
        step = 1.0 / lipschitz_bound(task)
        it = 0
        while True:
            loss, g = loss_and_grad(task, v)
            gnorm = float(np.linalg.norm(g))
            if it % log_every == 0 or gnorm < grad_tol or it == max_iter:
                history.append((it, loss, gnorm))
            if gnorm < grad_tol or it == max_iter:
                break
            v = v - step * g
            it += 1
        return TrainResult(w.copy(v), it, loss, gnorm, gnorm < grad_tol, history)

    if schedule is None:
        schedule = LearnRateSchedule(alpha=1.0, beta=100.0)
    bs = min(batch_size or 16, task.n_points)
    rng = np.random.default_rng(seed)
    t = 0
    loss, g = loss_and_grad(task, v)
    gnorm = float(np.linalg.norm(g))
    history.append((0, loss, gnorm))
    epoch = 0
    while gnorm >= grad_tol and epoch < max_epochs:
        order = rng.permutation(task.n_points)
        for start in range(0, task.n_points, bs):
            gb = minibatch_grad(task, v, order[start:start + bs])
            v = v - schedule.rate(t) * gb
            t += 1
        bad = np.flatnonzero(~np.isfinite(v))
        if bad.size:
            raise NumericError(f"SGD diverged at step {t}", index=int(bad[0]))
        epoch += 1
        loss, g = loss_and_grad(task, v)
        gnorm = float(np.linalg.norm(g))
        if epoch % max(1, log_every // 10) == 0 or gnorm < grad_tol or epoch == max_epochs:
            history.append((epoch, loss, gnorm))
    return TrainResult(w.copy(v), epoch, loss, gnorm, gnorm < grad_tol, history)


def restricted_lstsq(task, w, free):
    """Exactly minimize a least-squares loss over the entries ``free``; others stay fixed.

    Singular restricted systems get the minimum-norm solution.
    """
    if task.family != LEAST_SQUARES:
        raise ConfigError("exact restricted solves need the least-squares family")
    v = _check(task, w).astype(np.float64).copy()
    free = np.asarray(free)
    if free.dtype != bool:
        free = np.isin(np.arange(v.size), free.astype(np.int64))
    A = design_matrix(task)
    fixed = ~free
    rhs = task.targets - A[:, fixed] @ v[fixed]
    Af = A[:, free]
    if task.l2_reg:
        k = int(free.sum())
        Af = np.vstack([Af, np.sqrt(task.l2_reg) * np.eye(k)])
        rhs = np.concatenate([rhs, np.zeros(k)])
    sol = np.linalg.lstsq(Af, rhs, rcond=None)[0]
    v[free] = sol
    return w.copy(v) if isinstance(w, WeightVector) else v
