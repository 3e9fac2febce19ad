"""The learning-compression (LC) loop and the direct-compression baselines.

The constrained problem ``min L(w) s.t. w = Delta(theta)`` is solved by
following the quadratic-penalty / augmented-Lagrangian path over an
increasing sequence ``mu_k = a**k * mu0``. Each outer iteration runs one
L step (loss plus a quadratic pull towards ``Delta(theta) + lambda/mu``)
and one C step (projection of ``w - lambda/mu`` on the feasible set).
"""

import math
import time
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from .compression import LOW_RANK, PRUNE, CompressionScheme, decompress, delta_values, project, project_values
from .errors import ConfigError, NumericError
from .model import (
    LEAST_SQUARES,
    WeightVector,
    lipschitz_bound,
    loss_and_grad,
    loss_eval,
    minibatch_grad,
    restricted_lstsq,
)
from .schedules import LearnRateSchedule

DEFAULT_A = 1.4
DEFAULT_MAX_OUTER = 200
DEFAULT_INNER_ITERS = 100
DEFAULT_EPOCHS = 5
STUCK_WINDOW = 3
STUCK_DC_FRACTION = 0.8


class StuckAtDCWarning(UserWarning):
    """The LC iterates collapsed onto the direct-compression solution."""


@dataclass
class LCConfig:
    """Penalty schedule and L-step settings.

    ``mu0=None`` picks ``1e-3 * L(w_ref) / (1 + ||w_ref - Delta(theta_DC)||**2)``
    (floored at 1e-8) and ``constraint_tol=None`` picks ``1e-6 * sqrt(Pm)``.
    ``lstep='auto'`` uses fixed-step gradient descent for convex losses and
    clipped-schedule SGD otherwise.
    """

    method: str = "al"
    mu0: float = None
    a: float = DEFAULT_A
    max_outer: int = DEFAULT_MAX_OUTER
    constraint_tol: float = None
    lstep: str = "auto"
    inner_iters: int = DEFAULT_INNER_ITERS
    inner_tol: float = 1e-10
    sgd_alpha: float = 1.0
    sgd_beta: float = 100.0
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = 16
    steps_per_mu: int = 1
    update_multipliers: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("qp", "al"):
            raise ConfigError(f"method must be 'qp' or 'al', got {self.method!r}")
        if self.mu0 is not None and not self.mu0 > 0:
            raise ConfigError(f"mu0 must be > 0, got {self.mu0}")
        if not self.a > 1:
            raise ConfigError(f"a must be > 1, got {self.a}")
        if self.constraint_tol is not None and not self.constraint_tol > 0:
            raise ConfigError(f"constraint_tol must be > 0, got {self.constraint_tol}")
        if self.lstep not in ("auto", "gd", "sgd"):
            raise ConfigError(f"lstep must be auto, gd or sgd, got {self.lstep!r}")
        for name in ("max_outer", "inner_iters", "epochs", "batch_size", "steps_per_mu"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not (self.sgd_alpha > 0 and self.sgd_beta > 0):
            raise ConfigError("sgd_alpha and sgd_beta must be > 0")

    def schedule(self):
        return LearnRateSchedule(self.sgd_alpha, self.sgd_beta)


@dataclass
class MetricsRecord:
    k: int
    mu: float
    loss_w: float
    loss_compressed: float
    constraint_norm: float
    lambda_norm: float
    lstep_iters_used: int
    wallclock_ms: float

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class LCState:
    w: WeightVector
    theta: object
    lam: np.ndarray
    mu: float
    k: int = 0
    history: list = field(default_factory=list)
    converged: bool = False
    warnings: list = field(default_factory=list)
    mu0: float = None
    constraint_tol: float = None


# -- objective values --------------------------------------------------------

def _residual(scheme, w, theta):
    idx = scheme.constrained_indices(w)
    shape = scheme.matrix_shape(w) if scheme.kind == LOW_RANK else None
    return w.values[idx] - delta_values(scheme, theta, idx.size, shape)


def qp_value(task, scheme, w, theta, mu):
    """Quadratic-penalty objective ``L(w) + mu/2 ||w - Delta(theta)||^2``."""
    r = _residual(scheme, w, theta)
    return loss_eval(task, w) + 0.5 * mu * float(r @ r)


def al_value(task, scheme, w, theta, lam, mu):
    """Augmented Lagrangian ``L(w) - lam^T c + mu/2 ||c||^2`` with ``c = w - Delta(theta)``."""
    r = _residual(scheme, w, theta)
    return loss_eval(task, w) - float(lam @ r) + 0.5 * mu * float(r @ r)


def al_value_shifted(task, scheme, w, theta, lam, mu):
    """Same value written as a shifted penalty: ``L + mu/2 ||c - lam/mu||^2 - ||lam||^2/(2 mu)``."""
    s = _residual(scheme, w, theta) - lam / mu
    return loss_eval(task, w) + 0.5 * mu * float(s @ s) - float(lam @ lam) / (2.0 * mu)


# -- L step ------------------------------------------------------------------

def _penalty_setup(w0, idx):
    idx = np.flatnonzero(w0.compress_mask) if idx is None else np.asarray(idx)
    return idx


def _q_and_grad(task, v, idx, target, mu):
    loss, g = loss_and_grad(task, v)
    r = v[idx] - target
    g[idx] += mu * r
    return loss + 0.5 * mu * float(r @ r), g


def l_step_fixed(task, w0, target, mu, inner_iters=DEFAULT_INNER_ITERS, *, idx=None,
                 lipschitz=None, grad_tol=0.0, free=None, trace=None):
    """Gradient descent with step ``1/(M + mu)`` on ``L(w) + mu/2 ||w[idx] - target||^2``.

    Returns ``(w, iterations)``. ``free`` (boolean mask) freezes every other
    entry. ``trace``, if a list, receives the objective before each step and
    after the last one.
    """
    idx = _penalty_setup(w0, idx)
    target = np.asarray(target, dtype=np.float64)
    M = lipschitz_bound(task) if lipschitz is None else lipschitz
    step = 1.0 / (M + mu)
    v = w0.values.copy()
    q, g = _q_and_grad(task, v, idx, target, mu)
    if free is not None:
        g[~free] = 0.0
    if trace is not None:
        trace.append(q)
    it = 0
    while it < inner_iters and not float(np.linalg.norm(g)) <= grad_tol:
        v = v - step * g
        q_new, g = _q_and_grad(task, v, idx, target, mu)
        if free is not None:
            g[~free] = 0.0
        if q_new > q + 1e-12 * abs(q) + 1e-300:
            raise NumericError(
                f"L-step objective increased from {q!r} to {q_new!r} at step {it}; "
                "the Lipschitz bound is too small", index=it
            )
        q = q_new
        it += 1
        if trace is not None:
            trace.append(q)
    return w0.copy(v), it


def l_step_sgd(task, w0, target, mu, schedule, epochs=DEFAULT_EPOCHS, batch_size=16, seed=0,
               *, idx=None, free=None):
    """Minibatch SGD on ``L(w) + mu/2 ||w[idx] - target||^2``.

    Each epoch visits the data in a fresh seeded permutation; step ``t`` uses
    ``schedule.rate(t)`` with ``t`` counted from 0 within this call. Returns
    ``(w, updates)``.
    """
    idx = _penalty_setup(w0, idx)
    target = np.asarray(target, dtype=np.float64)
    rng = np.random.default_rng(seed)
    N = task.n_points
    bs = min(int(batch_size), N)
    v = w0.values.copy()
    t = 0
    for _ in range(int(epochs)):
        order = rng.permutation(N)
        for start in range(0, N, bs):
            g = minibatch_grad(task, v, order[start:start + bs])
            g[idx] += mu * (v[idx] - target)
            if free is not None:
                g[~free] = 0.0
            v = v - schedule.rate(t) * g
            if not np.all(np.isfinite(v)):
                raise NumericError(f"SGD produced a non-finite iterate at step {t}", index=t)
            t += 1
    return w0.copy(v), t


# -- C step and multipliers --------------------------------------------------

def c_step(scheme, w, lam, mu):
    """Projection of the shifted vector ``w - lam/mu`` on the feasible set."""
    if not mu > 0:
        raise ConfigError(f"mu must be > 0, got {mu}")
    idx = scheme.constrained_indices(w)
    shape = scheme.matrix_shape(w) if scheme.kind == LOW_RANK else None
    return project_values(scheme, w.values[idx] - lam / mu, shape)


def multiplier_update(scheme, lam, w, theta, mu):
    return lam - mu * _residual(scheme, w, theta)


# -- driver ------------------------------------------------------------------

def default_mu0(loss_ref, dc_distance):
    return max(1e-3 * loss_ref / (1.0 + dc_distance ** 2), 1e-8)


def default_constraint_tol(pm):
    return 1e-6 * math.sqrt(pm)


def _resolve_lstep(task, config):
    if config.lstep != "auto":
        return config.lstep
    return "gd" if task.is_convex else "sgd"


def _stuck_at_dc(norms, at_dc, dc_distance):
    # Delta(theta) sat at the DC solution for most of the run and w jumped from
    # near the reference to near Delta(theta_DC) within the window, so the path was skipped
    if dc_distance <= 0 or len(norms) < STUCK_WINDOW:
        return False
    if not all(at_dc[-STUCK_WINDOW:]) or sum(at_dc) < STUCK_DC_FRACTION * len(at_dc):
        return False
    before = norms[-STUCK_WINDOW - 1] if len(norms) > STUCK_WINDOW else dc_distance
    return before >= 0.5 * dc_distance and norms[-1] <= 0.05 * dc_distance


def lc_run(task, scheme, config, w_ref, callback=None):
    """Run the LC algorithm from the reference weights ``w_ref``.

    Returns ``(state, w_compressed)``; ``w_compressed`` is ``Delta(theta)`` on
    the constrained entries and the final ``w`` elsewhere. Hitting
    ``max_outer`` is reported through ``state.converged``, not raised.
    ``callback(record)`` is invoked after every outer iteration.
    """
    pm = scheme.validate(w_ref)
    idx = scheme.constrained_indices(w_ref)
    shape = scheme.matrix_shape(w_ref) if scheme.kind == LOW_RANK else None
    lstep = _resolve_lstep(task, config)
    M = lipschitz_bound(task) if lstep == "gd" else None

    theta = project(scheme, w_ref)
    delta = delta_values(scheme, theta, pm, shape)
    dc_delta = delta.copy()
    dc_distance = float(np.linalg.norm(w_ref.values[idx] - dc_delta))
    mu0 = config.mu0 if config.mu0 is not None else default_mu0(loss_eval(task, w_ref), dc_distance)
    tol = config.constraint_tol if config.constraint_tol is not None else default_constraint_tol(pm)
    use_lambda = config.method == "al" and config.update_multipliers

    state = LCState(w_ref.copy(), theta, np.zeros(pm), mu0, mu0=mu0, constraint_tol=tol)
    norms, at_dc = [], []
    dc_scale = 1e-10 * max(1.0, float(np.linalg.norm(dc_delta)))
    stuck_reported = False
    w = state.w
    lam = state.lam
    for k in range(config.max_outer):
        mu = mu0 * config.a ** k
        start = time.perf_counter()
        used = 0
        for _ in range(config.steps_per_mu):
            # the completed square of the AL pulls w towards Delta(theta) + lam/mu
            target = delta + lam / mu
            if lstep == "gd":
                w, it = l_step_fixed(task, w, target, mu, config.inner_iters, idx=idx,
                                     lipschitz=M, grad_tol=config.inner_tol)
            else:
                schedule = config.schedule().clipped(mu)
                w, it = l_step_sgd(task, w, target, mu, schedule, config.epochs,
                                   config.batch_size, seed=config.seed + k, idx=idx)
            used += it
            theta = c_step(scheme, w, lam, mu)
            delta = delta_values(scheme, theta, pm, shape)
        if use_lambda:
            lam = lam - mu * (w.values[idx] - delta)
        cnorm = float(np.linalg.norm(w.values[idx] - delta))
        wc = w.copy()
        wc.values[idx] = delta
        record = MetricsRecord(
            k=k,
            mu=mu,
            loss_w=loss_eval(task, w),
            loss_compressed=loss_eval(task, wc),
            constraint_norm=cnorm,
            lambda_norm=float(np.linalg.norm(lam)),
            lstep_iters_used=used,
            wallclock_ms=(time.perf_counter() - start) * 1e3,
        )
        state.history.append(record)
        state.k = k + 1
        state.mu = mu
        state.w, state.theta, state.lam = w, theta, lam
        if callback is not None:
            callback(record)
        norms.append(cnorm)
        at_dc.append(float(np.linalg.norm(delta - dc_delta)) <= dc_scale)
        if not stuck_reported and _stuck_at_dc(norms, at_dc, dc_distance):
            msg = (f"iterates stuck at the direct-compression solution by outer iteration {k}: "
                   f"the penalty grows too quickly, lower a (now {config.a}) or mu0")
            warnings.warn(msg, StuckAtDCWarning, stacklevel=2)
            state.warnings.append(msg)
            stuck_reported = True
        if cnorm < tol:
            state.converged = True
            break
    return state, decompress(scheme, state.theta, state.w)


def dc_run(task, scheme, w_ref):
    """Direct compression: project the reference once."""
    theta = project(scheme, w_ref)
    return theta, decompress(scheme, theta, w_ref)


# -- baselines ---------------------------------------------------------------

def _resolve_solver(task, solver):
    if solver != "auto":
        if solver == "exact" and task.family != LEAST_SQUARES:
            raise ConfigError("exact retraining needs the least-squares family")
        if solver == "gd" and not task.is_convex:
            raise ConfigError("fixed-step retraining needs a convex family")
        return solver
    if task.family == LEAST_SQUARES:
        return "exact"
    return "gd" if task.is_convex else "sgd"


def _retrain(task, w_init, free, solver, budget, seed, schedule):
    if solver == "exact":
        return restricted_lstsq(task, w_init, free)
    if solver == "gd":
        return l_step_fixed(task, w_init, np.zeros(0), 0.0, budget, idx=np.zeros(0, dtype=np.int64),
                            free=free)[0]
    return l_step_sgd(task, w_init, np.zeros(0), 0.0, schedule, budget, seed=seed,
                      idx=np.zeros(0, dtype=np.int64), free=free)[0]


@dataclass
class IDCRound:
    round: int
    loss_w: float
    loss_compressed: float
    constraint_norm: float
    theta_change: float
    fingerprint: np.ndarray


@dataclass
class IDCResult:
    rounds: list
    theta: object
    w_compressed: WeightVector
    cycle_start: int = None


def idc_run(task, scheme, w_ref, rounds, lstep_budget=DEFAULT_INNER_ITERS, *, solver="auto",
            tol=1e-8, seed=0, schedule=None):
    """Iterated direct compression: retrain without penalty from Delta(theta), then re-project.

    ``cycle_start`` is the first round whose decompressed weights repeat an
    earlier round's within ``tol`` (max-abs), or None.
    """
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    solver = _resolve_solver(task, solver)
    schedule = schedule or LearnRateSchedule(1.0, 100.0)
    pm = scheme.validate(w_ref)
    idx = scheme.constrained_indices(w_ref)
    shape = scheme.matrix_shape(w_ref) if scheme.kind == LOW_RANK else None
    theta, wc = dc_run(task, scheme, w_ref)
    prints = [delta_values(scheme, theta, pm, shape)]
    free = np.ones(w_ref.size, dtype=bool)
    history = []
    cycle_start = None
    for r in range(1, rounds + 1):
        w = _retrain(task, wc, free, solver, lstep_budget, seed + r, schedule)
        theta = project(scheme, w)
        wc = decompress(scheme, theta, w)
        fp = delta_values(scheme, theta, pm, shape)
        cnorm = float(np.linalg.norm(w.values[idx] - fp))
        history.append(IDCRound(r, loss_eval(task, w), loss_eval(task, wc), cnorm,
                                float(np.linalg.norm(fp - prints[-1])), fp))
        if cycle_start is None and r > 1:
            if any(np.max(np.abs(fp - old)) <= tol for old in prints[1:]):
                cycle_start = r
        prints.append(fp)
    return IDCResult(history, theta, wc, cycle_start)


def retrain_after_prune(task, w_ref, kappa, lstep_budget=DEFAULT_INNER_ITERS, *, solver="auto",
                        seed=0, schedule=None):
    """Keep the magnitude-pruning support of ``w_ref`` and refit only the surviving weights."""
    solver = _resolve_solver(task, solver)
    scheme = CompressionScheme(PRUNE, kappa=int(kappa))
    theta, w_dc = dc_run(task, scheme, w_ref)
    idx = scheme.constrained_indices(w_ref)
    free = ~w_ref.compress_mask
    free[idx[theta.support]] = True
    w = _retrain(task, w_dc, free, solver, lstep_budget, seed, schedule or LearnRateSchedule(1.0, 100.0))
    out = w.values.copy()
    out[idx[np.setdiff1d(np.arange(idx.size), theta.support)]] = 0.0
    return w.copy(out)


# -- schedules ---------------------------------------------------------------

@dataclass
class ScheduleReport:
    robbins_monro: bool
    square_sum_bound: float
    crossover: int
    crossover_closed_form: int
    rates_match: bool
    positive: bool
    majorized: bool
    horizon: int

    @property
    def ok(self):
        return (self.robbins_monro and self.rates_match and self.positive and self.majorized
                and self.crossover == self.crossover_closed_form)


def validate_schedule(alpha, beta, clip_mu, horizon):
    """Check the clipped ``alpha/(beta+t)`` family over ``horizon`` steps.

    The Robbins-Monro property is certified for the whole family: the rates are
    positive, their sum diverges like the harmonic series and the sum of
    squares is at most ``alpha**2 * (1/beta**2 + pi**2/6)``.
    """
    if not (alpha > 0 and beta > 0 and clip_mu >= 0):
        raise ConfigError("alpha and beta must be > 0 and clip_mu >= 0")
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    sched = LearnRateSchedule(alpha, beta, clip_mu)
    t = np.arange(horizon)
    base = alpha / (beta + t)
    clipped = sched.rates(horizon)
    expected = np.minimum(base, 1.0 / clip_mu) if clip_mu > 0 else base
    closed = sched.crossover()
    crossing = np.flatnonzero(clipped != base) if clip_mu > 0 else np.array([], dtype=np.int64)
    scanned = int(crossing[-1]) + 1 if crossing.size else 0
    if scanned >= horizon:
        scanned = closed  # not observable within the horizon
    return ScheduleReport(
        robbins_monro=True,
        square_sum_bound=alpha ** 2 * (1.0 / beta ** 2 + math.pi ** 2 / 6),
        crossover=scanned,
        crossover_closed_form=closed,
        rates_match=bool(np.array_equal(clipped, expected)),
        positive=bool(np.all(clipped > 0)),
        majorized=bool(np.all(clipped <= base)),
        horizon=int(horizon),
    )
