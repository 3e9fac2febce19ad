import warnings

import numpy as np
import pytest

from conftest import exact_penalized_minimizer, make_task, random_weights, reference, zero_loss_task
from lccompress.compression import (
    ADAPTIVE_QUANT,
    BINARIZE,
    LOW_RANK,
    PRUNE,
    TERNARY,
    CompressionScheme,
    SignParams,
    decompress,
    delta_values,
    oracle_sign_loss,
    oracle_support_loss,
    project,
    project_values,
)
from lccompress.errors import ConfigError, NumericError
from lccompress.lc import (
    LCConfig,
    StuckAtDCWarning,
    al_value,
    al_value_shifted,
    c_step,
    dc_run,
    idc_run,
    l_step_fixed,
    l_step_sgd,
    lc_run,
    multiplier_update,
    qp_value,
    retrain_after_prune,
    validate_schedule,
)
from lccompress.model import LEAST_SQUARES, MLP, LossTask, init_weights, lipschitz_bound, loss_eval
from lccompress.schedules import ConstantSchedule, LearnRateSchedule

SIGN = CompressionScheme(BINARIZE)


def ls_instance(seed, D=8, N=50, noise=0.3):
    task = make_task(LEAST_SQUARES, seed, N=N, D=D, noise=noise)
    return task, reference(task, seed)


# -- objective values --------------------------------------------------------

def test_qp_value_at_feasible_point_is_loss():
    task, w = ls_instance(0)
    theta = project(SIGN, w)
    feasible = decompress(SIGN, theta, w)
    assert qp_value(task, SIGN, feasible, theta, 123.0) == loss_eval(task, feasible)


def test_qp_value_vanishing_mu():
    task, w = ls_instance(1)
    assert qp_value(task, SIGN, w, project(SIGN, w), 1e-300) == loss_eval(task, w)


def test_qp_value_is_quadratic_along_a_line():
    task, w = ls_instance(2)
    theta = project(SIGN, w)
    d = random_weights(task, 3)
    f = lambda t: qp_value(task, SIGN, w.copy(w.values + t * d.values), theta, 7.0)
    coef = np.polyfit([-1.0, 0.0, 1.0], [f(-1.0), f(0.0), f(1.0)], 2)
    assert np.polyval(coef, 3.0) == pytest.approx(f(3.0), rel=1e-10)


def test_al_value_with_zero_multipliers_is_qp():
    task, w = ls_instance(3)
    theta = project(SIGN, w)
    assert al_value(task, SIGN, w, theta, np.zeros(8), 2.5) == qp_value(task, SIGN, w, theta, 2.5)


def test_al_value_forms_agree():
    rng = np.random.default_rng(4)
    task, _ = ls_instance(4)
    for _ in range(100):
        w = random_weights(task, int(rng.integers(1 << 30)))
        theta = SignParams(rng.choice([-1, 1], 8))
        lam = rng.standard_normal(8) * 10 ** rng.uniform(-1, 1)
        mu = 10 ** rng.uniform(-1, 3)
        a = al_value(task, SIGN, w, theta, lam, mu)
        b = al_value_shifted(task, SIGN, w, theta, lam, mu)
        assert a == pytest.approx(b, rel=1e-12)


def test_al_value_at_feasible_point_ignores_multipliers():
    task, w = ls_instance(5)
    theta = project(SIGN, w)
    feasible = decompress(SIGN, theta, w)
    lam = np.random.default_rng(5).standard_normal(8)
    assert al_value(task, SIGN, feasible, theta, lam, 3.0) == loss_eval(task, feasible)


# -- L step ------------------------------------------------------------------

def test_l_step_fixed_contraction_rate():
    for seed in range(5):
        task, w_ref = ls_instance(seed, D=6, N=40)
        # penalize every entry so the subproblem is mu-strongly convex
        w_ref = w_ref.copy()
        w_ref.compress_mask[:] = True
        idx = np.flatnonzero(w_ref.compress_mask)
        target = np.random.default_rng(seed).standard_normal(idx.size)
        M = lipschitz_bound(task)
        for mu in (0.1 * M, M, 10 * M):
            q_star_w = exact_penalized_minimizer(task, idx, target, mu)
            r = q_star_w[idx] - target
            q_star = loss_eval(task, w_ref.copy(q_star_w)) + 0.5 * mu * float(r @ r)
            trace = []
            l_step_fixed(task, w_ref, target, mu, 30, trace=trace)
            gaps = np.array(trace) - q_star
            bound = M / (M + mu) + 1e-6
            for a, b in zip(gaps, gaps[1:]):
                if a > 1e-9 * max(1.0, abs(q_star)):
                    assert b / a <= bound


def test_l_step_fixed_objective_never_increases():
    task = make_task(LEAST_SQUARES, 6)
    w = random_weights(task, 6, scale=3.0)
    trace = []
    l_step_fixed(task, w, np.zeros(4), 2.0, 200, trace=trace)
    # once converged the value can only wobble in its last bit
    assert all(b <= a + 4 * np.finfo(float).eps * abs(a) for a, b in zip(trace, trace[1:]))
    assert trace[-1] < trace[0]


def test_l_step_fixed_large_mu_reaches_target_in_one_step():
    task, w = ls_instance(7, N=20)
    target = np.random.default_rng(7).standard_normal(8)
    out, it = l_step_fixed(task, w, target, 1e8, 1)
    assert it == 1
    assert np.linalg.norm(out.values[:8] - target) <= 1e-6 * np.linalg.norm(target)


def test_l_step_fixed_detects_bad_lipschitz_bound():
    task, w = ls_instance(8)
    with pytest.raises(NumericError):
        l_step_fixed(task, random_weights(task, 8, scale=5.0), np.zeros(8), 0.0, 50,
                     lipschitz=0.01 * lipschitz_bound(task) - 0.0)


def test_clipped_schedule_rates():
    sched = LearnRateSchedule(1.0, 1.0, clip_mu=4.0)
    assert [sched.rate(t) for t in (0, 3, 4)] == [0.25, 0.25, 0.2]


def test_schedule_unclipped_when_penalty_small():
    base = LearnRateSchedule(2.0, 10.0)
    clipped = base.clipped(4.0)  # 1/mu = 0.25 >= alpha/beta = 0.2
    np.testing.assert_array_equal(clipped.rates(100), base.rates(100))


def test_full_batch_sgd_with_constant_rate_is_gradient_descent():
    task, w = ls_instance(9, N=20)
    target = np.random.default_rng(9).standard_normal(8)
    mu = 3.0
    M = lipschitz_bound(task)
    gd, _ = l_step_fixed(task, w, target, mu, 25, lipschitz=M)
    sgd, n = l_step_sgd(task, w, target, mu, ConstantSchedule(1.0 / (M + mu)), epochs=25,
                        batch_size=task.n_points)
    assert n == 25
    np.testing.assert_allclose(sgd.values, gd.values, rtol=1e-12, atol=1e-12)


def test_sgd_update_count_and_determinism():
    task, w = ls_instance(10, N=50)
    sched = LearnRateSchedule(0.01, 10.0).clipped(1.0)
    a, n = l_step_sgd(task, w, np.zeros(8), 1.0, sched, epochs=3, batch_size=16, seed=3)
    b, _ = l_step_sgd(task, w, np.zeros(8), 1.0, sched, epochs=3, batch_size=16, seed=3)
    assert n == 3 * 4
    np.testing.assert_array_equal(a.values, b.values)


def test_sgd_divergence_reports_step():
    task, w = ls_instance(11)
    with pytest.raises(NumericError) as exc:
        l_step_sgd(task, w, np.zeros(8), 0.0, ConstantSchedule(1e3), epochs=200, batch_size=50)
    assert exc.value.index >= 0


# -- pure penalty ------------------------------------------------------------

def _pure_penalty_steps(dim, mu, eta, steps, seed):
    rng = np.random.default_rng(seed)
    task = zero_loss_task(dim)
    w0 = init_weights(task).copy(np.concatenate([rng.standard_normal(dim) * 3, [0.0]]))
    target = rng.standard_normal(dim)
    errors, w = [], w0
    for _ in range(steps):
        w, _ = l_step_sgd(task, w, target, mu, ConstantSchedule(eta), epochs=1, batch_size=1)
        errors.append(np.linalg.norm(w.values[:dim] - target) / np.linalg.norm(target))
    return errors


def test_pure_penalty_single_step_lands_on_target():
    rng = np.random.default_rng(12)
    for i in range(100):
        mu = 10 ** rng.uniform(-3, 6)
        dim = int(rng.integers(1, 101))
        assert _pure_penalty_steps(dim, mu, 1.0 / mu, 1, i)[0] <= 1e-12


def test_pure_penalty_step_size_threshold():
    mu = 5.0
    converging = _pure_penalty_steps(10, mu, 1.9 / mu, 50, 0)
    diverging = _pure_penalty_steps(10, mu, 2.5 / mu, 50, 0)
    assert converging[-1] < 1e-1 * converging[0]
    assert all(b > a for a, b in zip(diverging, diverging[1:]))


# -- C step and multipliers --------------------------------------------------

def test_c_step_without_multipliers_is_projection():
    task, w = ls_instance(13)
    for scheme in (SIGN, CompressionScheme(ADAPTIVE_QUANT, K=3), CompressionScheme(PRUNE, kappa=3)):
        a, b = c_step(scheme, w, np.zeros(8), 2.0), project(scheme, w)
        np.testing.assert_array_equal(delta_values(scheme, a, 8), delta_values(scheme, b, 8))


def test_c_step_of_feasible_point():
    task, w = ls_instance(14)
    feasible = decompress(SIGN, project(SIGN, w), w)
    np.testing.assert_array_equal(delta_values(SIGN, c_step(SIGN, feasible, np.zeros(8), 1.0), 8),
                                  feasible.values[:8])


def test_c_step_projects_shifted_vector():
    task, w = ls_instance(15)
    lam = np.random.default_rng(15).standard_normal(8)
    scheme = CompressionScheme(ADAPTIVE_QUANT, K=2)
    got = delta_values(scheme, c_step(scheme, w, lam, 0.5), 8)
    want = delta_values(scheme, project_values(scheme, w.values[:8] - lam / 0.5), 8)
    np.testing.assert_array_equal(got, want)


def test_c_step_rejects_nonpositive_mu():
    task, w = ls_instance(16)
    with pytest.raises(ConfigError):
        c_step(SIGN, w, np.zeros(8), 0.0)


def test_multiplier_update_arithmetic():
    w = init_weights(zero_loss_task(2)).copy(np.array([1.5, -2.0, 0.0]))
    theta = SignParams([1, -1])
    np.testing.assert_array_equal(multiplier_update(SIGN, np.zeros(2), w, theta, 2.0), [-1.0, 2.0])
    feasible = w.copy(np.array([1.0, -1.0, 0.0]))
    lam = np.array([0.3, -0.7])
    np.testing.assert_array_equal(multiplier_update(SIGN, lam, feasible, theta, 9.0), lam)


# -- driver ------------------------------------------------------------------

def test_multiplier_increments_vanish_at_convergence():
    task, w = ls_instance(17)
    state, _ = lc_run(task, SIGN, LCConfig(constraint_tol=1e-11), w)
    assert state.converged
    # successive multiplier increments are mu * ||w - Delta(theta)||
    steps = [h.mu * h.constraint_norm for h in state.history[-3:]]
    assert max(steps) < 1e-4
    assert all(b < a for a, b in zip(steps, steps[1:]))


def test_lc_feasible_reference_is_optimal():
    rng = np.random.default_rng(18)
    X = rng.standard_normal((30, 5))
    task = LossTask(LEAST_SQUARES, X, X @ np.array([1.0, -1.0, -1.0, 1.0, 1.0]) - 0.5)
    w = reference(task)
    state, out = lc_run(task, SIGN, LCConfig(), w)
    assert state.converged and state.k == 1
    np.testing.assert_array_equal(state.theta.signs, project(SIGN, w).signs)
    assert state.history[0].constraint_norm < 1e-8
    assert loss_eval(task, out) == pytest.approx(loss_eval(task, w), abs=1e-12)


@pytest.mark.parametrize("scheme", [SIGN, CompressionScheme(ADAPTIVE_QUANT, K=2), CompressionScheme(TERNARY),
                                    CompressionScheme(PRUNE, kappa=3)], ids=lambda s: s.kind)
def test_first_iterate_is_direct_compression(scheme):
    task, w = ls_instance(19)
    _, dc = dc_run(task, scheme, w)
    _, first = lc_run(task, scheme, LCConfig(mu0=1e-6, max_outer=1), w)
    assert np.linalg.norm(first.values - dc.values) <= 1e-3 * np.linalg.norm(dc.values)


def test_binarized_lc_beats_direct_compression():
    gaps = []
    for seed in range(10):
        task, w = ls_instance(seed)
        state, out = lc_run(task, SIGN, LCConfig(), w)
        _, dc = dc_run(task, SIGN, w)
        _, best = oracle_sign_loss(task, w)
        assert state.converged
        assert loss_eval(task, out) <= loss_eval(task, dc) + 1e-8
        gaps.append(loss_eval(task, out) / best - 1.0)
    assert min(gaps) >= -1e-12
    print("relative gaps to the sign oracle:", np.round(gaps, 4))


def test_state_invariants_qp():
    task, w = ls_instance(20)
    state, _ = lc_run(task, CompressionScheme(ADAPTIVE_QUANT, K=2), LCConfig(method="qp"), w)
    assert np.all(state.lam == 0)
    assert all(h.lambda_norm == 0 for h in state.history)
    mus = [h.mu for h in state.history]
    assert all(b > a for a, b in zip(mus, mus[1:]))
    assert len(state.history) == state.k


def test_pinned_multipliers_reproduce_qp_bitwise():
    task, w = ls_instance(21)
    scheme = CompressionScheme(ADAPTIVE_QUANT, K=3)
    qp, out_qp = lc_run(task, scheme, LCConfig(method="qp"), w)
    al, out_al = lc_run(task, scheme, LCConfig(method="al", update_multipliers=False), w)
    strip = lambda h: [(r.k, r.mu, r.loss_w, r.loss_compressed, r.constraint_norm, r.lambda_norm,
                        r.lstep_iters_used) for r in h]
    assert strip(qp.history) == strip(al.history)
    np.testing.assert_array_equal(out_qp.values, out_al.values)


@pytest.mark.parametrize("scheme", [SIGN, CompressionScheme(PRUNE, kappa=3), CompressionScheme(TERNARY),
                                    CompressionScheme(ADAPTIVE_QUANT, K=3)], ids=lambda s: s.kind)
def test_converged_runs_are_feasible(scheme):
    task, w = ls_instance(22)
    state, out = lc_run(task, scheme, LCConfig(), w)
    assert state.converged
    assert state.history[-1].constraint_norm < state.constraint_tol
    assert state.history[-1].constraint_norm < state.history[0].constraint_norm
    x = out.values[:8]
    if scheme.kind == BINARIZE:
        assert set(np.abs(x)) == {1.0}
    elif scheme.kind == PRUNE:
        assert np.count_nonzero(x) <= 3
    elif scheme.kind == TERNARY:
        assert set(x) <= {-1.0, 0.0, 1.0}
    else:
        assert np.unique(x).size <= 3


def test_low_rank_lc_on_mlp():
    task = make_task(MLP, 23, N=40, D=5, hidden=4, classes=3)
    w = reference(task, 23)
    scheme = CompressionScheme(LOW_RANK, rank=1, layer="W1")
    state, out = lc_run(task, scheme, LCConfig(epochs=2, batch_size=40), w)
    assert state.converged
    assert np.linalg.matrix_rank(out.layer("W1"), tol=1e-9) <= 1
    assert state.history[-1].constraint_norm < state.history[0].constraint_norm


def test_non_convergence_is_flagged_not_raised():
    task, w = ls_instance(24)
    state, out = lc_run(task, SIGN, LCConfig(max_outer=3), w)
    assert not state.converged and state.k == 3
    assert set(np.abs(out.values[:8])) == {1.0}


def test_fast_penalty_growth_warns_about_direct_compression():
    task, w = ls_instance(2)
    with pytest.warns(StuckAtDCWarning):
        state, _ = lc_run(task, SIGN, LCConfig(a=10.0), w)
    assert state.warnings


def test_default_schedule_does_not_warn():
    for seed in range(10):
        task, w = ls_instance(seed)
        with warnings.catch_warnings():
            warnings.simplefilter("error", StuckAtDCWarning)
            state, _ = lc_run(task, SIGN, LCConfig(), w)
        assert not state.warnings


@pytest.mark.parametrize("kwargs", [{"a": 1.0}, {"mu0": 0.0}, {"constraint_tol": -1.0}, {"method": "x"},
                                    {"lstep": "newton"}, {"max_outer": 0}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        LCConfig(**kwargs)


# -- baselines ---------------------------------------------------------------

def test_dc_of_feasible_reference_is_identity():
    task = zero_loss_task(3)
    w = init_weights(task).copy(np.array([1.0, -1.0, 1.0, 0.0]))
    _, out = dc_run(task, SIGN, w)
    np.testing.assert_array_equal(out.values, w.values)


def test_dc_with_one_codebook_entry_per_weight_is_exact():
    task, w = ls_instance(25)
    _, out = dc_run(task, CompressionScheme(ADAPTIVE_QUANT, K=8), w)
    np.testing.assert_array_equal(out.values, w.values)


def test_idc_cycles_with_exact_solves():
    task, w = ls_instance(26)
    res = idc_run(task, SIGN, w, 6, solver="exact", tol=1e-10)
    for r in res.rounds[2:]:
        np.testing.assert_allclose(r.fingerprint, res.rounds[1].fingerprint, rtol=0, atol=1e-10)
    assert res.cycle_start == 2
    losses = [r.loss_compressed for r in res.rounds[1:]]
    assert max(losses) - min(losses) <= 1e-10


def test_idc_single_round_is_dc_then_retrain():
    task, w = ls_instance(27)
    scheme = CompressionScheme(ADAPTIVE_QUANT, K=2)
    res = idc_run(task, scheme, w, 1, solver="exact")
    _, dc = dc_run(task, scheme, w)
    from lccompress.model import restricted_lstsq
    retrained = restricted_lstsq(task, dc, np.ones(w.size, dtype=bool))
    np.testing.assert_array_equal(res.w_compressed.values,
                                  decompress(scheme, project(scheme, retrained), retrained).values)


def test_idc_with_sgd_on_mlp_is_recorded():
    task = make_task(MLP, 28, N=40, D=4, hidden=3)
    w = reference(task, 28)
    res = idc_run(task, SIGN, w, 10, 3, solver="sgd")
    changes = [r.theta_change for r in res.rounds]
    print("iDC theta changes with SGD retraining:", np.round(changes, 6), "cycle:", res.cycle_start)
    assert len(res.rounds) == 10


def test_retrain_after_prune_ordering():
    for seed in range(10):
        task, w = ls_instance(seed, D=10)
        scheme = CompressionScheme(PRUNE, kappa=3)
        _, dc = dc_run(task, scheme, w)
        rt = retrain_after_prune(task, w, 3)
        _, best = oracle_support_loss(task, w, 3)
        assert loss_eval(task, rt) <= loss_eval(task, dc) + 1e-12
        assert loss_eval(task, rt) >= best - 1e-9
        assert np.count_nonzero(rt.values[:10]) <= 3


def test_retrain_full_support_recovers_unrestricted_minimizer():
    task, w = ls_instance(29)
    rt = retrain_after_prune(task, w, 8)
    assert loss_eval(task, rt) == pytest.approx(loss_eval(task, w), rel=1e-10)


def test_retrain_masked_gradient_keeps_zeros():
    task = make_task(MLP, 30, N=30, D=4, hidden=3)
    w = reference(task, 30)
    rt = retrain_after_prune(task, w, 5, 2)
    idx = np.flatnonzero(w.compress_mask)
    assert np.count_nonzero(rt.values[idx]) <= 5


# -- schedules ---------------------------------------------------------------

def test_validate_schedule_crossover_example():
    rep = validate_schedule(1.0, 1.0, 4.0, 50)
    assert rep.crossover == rep.crossover_closed_form == 3
    assert rep.ok


def test_validate_schedule_no_clipping_needed():
    rep = validate_schedule(1.0, 10.0, 5.0, 50)
    assert rep.crossover == 0 and rep.rates_match


def test_validate_schedule_bounds():
    rep = validate_schedule(3.0, 2.0, 7.0, 200)
    assert rep.positive and rep.majorized
    with pytest.raises(ConfigError):
        validate_schedule(0.0, 1.0, 1.0, 10)
    with pytest.raises(ConfigError):
        validate_schedule(1.0, 1.0, 1.0, 0)
