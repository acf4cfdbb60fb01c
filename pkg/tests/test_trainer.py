import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st
from scipy.integrate import quad
from scipy.optimize import minimize_scalar

from pno import game
from pno.bvp import X_GT, analytic_unconstrained, sample_initial_states
from pno.checks import richardson_gradient
from pno.game import GameGeometry
from pno.nets import AdamState, optimizer_step
from pno.operator import LatticeSpec, OperatorConfig, OperatorEnsemble
from pno.rollout import RolloutConfig, forward_rollout, complete_bundles
from pno.trainer import (LossWeights, PointBatch, SamplePool, TargetData, TrainConfig, curriculum_time_window,
                         evolve_samples, hji_residual, learning_rate, pde_residual, pno_loss, pretrain,
                         sample_box, sample_thetas, time_window, train_hybrid, train_pno)

G = GameGeometry()
G0 = G.replace(b=0.0)
SMALL = OperatorConfig(hidden_widths=(8, 8), q=6, lattice=LatticeSpec(resolution=(7, 7)))


def perturbed(cfg=SMALL, geom=G, seed=0, scale=0.05):
    e = OperatorEnsemble(geom, cfg, seed=seed)
    return e.with_params(e.params + scale * np.random.default_rng(seed).standard_normal(e.n_params))


def batch(rng, n, t=None, thetas=((1, 1), (5, 5), (1, 5))):
    X = sample_box(rng, n, (15, 105), (15, 32))
    ts = rng.uniform(0, G.T, n) if t is None else np.full(n, t)
    return PointBatch(X, ts, sample_thetas(rng, n, thetas))


def rollout_targets(ens, n=3, seed=0):
    rng = np.random.default_rng(seed)
    X0 = sample_box(rng, n, (15, 40), (16, 30))
    b, dense, pol = forward_rollout(ens, X0, 1.5, (1, 5), RolloutConfig())
    complete_bundles(b, dense, pol, ens.geom, RolloutConfig())
    return TargetData.from_bundles(b)


# -- HJI residual -----------------------------------------------------------------

def analytic_value(x, t, player, geom=G0):
    """Unconstrained value -(int u^2 + g) from the single-player closed form.

    With lam_d = mu and lam_v(s) = a + mu (T - s), the terminal speed solves
    v_T (1 + tau) = v + v_bar tau + mu tau^2 / 4 and a = -2 (v_T - v_bar).
    """
    d, v = (x[0], x[1]) if player == 0 else (x[2], x[3])
    tau = geom.T - t
    mu = geom.mu
    vT = (v + geom.v_bar * tau + mu * tau ** 2 / 4.0) / (1.0 + tau)
    a = -2.0 * (vT - geom.v_bar)
    u = lambda s: (a + mu * (geom.T - s)) / 2.0  # noqa: E731
    speed = lambda s: v + quad(u, t, s, epsabs=1e-13)[0]  # noqa: E731
    run = quad(lambda s: u(s) ** 2, t, geom.T, epsabs=1e-13, epsrel=1e-13)[0]
    dT = d + quad(speed, t, geom.T, epsabs=1e-12)[0]
    assert abs(speed(geom.T) - vT) <= 1e-10
    return -(run - mu * dT + (vT - geom.v_bar) ** 2)


@pytest.mark.parametrize("x,t", [((16.0, 19.0, 18.0, 22.0), 0.5), ((19.0, 24.0, 15.5, 18.5), 2.0),
                                 ((17.0, 20.0, 17.0, 20.0), 0.13), ((60.0, 25.0, 90.0, 15.0), 1.7)])
def test_residual_of_analytic_unconstrained_value_vanishes(x, t):
    z = np.array([*x, t])
    Gr = np.zeros((1, 2, 5))
    for i in (0, 1):
        Gr[0, i] = richardson_gradient(lambda y: analytic_value(y[:4], y[4], i), z, 1e-2)
    r, _, _ = hji_residual(Gr, np.array([x], float), np.array([[1, 1]]), G0)
    assert np.max(np.abs(r)) <= 1e-3


def test_residual_uses_maximized_hamiltonian():
    rng = np.random.default_rng(1)
    X = sample_box(rng, 5, (15, 105), (15, 32))
    Gr = rng.uniform(-30, 30, (5, 2, 5))
    th = np.array([[1, 2]] * 5)
    r, u, _ = hji_residual(Gr, X, th, G)
    for k in range(5):
        for i in (0, 1):
            lam = Gr[k, i, :4]
            uo = u[k, 1 - i]
            best = minimize_scalar(lambda v: -game.hamiltonian(lam, X[k], v, uo, th[k, i], i, G),
                                   bounds=(G.u_min, G.u_max), method="bounded",
                                   options={"xatol": 1e-10})
            assert abs(r[k, i] - (Gr[k, i, 4] - best.fun)) <= 1e-6 * max(1.0, abs(best.fun))


def test_zero_value_far_from_zone_has_zero_residual():
    e = OperatorEnsemble(G, SMALL)
    e = e.with_params(np.zeros(e.n_params))
    r = pde_residual(e, [[0.0 + 15, 18.0, 100.0, 18.0]], 1.0, (1, 1))
    assert np.max(np.abs(r)) <= 1e-6 * G.b


def test_scaling_value_leaves_penalty_untouched():
    """Scaling the value by alpha scales the gradient terms (and the unclipped
    control with them) but not the running penalty: r(alpha) + c is a quadratic
    in alpha with no constant term."""
    e = perturbed()
    rng = np.random.default_rng(2)
    X = sample_box(rng, 6, (15, 105), (15, 32))
    X[:, 0] = X[:, 2] = 36.0
    t = rng.uniform(0, 3, 6)
    _, Gr = e.value_and_gradient(X, t, (1, 1))
    Gr[:, :, [1, 3]] = np.clip(Gr[:, :, [1, 3]], -3, 3)
    th = np.ones((6, 2), int)
    c = np.stack([game.penalty(X, 1, i, G) for i in (0, 1)], axis=1)
    assert np.all(c > 1e3)
    rs = [hji_residual(a * Gr, X, th, G)[0] + c for a in (1.0, 2.0, 3.0)]
    assert np.allclose(rs[2] - 3 * rs[1] + 3 * rs[0], 0.0, atol=1e-9)


def test_time_outside_horizon_rejected():
    from pno.operator import HorizonError
    with pytest.raises(HorizonError):
        pde_residual(perturbed(), [[20, 18, 30, 18]], 3.5, (1, 1))


# -- composite loss -----------------------------------------------------------------

def test_loss_gradient_matches_finite_differences():
    ens = perturbed()
    rng = np.random.default_rng(0)
    res, bnd = batch(rng, 12), batch(rng, 8, t=G.T)
    tgt = rollout_targets(ens)
    w = LossWeights(0.7, 1.3, 0.5, 2.0, 1.1)
    loss, grad, terms = pno_loss(ens, ens.params, res, bnd, tgt, w)
    assert all(terms[k] > 0 for k in ("pde", "bc", "C2", "C3", "C4", "C5"))
    for j in rng.choice(ens.n_params, 20, replace=False):
        e = np.zeros(ens.n_params)
        e[j] = 1.0
        fd = richardson_gradient(lambda h: pno_loss(ens, ens.params + h[0] * e, res, bnd, tgt, w, False)[0],
                                 np.zeros(1), 1e-6)[0]
        assert abs(fd - grad[j]) <= 1e-5 * max(1.0, abs(fd)), j


def test_empty_bundles_leave_pde_and_boundary_only():
    ens = perturbed()
    rng = np.random.default_rng(0)
    res, bnd = batch(rng, 10), batch(rng, 10, t=G.T)
    loss, _, terms = pno_loss(ens, ens.params, res, bnd, TargetData.from_bundles([]), LossWeights())
    assert terms["C2"] == terms["C3"] == terms["C4"] == terms["C5"] == 0.0
    assert loss == terms["pde"] + terms["bc"]


def test_zero_weights_leave_pde_term_alone():
    ens = perturbed()
    rng = np.random.default_rng(0)
    res, bnd = batch(rng, 10), batch(rng, 10, t=G.T)
    tgt = rollout_targets(ens)
    loss, grad, terms = pno_loss(ens, ens.params, res, bnd, tgt, LossWeights(0, 0, 0, 0, 0))
    loss_p, grad_p, _ = pno_loss(ens, ens.params, res, PointBatch.empty(), TargetData.empty(), LossWeights())
    assert loss == terms["pde"] == loss_p
    assert np.array_equal(grad, grad_p)


def test_all_empty_loss_is_zero():
    ens = perturbed()
    loss, grad, _ = pno_loss(ens, ens.params, PointBatch.empty(), PointBatch.empty(), TargetData.empty(),
                             LossWeights())
    assert loss == 0.0 and not np.any(grad)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(C3=-1.0)


# -- schedules ----------------------------------------------------------------------

def test_curriculum_window_values():
    got = [curriculum_time_window(n, 300, 3.0) for n in range(0, 300, 10)]
    assert got == [k / 10 for k in range(1, 31)]
    assert curriculum_time_window(9, 300, 3.0) == 0.1
    assert curriculum_time_window(299, 300, 3.0) == 3.0


@given(st.integers(0, 1000), st.integers(1, 500))
def test_curriculum_window_monotone_and_saturating(n, iters):
    assert curriculum_time_window(n + 10, iters, 3.0) >= curriculum_time_window(n, iters, 3.0)
    assert curriculum_time_window(max(iters - 1, 0), iters, 3.0) == 3.0


def test_backward_window_ends_at_horizon():
    assert time_window(0, 300, 3.0, "backward") == (2.9, 3.0)
    assert time_window(0, 300, 3.0) == (0.0, 0.1)


def test_cosine_learning_rate_endpoints():
    assert learning_rate(0, 100, 1e-3, 1e-6, "cosine") == 1e-3
    assert abs(learning_rate(99, 100, 1e-3, 1e-6, "cosine") - 1e-6) <= 1e-18
    assert learning_rate(50, 100, 1e-3, 1e-6, "constant") == 1e-3


# -- evolutionary sampling ------------------------------------------------------------

def make_pool(res):
    n = len(res)
    return SamplePool(np.arange(4 * n, dtype=float).reshape(n, 4), np.zeros(n), np.ones((n, 2), int),
                      np.asarray(res, float))


def table_residual(values):
    lookup = {}

    def fn(X, t, th):
        return np.array([lookup.get(float(x[0]), 0.0) for x in X])
    for k, v in enumerate(values):
        lookup[float(4 * k)] = v
    return fn


def fresh(n):
    return np.full((n, 4), -1.0), np.zeros(n), np.ones((n, 2), int)


def test_evolve_all_equal_keeps_everything():
    vals = [0.1] * 7
    pool, keep, _ = evolve_samples(make_pool(vals), table_residual(vals), fresh)
    assert keep.all() and len(pool) == 7
    assert np.array_equal(pool.states, make_pool(vals).states)


def test_evolve_single_outlier_survives_alone():
    vals = [0.0] * 9 + [10.0]
    pool, keep, mean = evolve_samples(make_pool(vals), table_residual(vals), fresh)
    assert mean == 1.0
    assert keep.sum() == 1 and keep[-1]
    assert len(pool) == 10 and np.sum(pool.states[:, 0] == -1.0) == 9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=40))
@example([86.12405003736231] * 3)  # float mean rounds above every entry
def test_evolve_matches_direct_filter(vals):
    pool, keep, mean = evolve_samples(make_pool(vals), table_residual(vals), fresh)
    r = np.asarray(vals)
    direct = np.ones(len(r), bool) if np.all(r == r[0]) else np.array([v >= r.mean() for v in r])
    assert np.array_equal(keep, direct)
    assert len(pool) == len(vals)
    assert np.all(pool.residuals[:keep.sum()] >= mean)


# -- pretraining and training loops ----------------------------------------------------

def test_pretrain_zero_iterations_is_noop():
    ens = perturbed()
    out, report = pretrain(ens, TrainConfig(pretrain_iters=0))
    assert out.params.tobytes() == ens.params.tobytes()
    assert np.isnan(report["final_loss"])


def test_pretrain_reduces_boundary_error_and_is_deterministic():
    cfg = TrainConfig(pretrain_iters=60, pretrain_batch=64, pretrain_lr=3e-3)
    ens = OperatorEnsemble(G, SMALL, seed=1)
    a, ra = pretrain(ens, cfg)
    b, _ = pretrain(ens, cfg)
    assert a.params.tobytes() == b.params.tobytes()
    from pno.trainer import boundary_errors
    rng = np.random.default_rng(5)
    X = sample_box(rng, 200, cfg.d_bounds, cfg.v_bounds)
    th = sample_thetas(rng, 200, cfg.theta_training_set)
    assert boundary_errors(a, X, th)["value_error"] < boundary_errors(ens, X, th)["value_error"]


def test_adam_step_follows_update_rule_on_loss_gradient():
    ens = perturbed()
    rng = np.random.default_rng(0)
    res = batch(rng, 10)
    _, grad, _ = pno_loss(ens, ens.params, res, PointBatch.empty(), TargetData.empty(), LossWeights())
    new, _ = optimizer_step(ens.params, grad, AdamState.zeros(ens.n_params, 1e-3))
    m, v = 0.1 * grad / 0.1, 0.001 * grad ** 2 / 0.001
    assert np.allclose(new, ens.params - 1e-3 * m / (np.sqrt(v) + 1e-8), rtol=0, atol=1e-15)


def tiny_train_cfg(**kw):
    base = dict(pretrain_iters=5, pretrain_batch=16, train_iters=3, gradient_steps=3, n_rollouts=4,
                n_residual=16, n_boundary=8, resample_period=2, probe_size=16,
                theta_training_set=((1, 1), (5, 5)))
    base.update(kw)
    return TrainConfig(**base)


def test_train_pno_runs_and_is_deterministic():
    ens = OperatorEnsemble(G, SMALL, seed=2)
    cfg = tiny_train_cfg()
    a = train_pno(ens, cfg, LossWeights())
    b = train_pno(ens, cfg, LossWeights())
    assert a.ensemble.params.tobytes() == b.ensemble.params.tobytes()
    assert a.metrics == b.metrics
    assert [m["iter"] for m in a.metrics] == [1, 2, 3]
    # fewer than ten iterations: the first window already spans the horizon
    assert [m["window_T"] for m in a.metrics] == [3.0, 3.0, 3.0]
    assert a.failures == 0


def analytic_dataset(n, seed):
    rng = np.random.default_rng(seed)
    X0 = sample_initial_states(rng, n, X_GT)
    rows = []
    for x in X0:
        b = analytic_unconstrained(x, 0.0, G0).bundle
        rows.append(b)
    cat = np.concatenate
    return TargetData(cat([b.states for b in rows]), cat([b.times for b in rows]),
                      np.ones((31 * n, 2), int), cat([b.V_tilde for b in rows]), cat([b.lam_tilde for b in rows]))


def test_hybrid_stage_one_fits_unconstrained_dataset():
    train, held = analytic_dataset(40, 0), analytic_dataset(10, 1)
    cfg = OperatorConfig(hidden_widths=(24, 24), q=12, lattice=LatticeSpec(resolution=(7, 7)),
                         with_costate=False)
    ens = OperatorEnsemble(G0, cfg, seed=0)
    tcfg = TrainConfig(hybrid_stage1_iters=1500, hybrid_stage2_iters=0, hybrid_batch=256,
                       hybrid_learning_rate=3e-3, gradient_steps=500, probe_size=32,
                       theta_training_set=((1, 1),))
    out = train_hybrid(ens, tcfg, train, LossWeights())
    V = out.ensemble.value(held.states, held.times, held.thetas)
    err = float(np.mean(np.abs(V - held.values)) / out.ensemble.value_scale)
    assert err <= 1e-2, err


def test_hybrid_shuffling_is_seed_deterministic():
    data = analytic_dataset(3, 0)
    cfg = OperatorConfig(hidden_widths=(6,), q=4, lattice=LatticeSpec(resolution=(5, 5)), with_costate=False)
    ens = OperatorEnsemble(G0, cfg)
    tcfg = TrainConfig(hybrid_stage1_iters=5, hybrid_stage2_iters=3, hybrid_batch=16, n_residual=8,
                       n_boundary=4, probe_size=8, theta_training_set=((1, 1),))
    a = train_hybrid(ens, tcfg, data, LossWeights())
    b = train_hybrid(ens, tcfg, data, LossWeights())
    assert a.ensemble.params.tobytes() == b.ensemble.params.tobytes()
    with pytest.raises(ValueError):
        train_hybrid(ens, tcfg, TargetData.empty(), LossWeights())
