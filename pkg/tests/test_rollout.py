import numpy as np
import pytest
from scipy.integrate import quad, solve_ivp

from pno import game
from pno.game import GameGeometry
from pno.integrate import IntegrationError, rk45_integrate
from pno.operator import LatticeSpec, OperatorConfig, OperatorEnsemble
from pno.rollout import (CSV_COLUMNS, RolloutConfig, backward_costate, backward_value, complete_bundles,
                         forward_rollout, read_trajectory_csv, rollout_bundles, running_cost, time_grid,
                         write_trajectory_csv)

G = GameGeometry()
SMALL = OperatorConfig(hidden_widths=(8,), q=4, lattice=LatticeSpec(resolution=(5, 5)))


def zero_ensemble(geom=G):
    e = OperatorEnsemble(geom, SMALL)
    return e.with_params(np.zeros(e.n_params))


# -- integrator ---------------------------------------------------------------

def test_exponential_growth_reaches_e():
    sol = rk45_integrate(lambda t, y: y, [1.0], (0.0, 1.0), rtol=1e-12, atol=1e-12)
    assert abs(sol.y[-1, 0] - np.e) <= 1e-10


def test_backward_integration_and_dense_output():
    ts = np.linspace(2.0, 0.0, 21)
    sol = rk45_integrate(lambda t, y: -y, [1.0], (2.0, 0.0), ts, rtol=1e-11, atol=1e-12)
    assert np.allclose(sol.y[:, 0], np.exp(2.0 - ts), rtol=1e-8)
    mid = np.array([1.234, 0.05])
    assert np.allclose(sol.dense(mid)[:, 0], np.exp(2.0 - mid), rtol=1e-7)


def test_matches_reference_solver_on_nonlinear_system():
    def f(t, y):
        return np.array([y[1], -np.sin(y[0]) - 0.1 * y[1]])
    ts = np.linspace(0, 10, 11)
    ours = rk45_integrate(f, [1.0, 0.0], (0, 10), ts, rtol=1e-10, atol=1e-12)
    ref = solve_ivp(f, (0, 10), [1.0, 0.0], method="DOP853", t_eval=ts, rtol=1e-12, atol=1e-13)
    assert np.max(np.abs(ours.y - ref.y.T)) <= 1e-8


def test_max_step_is_respected():
    sol = rk45_integrate(lambda t, y: 0 * y, [1.0], (0.0, 1.0), max_step=0.05)
    assert np.max(sol.dense.hs) <= 0.05 + 1e-15
    assert sol.n_steps >= 20


def test_non_finite_start_raises():
    with pytest.raises(IntegrationError):
        rk45_integrate(lambda t, y: y, [np.nan], (0.0, 1.0))


def test_time_grid():
    ts = time_grid(0.0, 3.0, 0.1)
    assert len(ts) == 31 and ts[-1] == 3.0
    with pytest.raises(ValueError):
        time_grid(0.0, 3.0, 0.7)


# -- rollouts -------------------------------------------------------------------

def test_zero_policy_rollout_is_ballistic():
    ens = zero_ensemble()
    x0 = np.array([[20.0, 18.0, 30.0, 25.0], [50.0, 16.0, 70.0, 31.0]])
    bundles, _, _ = forward_rollout(ens, x0, 0.5, (1, 2), RolloutConfig())
    for b, x in zip(bundles, x0):
        tau = b.times - 0.5
        assert np.array_equal(b.controls, np.zeros_like(b.controls))
        assert np.allclose(b.states[:, 0], x[0] + x[1] * tau, atol=1e-10)
        assert np.allclose(b.states[:, 2], x[2] + x[3] * tau, atol=1e-10)
        assert np.allclose(b.states[:, [1, 3]], x[[1, 3]], atol=0)
        assert len(b.times) == 26


def test_unpenalized_costate_is_affine_in_time():
    g0 = G.replace(b=0.0)
    ens = zero_ensemble(g0)
    x0 = np.array([[20.0, 18.0, 30.0, 25.0]])
    bundles, dense, pol = forward_rollout(ens, x0, 0.0, (1, 1), RolloutConfig())
    term = np.array([[[0.7, -1.0, 0.2, 3.0], [-0.4, 2.0, 0.1, -1.5]]])
    complete_bundles(bundles, dense, pol, g0, RolloutConfig(), terminal=term)
    lam = bundles[0].lam_tilde
    tau = g0.T - bundles[0].times
    for i in (0, 1):
        assert np.allclose(lam[:, i, 0], term[0, i, 0], atol=1e-12)
        assert np.allclose(lam[:, i, 2], term[0, i, 2], atol=1e-12)
        assert np.allclose(lam[:, i, 1], term[0, i, 1] + term[0, i, 0] * tau, atol=1e-10)
        assert np.allclose(lam[:, i, 3], term[0, i, 3] + term[0, i, 2] * tau, atol=1e-10)


def test_terminal_value_is_negative_terminal_loss():
    ens = zero_ensemble()
    x0 = np.array([[20.0, 18.0, 30.0, 25.0], [40.0, 22.0, 31.0, 17.0]])
    bundles, dense, pol = forward_rollout(ens, x0, 0.0, (1, 3), RolloutConfig())
    complete_bundles(bundles, dense, pol, G, RolloutConfig())
    for b in bundles:
        for i in (0, 1):
            assert b.V_tilde[-1, i] == -game.terminal_loss(b.states[-1], i, G)


def test_backward_value_matches_adaptive_quadrature_through_zone():
    """Ballistic pass through the zone: the penalty spike is integrated accurately."""
    ens = zero_ensemble()
    x0 = np.array([[25.0, 20.0, 27.0, 19.0]])
    cfg = RolloutConfig()
    bundles, dense, pol = forward_rollout(ens, x0, 0.0, (2, 2), cfg)
    complete_bundles(bundles, dense, pol, G, cfg)
    b = bundles[0]

    def c(t, i):
        s = np.array([25.0 + 20.0 * t, 20.0, 27.0 + 19.0 * t, 19.0])
        return game.penalty(s, 2, i, G)

    for i in (0, 1):
        ref = quad(c, 0.0, G.T, args=(i,), points=[0.2, 0.5, 0.8], limit=500, epsabs=1e-10)[0]
        ref += game.terminal_loss(b.states[-1], i, G)
        assert ref > 100.0
        assert abs(b.V_tilde[0, i] + ref) <= 1e-4 * abs(ref)


def test_dynamic_programming_consistency_of_backward_values():
    ens = zero_ensemble()
    x0 = np.array([[25.0, 20.0, 27.0, 19.0]])
    cfg = RolloutConfig()
    bundles, dense, pol = forward_rollout(ens, x0, 0.0, (1, 1), cfg)
    complete_bundles(bundles, dense, pol, G, cfg)
    V = bundles[0].V_tilde
    ts = bundles[0].times
    for k in (0, 5, 17):
        seg = [quad(lambda t: running_cost(dense(np.array([t]))[0], np.zeros((1, 2)), (1, 1), G)[0, i],
                    ts[k], ts[k + 1], epsabs=1e-10, limit=200)[0] for i in (0, 1)]
        assert np.allclose(V[k] - V[k + 1], -np.array(seg), rtol=1e-6, atol=1e-8)


def test_rollout_bundles_groups_by_start_time_and_keeps_order():
    ens = zero_ensemble()
    x0 = np.array([[20.0, 18, 30, 25], [21.0, 18, 31, 25], [22.0, 18, 32, 25]])
    bundles, failed = rollout_bundles(ens, x0, [1.0, 0.0, 1.0], np.array([[1, 1], [2, 2], [3, 3]]),
                                      RolloutConfig())
    assert failed == 0
    assert [b.case_id for b in bundles] == [0, 1, 2]
    assert [len(b.times) for b in bundles] == [21, 31, 21]
    assert [b.thetas for b in bundles] == [(1, 1), (2, 2), (3, 3)]


def test_costate_field_unpenalized():
    X = np.array([[20.0, 18, 30, 25]])
    lam = np.arange(8.0).reshape(1, 2, 4)
    term = np.broadcast_to(lam, (1, 2, 4)).copy()
    got, _ = backward_costate(lambda t: np.broadcast_to(X, (np.size(t), 1, 4)), np.array([0.0, 1.0]),
                              term, (1, 1), G.replace(b=0.0), RolloutConfig())
    assert np.allclose(got[0, 0, 0], [0, 1 + 0, 2, 3 + 2])
    assert np.allclose(got[0, 0, 1], [4, 5 + 4, 6, 7 + 6])


def test_trajectory_csv_round_trip(tmp_path):
    ens = zero_ensemble()
    x0 = np.array([[20.0, 18.0, 30.0, 25.0], [40.0, 22.0, 31.0, 17.0]])
    bundles, dense, pol = forward_rollout(ens, x0, 2.0, (1, 3), RolloutConfig())
    complete_bundles(bundles, dense, pol, G, RolloutConfig())
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, bundles, {"seed": 0})
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed=0"
    assert lines[1].split(",") == CSV_COLUMNS
    back = read_trajectory_csv(path)
    assert len(back) == 2
    for a, b in zip(bundles, back):
        assert np.array_equal(a.times, b.times)
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.lam_tilde, b.lam_tilde)
        assert np.array_equal(a.V_tilde, b.V_tilde)
