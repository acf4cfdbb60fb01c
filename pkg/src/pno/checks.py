"""Self-checks against independent oracles.

Each check returns a CheckResult. They back the ``check`` command and the
acceptance tests; the expensive end-to-end run lives with the CLI pipeline.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import game
from .bvp import X_GT, BvpConfig, analytic_unconstrained, solve_bvp
from .game import GameGeometry
from .nets import MLP, Activation, NetworkShape
from .operator import LatticeSpec, OperatorConfig, OperatorEnsemble
from .rollout import (RolloutConfig, backward_costate, backward_value, complete_bundles, costate_field,
                      forward_rollout, running_cost)
from .integrate import rk45_integrate
from .trainer import (LossWeights, PointBatch, SamplePool, TargetData, TrainConfig, curriculum_time_window,
                      evolve_samples, pno_loss, pretrain, sample_box, sample_thetas)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    data: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(fn):
    def wrapper(*args, **kw):
        t0 = time.perf_counter()
        res = fn(*args, **kw)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# -- finite differences -------------------------------------------------------------

def richardson_gradient(f, x: np.ndarray, h: float) -> np.ndarray:
    """Gradient of scalar/vector f by central differences with one Richardson step.

    Returns an array of shape (len(x),) + f(x).shape; truncation error O(h^4).
    """
    x = np.asarray(x, float)
    out = []
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = 1.0
        d1 = (np.asarray(f(x + h * e)) - np.asarray(f(x - h * e))) / (2 * h)
        d2 = (np.asarray(f(x + 0.5 * h * e)) - np.asarray(f(x - 0.5 * h * e))) / h
        out.append((4.0 * d2 - d1) / 3.0)
    return np.array(out)


def _rel(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


@_timed
def gradient_check(n_configs: int = 100, seed: int = 0, tol: float = 1e-6) -> CheckResult:
    """Input Jacobians, parameter gradients, and the tangent path of random MLPs,
    plus operator-level value gradients, against Richardson central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_where = ""
    for n in range(n_configs):
        kind = ("tanh", "sine")[n % 2]
        omega = float(rng.uniform(1.0, 3.0)) if kind == "sine" else 30.0
        shape = NetworkShape(int(rng.integers(1, 6)), int(rng.integers(1, 4)),
                             tuple(int(w) for w in rng.integers(2, 9, size=int(rng.integers(1, 4)))))
        net = MLP(shape, Activation(kind, bool(rng.integers(0, 2)), omega))
        params = net.init(int(rng.integers(1 << 30)))
        params = params + 0.1 * rng.standard_normal(params.shape)
        x = rng.uniform(-1, 1, shape.input_dim)
        h = 1e-3 / max(omega if kind == "sine" else 1.0, 1.0)
        # input Jacobian
        _, _, cache = net.run(params, np.repeat(x[None], shape.output_dim, 0), keep=True)
        _, J = net.backward(params, cache, np.eye(shape.output_dim), want_input=True)
        Jfd = richardson_gradient(lambda z: net.run(params, z[None])[0][0], x, h).T
        # parameter gradient of <a, y> + <A, dy/dx tangents>
        a = rng.standard_normal(shape.output_dim)
        tangents = rng.standard_normal((2, shape.input_dim))
        A = rng.standard_normal((1, 2, shape.output_dim))

        def scalar(p):
            Y, dY, _ = net.run(p, x[None], tangents)
            return float(Y[0] @ a + np.sum(dY * A))

        _, _, cache = net.run(params, x[None], tangents, keep=True)
        gp = net.backward(params, cache, a[None], A)
        gfd = richardson_gradient(scalar, params, h)
        # tangent outputs equal J @ direction
        _, dY, _ = net.run(params, x[None], tangents)
        errs = {"input": _rel(J, Jfd), "param": _rel(gp, gfd), "tangent": _rel(dY[0], tangents @ Jfd.T)}
        for k, e in errs.items():
            if e > worst:
                worst, worst_where = e, f"config {n} ({kind}) {k}"
    # operator ensembles: value gradient w.r.t. (x, t)
    geom = GameGeometry()
    for n in range(10):
        ens = OperatorEnsemble(geom, OperatorConfig(hidden_widths=(8, 8), q=4,
                                                    lattice=LatticeSpec(resolution=(5, 5))), seed=n)
        s = np.array([rng.uniform(20, 60), rng.uniform(16, 30), rng.uniform(20, 60), rng.uniform(16, 30)])
        t = float(rng.uniform(0.2, 2.8))
        th = np.array([[1 + n % 5, 1 + (n * 3) % 5]])
        _, G = ens.value_and_gradient(s[None], np.array([t]), th)
        zfd = richardson_gradient(lambda z: ens.value(z[None, :4], np.array([z[4]]), th)[0],
                                  np.append(s, t), 1e-3).T
        e = _rel(G[0], zfd)
        if e > worst:
            worst, worst_where = e, f"operator {n}"
    ok = worst <= tol
    return CheckResult("gradient correctness", ok,
                       f"max relative error {worst:.2e} (tol {tol:g}) at {worst_where or 'n/a'}",
                       data={"max_rel": worst})


@_timed
def loss_gradient_check(n_params: int = 20, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    """pno_loss parameter gradient against central differences, bundles frozen."""
    from .rollout import rollout_bundles
    geom = GameGeometry()
    rng = np.random.default_rng(seed)
    ens = OperatorEnsemble(geom, OperatorConfig(hidden_widths=(8, 8), q=4,
                                                lattice=LatticeSpec(resolution=(7, 7))), seed=seed)
    params = ens.params + 0.05 * rng.standard_normal(ens.n_params)
    ens = ens.with_params(params)
    thetas = ((1, 1), (5, 5))
    X = sample_box(rng, 40, (25, 50), (15, 32))
    res = PointBatch(X, rng.random(40) * 3.0, sample_thetas(rng, 40, thetas))
    bd = PointBatch(sample_box(rng, 20, (15, 105), (15, 32)), np.full(20, 3.0), sample_thetas(rng, 20, thetas))
    bundles, _ = rollout_bundles(ens, sample_box(rng, 4, (25, 40), (15, 32)), np.full(4, 1.5),
                                 sample_thetas(rng, 4, thetas), RolloutConfig())
    tgt = TargetData.from_bundles(bundles)
    w = LossWeights()
    _, grad, _ = pno_loss(ens, params, res, bd, tgt, w)
    idx = rng.choice(ens.n_params, n_params, replace=False)
    worst = 0.0
    for j in idx:
        h = 1e-6 * max(1.0, abs(params[j]))
        e = np.zeros_like(params)
        e[j] = h
        fd = (pno_loss(ens, params + e, res, bd, tgt, w, need_grad=False)[0]
              - pno_loss(ens, params - e, res, bd, tgt, w, need_grad=False)[0]) / (2 * h)
        worst = max(worst, abs(fd - grad[j]) / max(abs(fd), abs(grad[j]), 1e-3))
    return CheckResult("loss gradient", worst <= tol, f"max relative error {worst:.2e} over {n_params} parameters",
                       data={"max_rel": worst})


@_timed
def hamiltonian_check(n: int = 10000, seed: int = 0, step: float = 1e-4, tol: float = 1e-9) -> CheckResult:
    """clip(lam_v / 2) against a brute-force grid over the control range."""
    geom = GameGeometry()
    rng = np.random.default_rng(seed)
    grid = np.arange(geom.u_min, geom.u_max + 0.5 * step, step)
    grid[-1] = min(grid[-1], geom.u_max)
    worst = -np.inf
    chunk = 50
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        lam = rng.uniform(-40, 40, (m, 4))
        s = np.stack([rng.uniform(15, 105, m), rng.uniform(15, 32, m),
                      rng.uniform(15, 105, m), rng.uniform(15, 32, m)], axis=1)
        th = rng.integers(1, 6, m)
        player = int(start // chunk) % 2
        u_other = rng.uniform(geom.u_min, geom.u_max, m)
        u_star, H_star = game.maximize_hamiltonian(lam, s, th, player, geom, u_other)
        H_grid = game.hamiltonian(lam[:, None, :], s[:, None, :], grid[None, :], u_other[:, None],
                                  th[:, None], player, geom)
        worst = max(worst, float(np.max(H_grid.max(axis=1) - H_star)))
    return CheckResult("hamiltonian argmax", worst <= tol,
                       f"max H(grid) - H(u*) = {worst:.2e} over {n} samples", data={"max_gap": worst})


@_timed
def unconstrained_oracle_check(n: int = 100, seed: int = 0, tol: float = 1e-8) -> CheckResult:
    """Shooting with b = 0 from a zero initial guess against the closed form."""
    geom = GameGeometry(b=0.0)
    rng = np.random.default_rng(seed)
    (dlo, dhi), (vlo, vhi) = X_GT
    cfg = BvpConfig()
    worst = 0.0
    n_conv = 0
    for _ in range(n):
        x0 = np.array([rng.uniform(dlo, dhi), rng.uniform(vlo, vhi), rng.uniform(dlo, dhi), rng.uniform(vlo, vhi)])
        ref = analytic_unconstrained(x0, 0.0, geom)
        num = solve_bvp(x0, 0.0, (1, 1), geom, cfg, initial_costate=np.zeros(8))
        n_conv += num.converged
        a, b = ref.bundle, num.bundle
        err = max(np.max(np.abs(a.states - b.states)), np.max(np.abs(a.lam_tilde - b.lam_tilde)),
                  np.max(np.abs(a.controls - b.controls)),
                  np.max(np.abs(b.lam_tilde[:, 0, 0] - geom.mu)), np.max(np.abs(b.lam_tilde[:, 1, 2] - geom.mu)))
        worst = max(worst, float(err))
    ok = worst <= tol and n_conv == n
    return CheckResult("unconstrained oracle", ok, f"max error {worst:.2e}, converged {n_conv}/{n}",
                       data={"max_err": worst})


@_timed
def dp_consistency_check(n: int = 100, seed: int = 0, tol_value: float = 1e-4,
                         tol_costate: float = 1e-6, ens: OperatorEnsemble | None = None) -> CheckResult:
    """Backward values against fine Simpson quadrature of the running cost, and a
    backward-then-forward costate round trip."""
    geom = GameGeometry()
    rng = np.random.default_rng(seed)
    ens = ens or OperatorEnsemble(geom, OperatorConfig(hidden_widths=(16, 16), q=8), seed=seed)
    rcfg = RolloutConfig()
    x0 = np.stack([rng.uniform(15, 45, n), rng.uniform(15, 32, n), rng.uniform(15, 45, n),
                   rng.uniform(15, 32, n)], axis=1)
    th = sample_thetas(rng, n, ((1, 1), (1, 5), (5, 1), (5, 5), (3, 2)))
    bundles, dense_states, policy = forward_rollout(ens, x0, 0.0, th, rcfg)
    bundles = complete_bundles(bundles, dense_states, policy, geom, rcfg)
    times = bundles[0].times

    def l_plus_c(t):
        X = dense_states(t)                                    # (m, N, 4)
        U = np.stack([policy.controls(X[k], np.full(n, t[k])) for k in range(len(t))])
        return running_cost(X, U, th[None].astype(float), geom)  # (m, N, 2)

    worst_v = 0.0
    sub = 400
    integrals = []
    for k in range(len(times) - 1):
        tt = np.linspace(times[k], times[k + 1], sub + 1)
        f = l_plus_c(tt)
        w = np.ones(sub + 1)
        w[1:-1:2], w[2:-1:2] = 4.0, 2.0
        integrals.append(np.einsum("m,mnp->np", w, f) * (tt[1] - tt[0]) / 3.0)
    integrals = np.array(integrals)                             # (K, N, 2)
    V = np.stack([b.V_tilde for b in bundles], axis=1)           # (K+1, N, 2)
    # every pair (t1, t2) of grid times: V(t1) - V(t2) = -int_{t1}^{t2}
    cum = np.concatenate([np.zeros((1, n, 2)), np.cumsum(integrals, axis=0)])
    for a in range(len(times)):
        diff = (V[a][None] - V[a:]) + (cum[a:] - cum[a][None])
        worst_v = max(worst_v, float(np.max(np.abs(diff))))
    # costate round trip: backward from T, then forward again
    lam = np.stack([b.lam_tilde for b in bundles], axis=1)      # (K+1, N, 2, 4)
    thf = th.astype(float)

    def fwd(t, y):
        X = dense_states(np.array([t]))[0]
        return costate_field(X, y.reshape(n, 2, 4), thf, geom).ravel()

    sol = rk45_integrate(fwd, lam[0].ravel(), (times[0], times[-1]), None, 1e-12, 1e-12, max_step=rcfg.max_step)
    back_err = float(np.max(np.abs(sol.y[-1].reshape(n, 2, 4) - lam[-1])) / max(1.0, np.max(np.abs(lam[-1]))))
    ok = worst_v <= tol_value and back_err <= tol_costate
    return CheckResult("dynamic-programming consistency", ok,
                       f"value gap {worst_v:.2e} (tol {tol_value:g}), costate round trip {back_err:.2e} "
                       f"(tol {tol_costate:g})", data={"value_gap": worst_v, "costate_err": back_err})


@_timed
def evolve_check(steps: int = 50, size: int = 200, seed: int = 0) -> CheckResult:
    """Each evolve step: retained residuals >= pre-step mean (direct filter), pool size restored."""
    rng = np.random.default_rng(seed)

    def residual_fn(X, t, th):
        # deterministic, state-dependent, heavy-tailed residual
        return np.abs(np.sin(X[:, 0] * 0.37 + t * 3.1)) ** 3 * (1 + X[:, 1]) + 1e-3 * th[:, 0]

    def sample_fn(m):
        return (sample_box(rng, m, (15, 105), (15, 32)), np.round(rng.random(m) * 29) / 10,
                sample_thetas(rng, m, ((1, 1), (5, 5))))

    X, t, th = sample_fn(size)
    pool = SamplePool(X, t, th, residual_fn(X, t, th))
    bad = []
    for k in range(steps):
        fresh = residual_fn(pool.states, pool.times, pool.thetas)
        mean = fresh.mean()
        expect_keep = [i for i in range(len(fresh)) if fresh[i] >= mean]
        new, keep, m = evolve_samples(pool, residual_fn, sample_fn)
        kept = np.flatnonzero(keep).tolist()
        if kept != expect_keep or len(new) != size or m != mean \
                or not np.array_equal(new.states[:len(kept)], pool.states[kept]) \
                or np.any(new.residuals[:len(kept)] < mean):
            bad.append(k)
        pool = new
    return CheckResult("evolutionary sampling", not bad,
                       f"{steps - len(bad)}/{steps} steps match the brute-force filter")


@_timed
def curriculum_check() -> CheckResult:
    # k / 10 is the double nearest to the decimal k/10, i.e. the hand value 0.k
    expect = [k / 10 for k in range(1, 31)]
    got = [curriculum_time_window(e, 300, 3.0) for e in range(0, 300, 10)]
    ok = got == expect
    # intermediate epochs hold the window of the last multiple of 10
    hold = all(curriculum_time_window(e, 300, 3.0) == curriculum_time_window(10 * (e // 10), 300, 3.0)
               for e in range(300))
    return CheckResult("curriculum window", ok and hold,
                       f"windows {got[0]:g}..{got[-1]:g}; matches the hand values: {ok}; held between updates: {hold}")


@_timed
def pretrain_check(iters: int = 2000, seed: int = 0, tol_value: float = 5e-2,
                   min_sign: float = 0.95) -> CheckResult:
    """Desk pretraining gate on 1000 held-out terminal states."""
    geom = GameGeometry()
    ens = OperatorEnsemble(geom, OperatorConfig(), seed=seed)
    cfg = TrainConfig(pretrain_iters=iters, seed=seed, theta_training_set=((1, 1), (5, 5)))
    _, report = pretrain(ens, cfg)
    ok = report["value_error"] < tol_value and report["costate_sign_agreement"] >= min_sign
    return CheckResult("pretraining gate", ok,
                       f"boundary error {report['value_error']:.3e} (< {tol_value:g}), "
                       f"costate sign agreement {report['costate_sign_agreement']:.3f} (>= {min_sign:g})",
                       data=report)


def paper_profile_check() -> CheckResult:
    from .config import ALL_PAIRS, RunConfig
    cfg = RunConfig.for_profile("paper")
    n_points = cfg.dataset.count * 31 * 2
    facts = {
        "62k supervised points": n_points == 62000,
        "X_GT box": cfg.dataset.box == ((15.0, 20.0), (18.0, 25.0)) and cfg.evaluator.box == ((15.0, 20.0), (18.0, 25.0)),
        "X_HJ box": tuple(cfg.operator.d_bounds) == (15.0, 105.0) and tuple(cfg.operator.v_bounds) == (15.0, 32.0),
        "5x5 type grid": tuple(cfg.evaluator.theta_pairs) == ALL_PAIRS and len(ALL_PAIRS) == 25,
        "600 cases per pair": cfg.evaluator.n_cases == 600,
        "training pairs": tuple(cfg.trainer.theta_training_set) == ((1, 1), (1, 5), (5, 1), (5, 5)),
        "3x64 tanh nets": tuple(cfg.operator.hidden_widths) == (64, 64, 64) and cfg.operator.activation == "tanh",
        "schedule 50k/300/3000": (cfg.trainer.pretrain_iters, cfg.trainer.train_iters, cfg.trainer.gradient_steps)
        == (50000, 300, 3000),
        "learning rate 2e-5": cfg.trainer.learning_rate == 2e-5 and cfg.trainer.hybrid_learning_rate == 2e-5,
        "1k rollouts": cfg.trainer.n_rollouts == 1000,
    }
    bad = [k for k, v in facts.items() if not v]
    return CheckResult("paper profile setup", not bad, "all setup facts hold" if not bad else f"mismatch: {bad}")


QUICK_CHECKS = (gradient_check, loss_gradient_check, hamiltonian_check, unconstrained_oracle_check,
                dp_consistency_check, evolve_check, curriculum_check, paper_profile_check)


def run_checks(include_pretrain: bool = True, progress=print) -> list:
    results = []
    for fn in QUICK_CHECKS + ((pretrain_check,) if include_pretrain else ()):
        r = fn()
        results.append(r)
        if progress:
            progress(r.line())
    return results
