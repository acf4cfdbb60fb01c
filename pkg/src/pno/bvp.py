"""Open-loop equilibria of the intersection game by single shooting.

Unknowns are the 8 initial costates (4 per player, joint-state order). The
shooting residual is lam_i(T) + grad g_i(x(T)). Collision penalties are
switched on gradually (b = 0, then geometric levels up to the configured b),
each level warm-started from the previous one; the b = 0 level starts from
the closed-form unconstrained solution.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import game
from .game import GameGeometry
from .integrate import IntegrationError, rk45_integrate
from .rollout import TrajectoryBundle, backward_value, costate_field, time_grid
from .trainer import TargetData

log = logging.getLogger(__name__)

X_GT = ((15.0, 20.0), (18.0, 25.0))


@dataclass
class BvpConfig:
    levels: int = 8
    first_level_ratio: float = 1e-3
    restarts: int = 5
    max_newton: int = 25
    tol: float = 1e-6
    rk_rel_tol: float = 1e-10
    rk_abs_tol: float = 1e-10
    final_rk_tol: float = 1e-12
    polish_tol: float = 1e-11         # Newton continues toward this once the final level converges
    # away from the zone the system is polynomial in time and the error
    # estimate vanishes; without a cap a step can jump over the whole zone
    max_step: float = 0.05
    max_refinements: int = 6
    min_damping: float = 1e-3
    explore_final: int = 0
    predictor: bool = True
    fd_step: float = 1e-6
    dt_grid: float = 0.1
    perturb_scale: float = 0.5
    seed: int = 0


def continuation_schedule(b_final: float, levels: int = 8, first_ratio: float = 1e-3) -> np.ndarray:
    """0 followed by ``levels - 1`` geometric penalty levels ending at ``b_final``."""
    if b_final == 0:
        return np.zeros(1)
    if levels < 2:
        return np.array([0.0, float(b_final)])
    return np.concatenate([[0.0], np.geomspace(b_final * first_ratio, b_final, levels - 1)])


@dataclass
class BvpSolution:
    bundle: TrajectoryBundle
    residual_norm: float
    converged: bool
    costate0: np.ndarray                 # (8,)
    trace: list = field(default_factory=list)
    dense: object = None                 # t -> (P=1, 12) state/costate
    alternatives: list = field(default_factory=list)

    @property
    def accumulated_penalty(self) -> np.ndarray:
        """int c_i dt for both players along the solution (Gauss-Legendre on dense output)."""
        return self.bundle.meta.get("penalty_integral", np.full(2, np.nan))


# -- closed form ------------------------------------------------------------------

def _analytic_player(d0, v0, t0, geom: GameGeometry):
    tau = geom.T - t0
    mu = geom.mu
    a = (-2.0 * (v0 - geom.v_bar) - mu * tau ** 2 / 2.0) / (1.0 + tau)   # lam_v(T)

    def at(t):
        s = np.asarray(t, float) - t0
        lam_v = a + mu * (tau - s)
        u = lam_v / 2.0
        v = v0 + (a + mu * tau) * s / 2.0 - mu * s ** 2 / 4.0
        d = d0 + v0 * s + (a + mu * tau) * s ** 2 / 4.0 - mu * s ** 3 / 12.0
        return d, v, np.full(np.shape(s), mu), lam_v, u
    return at, a


def analytic_unconstrained(x0, t0: float, geom: GameGeometry, cfg: BvpConfig | None = None,
                           thetas=(1, 1)) -> BvpSolution:
    """Closed-form equilibrium with c = 0: lam_d = mu, lam_v affine, u = lam_v / 2.

    Falls back to numerical shooting (with b = 0) if the control would clip.
    """
    cfg = cfg or BvpConfig()
    geom0 = geom.replace(b=0.0)
    x0 = np.asarray(x0, float)
    parts = [_analytic_player(x0[0], x0[1], t0, geom0), _analytic_player(x0[2], x0[3], t0, geom0)]
    for at, _ in parts:
        u_ends = at(np.array([t0, geom.T]))[4]
        if np.any(u_ends < geom.u_min) or np.any(u_ends > geom.u_max):
            return solve_bvp(x0, t0, thetas, geom0, cfg)

    def dense(t):
        t = np.atleast_1d(np.asarray(t, float))
        Y = np.zeros((len(t), 12))
        for i, (at, _) in enumerate(parts):
            d, v, lam_d, lam_v, _ = at(t)
            Y[:, 2 * i], Y[:, 2 * i + 1] = d, v
            Y[:, 4 + 4 * i + 2 * i] = lam_d
            Y[:, 4 + 4 * i + 2 * i + 1] = lam_v
        return Y

    y0 = dense(t0)[0]
    sol = _package(dense, x0, t0, thetas, geom0, cfg, y0[4:], 0.0, True, [])
    return sol


# -- shooting ---------------------------------------------------------------------

def _field(thetas, geom: GameGeometry, P: int):
    """Right-hand side of the joint state/costate system for P stacked guesses.

    Sigmoid terms are evaluated once per call for both positions and both type
    shifts (own type, and type 1 for the other player's factor).
    """
    th = np.asarray(thetas, float).reshape(2)
    gam = geom.gamma
    # columns: (position j, shift) with shift 0 = own type, 1 = type 1
    lo = np.array([[geom.R / 2.0 - th[0] * geom.W / 2.0, geom.R / 2.0 - geom.W / 2.0],
                   [geom.R / 2.0 - th[1] * geom.W / 2.0, geom.R / 2.0 - geom.W / 2.0]])
    hi = (geom.R + geom.W) / 2.0 + geom.L
    out = np.empty((P, 12))

    def f(t, y):
        Y = y.reshape(P, 12)
        d = Y[:, 0:3:2]                                       # (P, 2)
        e1 = expit(gam * (d[:, :, None] - lo[None]))          # (P, 2, 2)
        e2 = expit(gam * (d - hi))[:, :, None]
        sig = e1 * (1.0 - e2)
        dsig = gam * sig * (1.0 - e1 - e2)
        b = geom.b
        out[:, 0] = Y[:, 1]
        out[:, 2] = Y[:, 3]
        out[:, 1] = np.clip(Y[:, 5] / 2.0, geom.u_min, geom.u_max)
        out[:, 3] = np.clip(Y[:, 11] / 2.0, geom.u_min, geom.u_max)
        # player 1 costate (indices 4..7): c1 = b sig(d1, th1) sig(d2, 1)
        out[:, 4] = b * dsig[:, 0, 0] * sig[:, 1, 1]
        out[:, 6] = b * sig[:, 0, 0] * dsig[:, 1, 1]
        out[:, 5] = -Y[:, 4]
        out[:, 7] = -Y[:, 6]
        # player 2 costate (indices 8..11): c2 = b sig(d2, th2) sig(d1, 1)
        out[:, 8] = b * sig[:, 1, 0] * dsig[:, 0, 1]
        out[:, 10] = b * dsig[:, 1, 0] * sig[:, 0, 1]
        out[:, 9] = -Y[:, 8]
        out[:, 11] = -Y[:, 10]
        return out.ravel().copy()
    return f


def shoot(ps: np.ndarray, x0, t0: float, thetas, geom: GameGeometry, cfg: BvpConfig):
    """Terminal residuals for a batch of initial-costate guesses ``ps`` (P, 8).

    Returns (residuals (P, 8), solution); residuals are inf if integration fails.
    """
    ps = np.atleast_2d(ps)
    P = len(ps)
    y0 = np.concatenate([np.broadcast_to(np.asarray(x0, float), (P, 4)), ps], axis=1)
    try:
        with np.errstate(over="raise", invalid="raise"):
            sol = rk45_integrate(_field(thetas, geom, P), y0.ravel(), (t0, geom.T), None,
                                 cfg.rk_rel_tol, cfg.rk_abs_tol, max_step=cfg.max_step)
    except (IntegrationError, FloatingPointError):
        return np.full((P, 8), np.inf), None
    YT = sol.y[-1].reshape(P, 12)
    XT = YT[:, :4]
    res = np.concatenate([YT[:, 4:8] + game.terminal_state_gradient(XT, 0, geom),
                          YT[:, 8:12] + game.terminal_state_gradient(XT, 1, geom)], axis=1)
    return res, sol


def _newton(p, x0, t0, thetas, geom, cfg: BvpConfig, rk_tol: float, tol: float | None = None):
    """Damped Newton with forward-difference Jacobian and Armijo backtracking.

    Returns (p, F, converged, residual history).
    """
    c = replace(cfg, rk_rel_tol=rk_tol, rk_abs_tol=rk_tol)
    tol = cfg.tol if tol is None else tol
    F = shoot(p, x0, t0, thetas, geom, c)[0][0]
    hist = [float(np.max(np.abs(F)))]
    for _ in range(cfg.max_newton):
        if not np.all(np.isfinite(F)):
            break
        if np.max(np.abs(F)) <= tol:
            return p, F, True, hist
        h = cfg.fd_step * np.maximum(1.0, np.abs(p))
        R = shoot(p[None] + np.diag(h), x0, t0, thetas, geom, c)[0]
        if not np.all(np.isfinite(R)):
            break
        J = (R - F).T / h
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -F, rcond=None)[0]
        f0 = np.linalg.norm(F)
        alpha, accepted = 1.0, False
        while alpha >= cfg.min_damping:
            trial = p + alpha * step
            Ft = shoot(trial, x0, t0, thetas, geom, c)[0][0]
            if np.all(np.isfinite(Ft)) and np.linalg.norm(Ft) <= (1.0 - 1e-4 * alpha) * f0:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        p, F = trial, Ft
        hist.append(float(np.max(np.abs(F))))
    conv = bool(np.all(np.isfinite(F)) and np.max(np.abs(F)) <= tol)
    return p, F, conv, hist


def _residual_norm(F) -> float:
    return float(np.max(np.abs(F))) if np.all(np.isfinite(F)) else np.inf


def solve_bvp(x0, t0: float, thetas, geom: GameGeometry, cfg: BvpConfig | None = None,
              schedule: np.ndarray | None = None, initial_costate=None) -> BvpSolution:
    """Equilibrium trajectory from (x0, t0) for the type pair ``thetas``.

    Levels of ``schedule`` are solved in order. A level whose Newton run stalls
    is first split at the geometric mean of the last solved penalty and its own
    (up to ``cfg.max_refinements`` times); after that, perturbed restarts are
    tried. Intermediate levels use ``rk_rel_tol``; the final level uses the
    tighter ``final_rk_tol`` because the terminal mismatch is sensitive to
    integration error when trajectories skirt the collision zone.
    ``initial_costate`` (8,) replaces the closed-form unconstrained start.
    """
    cfg = cfg or BvpConfig()
    x0 = np.asarray(x0, float)
    if schedule is None:
        schedule = continuation_schedule(geom.b, cfg.levels, cfg.first_level_ratio)
    schedule = np.asarray(schedule, float)
    rng = np.random.default_rng([cfg.seed, *np.round(np.abs(x0) * 1e6).astype(np.int64).tolist(),
                                 int(round(abs(t0) * 1e6)), *map(int, thetas)])
    p = (_analytic_costate0(x0, t0, geom) if initial_costate is None
         else np.asarray(initial_costate, float).copy())
    trace = []
    pending = list(schedule)
    solved_b = None
    solved = []
    F = np.full(8, np.inf)
    refinements = 0
    converged = False
    alternatives = []
    while pending:
        b = pending[0]
        final = len(pending) == 1
        rk_tol = cfg.final_rk_tol if final else cfg.rk_rel_tol
        g = geom.replace(b=float(b))
        if cfg.predictor and len(solved) >= 2 and solved[-1][0] > 0 and solved[-2][0] > 0:
            # secant extrapolation of the initial costate in log(b)
            (b1, p1), (b2, p2) = solved[-2], solved[-1]
            w = np.log(b / b2) / np.log(b2 / b1)
            guess = p2 + w * (p2 - p1)
            if _residual_norm(shoot(guess, x0, t0, thetas, g, replace(cfg, rk_rel_tol=rk_tol, rk_abs_tol=rk_tol))[0][0]) < \
                    _residual_norm(shoot(p, x0, t0, thetas, g, replace(cfg, rk_rel_tol=rk_tol, rk_abs_tol=rk_tol))[0][0]):
                p = guess
        start = _residual_norm(shoot(p, x0, t0, thetas, g, replace(cfg, rk_rel_tol=rk_tol, rk_abs_tol=rk_tol))[0][0])
        q, Fq, ok, hist = _newton(p, x0, t0, thetas, g, cfg, rk_tol)
        entry = {"b": float(b), "start_residual": start, "residual": _residual_norm(Fq),
                 "newton_iters": len(hist) - 1, "restarts": 0, "converged": ok}
        if not ok and solved_b is not None and refinements < cfg.max_refinements and b > 0:
            trace.append({**entry, "refined": True})
            mid = float(np.sqrt(max(solved_b, b * cfg.first_level_ratio) * b))
            pending.insert(0, mid)
            refinements += 1
            continue
        if not ok:
            best = (q, Fq, hist)
            for attempt in range(1, cfg.restarts + 1):
                guess = p + cfg.perturb_scale * rng.standard_normal(8) * (1.0 + np.abs(p))
                q2, F2, ok2, hist2 = _newton(guess, x0, t0, thetas, g, cfg, rk_tol)
                if _residual_norm(F2) < _residual_norm(best[1]):
                    best = (q2, F2, hist2)
                entry["restarts"] = attempt
                if ok2:
                    ok = True
                    break
            q, Fq, hist = best
            entry.update(residual=_residual_norm(Fq), newton_iters=len(hist) - 1, converged=ok)
        trace.append(entry)
        if np.all(np.isfinite(Fq)):
            p, F = q, Fq
        if not ok:
            log.info("BVP stalled at b=%.4g for x0=%s: residual %.3g", b, x0, entry["residual"])
            break
        solved_b = b
        solved.append((b, p.copy()))
        pending.pop(0)
        if not pending:
            converged = True
    if converged and cfg.explore_final > 0:
        p, F, alternatives = _explore(p, F, x0, t0, thetas, geom.replace(b=float(schedule[-1])), cfg, rng)
    g = geom.replace(b=float(schedule[-1]))
    if converged and cfg.polish_tol < cfg.tol:
        q, Fq, _, _ = _newton(p, x0, t0, thetas, g, cfg, cfg.final_rk_tol, cfg.polish_tol)
        if _residual_norm(Fq) < _residual_norm(F):
            p, F = q, Fq
    cf = replace(cfg, rk_rel_tol=cfg.final_rk_tol, rk_abs_tol=cfg.final_rk_tol)
    _, sol = shoot(p, x0, t0, thetas, g, cf)
    if sol is None:
        raise IntegrationError(t0, "final shooting pass failed")
    dense = lambda t: sol.dense(t)  # noqa: E731
    out = _package(dense, x0, t0, thetas, g, cfg, p, _residual_norm(F), converged, trace)
    out.alternatives = alternatives
    return out


def _explore(p, F, x0, t0, thetas, g, cfg, rng):
    """Extra perturbed starts at the final level; keep the largest value sum.

    Returns (p, F, alternatives) where alternatives lists the distinct converged
    initial costates with their value sums.
    """
    def value_sum(q):
        sol = _package(shoot(q, x0, t0, thetas, g, replace(cfg, rk_rel_tol=cfg.final_rk_tol,
                                                                 rk_abs_tol=cfg.final_rk_tol))[1].dense,
                       x0, t0, thetas, g, cfg, q, 0.0, True, [])
        return float(np.sum(sol.bundle.V_tilde[0]))

    found = [(p, F, value_sum(p))]
    for _ in range(cfg.explore_final):
        guess = p + cfg.perturb_scale * rng.standard_normal(8) * (1.0 + np.abs(p))
        q, Fq, ok, _ = _newton(guess, x0, t0, thetas, g, cfg, cfg.final_rk_tol)
        if ok and all(np.max(np.abs(q - f[0])) > 1e-4 * (1.0 + np.max(np.abs(f[0]))) for f in found):
            found.append((q, Fq, value_sum(q)))
    if len(found) > 1:
        log.info("multiple equilibria (%d) for x0=%s", len(found), x0)
    best = max(found, key=lambda f: f[2])
    return best[0], best[1], [{"costate0": f[0].tolist(), "value_sum": f[2]} for f in found]


def _analytic_costate0(x0, t0, geom):
    p = np.zeros(8)
    for i in (0, 1):
        _, a = _analytic_player(x0[2 * i], x0[2 * i + 1], t0, geom)
        p[4 * i + 2 * i] = geom.mu
        p[4 * i + 2 * i + 1] = a + geom.mu * (geom.T - t0)
    return p


def _package(dense, x0, t0, thetas, geom, cfg, p, res_norm, converged, trace) -> BvpSolution:
    ts = time_grid(t0, geom.T, cfg.dt_grid)
    Y = np.asarray(dense(ts)).reshape(len(ts), 12)
    X = Y[:, :4].copy()
    lam = Y[:, 4:].reshape(len(ts), 2, 4).copy()
    U = game.optimal_control(np.stack([lam[:, 0, 1], lam[:, 1, 3]], axis=1), geom)

    def xu(t):
        Yq = np.asarray(dense(t)).reshape(len(t), 12)
        Uq = game.optimal_control(np.stack([Yq[:, 5], Yq[:, 11]], axis=1), geom)
        return Yq[:, None, :4], Uq[:, None, :]

    V = backward_value(ts, X[:, None], U[:, None], thetas, geom, xu, 10)[:, 0]
    # accumulated penalty for collision bookkeeping
    g_only = geom  # penalty integral on a fine grid
    Xq, Uq = xu(np.linspace(t0, geom.T, 3001))
    pen = np.stack([game.penalty(Xq[:, 0], thetas[i], i, g_only) for i in (0, 1)], axis=1)
    pen_int = np.trapezoid(pen, dx=(geom.T - t0) / 3000, axis=0)
    bundle = TrajectoryBundle(ts, X, U, tuple(int(v) for v in thetas), lam_hat=lam,
                              lam_tilde=lam, V_tilde=V, in_bounds=np.ones(len(ts), bool),
                              meta={"penalty_integral": pen_int, "x0": np.asarray(x0), "t0": t0})
    return BvpSolution(bundle, res_norm, bool(converged), np.asarray(p, float), trace, dense)


def control_function(sol: BvpSolution, geom: GameGeometry):
    """Open-loop control u(t) (2,) from a solution's continuous costates."""
    def u(t):
        Y = np.asarray(sol.dense(np.atleast_1d(t))).reshape(-1, 12)
        return game.optimal_control(np.stack([Y[:, 5], Y[:, 11]], axis=1), geom)
    return u


# -- datasets ---------------------------------------------------------------------

@dataclass
class SupervisedDataset:
    data: TargetData
    case_ids: np.ndarray
    bundles: list
    manifest: dict

    @property
    def n_records(self) -> int:
        return 2 * len(self.data)


def sample_initial_states(rng, count: int, box=X_GT) -> np.ndarray:
    (dlo, dhi), (vlo, vhi) = box
    lo = np.array([dlo, vlo, dlo, vlo])
    hi = np.array([dhi, vhi, dhi, vhi])
    return lo + (hi - lo) * rng.random((count, 4))


def _solve_case(args):
    x0, th, geom, cfg = args
    try:
        return solve_bvp(x0, 0.0, th, geom, cfg)
    except IntegrationError as exc:
        log.info("BVP failed for %s: %s", x0, exc)
        return None


def generate_dataset(count: int, theta_set, geom: GameGeometry, seed: int,
                     cfg: BvpConfig | None = None, box=X_GT, jobs: int = 1) -> SupervisedDataset:
    """Uniform initial states in ``box`` at t0 = 0, type pairs assigned round-robin."""
    if count <= 0:
        raise ValueError("count must be positive")
    cfg = cfg or BvpConfig(seed=seed)
    rng = np.random.default_rng(seed)
    X0 = sample_initial_states(rng, count, box)
    thetas = [tuple(theta_set[n % len(theta_set)]) for n in range(count)]
    args = [(X0[n], thetas[n], geom, cfg) for n in range(count)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            sols = list(ex.map(_solve_case, args))
    else:
        sols = [_solve_case(a) for a in args]
    bundles, ids = [], []
    failed = []
    for n, s in enumerate(sols):
        if s is None or not s.converged:
            failed.append(n)
            continue
        s.bundle.case_id = n
        bundles.append(s.bundle)
        ids.append(n)
    if bundles:
        cat = np.concatenate
        data = TargetData(cat([b.states for b in bundles]), cat([b.times for b in bundles]),
                          cat([np.repeat(np.array(b.thetas)[None], len(b.times), 0) for b in bundles]).astype(int),
                          cat([b.V_tilde for b in bundles]), cat([b.lam_tilde for b in bundles]))
        case_ids = cat([np.full(len(b.times), b.case_id) for b in bundles])
    else:
        data, case_ids = TargetData.empty(), np.zeros(0, int)
    manifest = {
        "count": count,
        "converged": len(bundles),
        "failed_cases": failed,
        "convergence_rate": len(bundles) / count,
        "n_records": 2 * len(data),
        "seed": seed,
        "box": [list(box[0]), list(box[1])],
        "thetas": {str(n): list(thetas[n]) for n in range(count)},
        "geometry": geom.to_dict(),
        "geometry_hash": hashlib.sha256(json.dumps(geom.to_dict(), sort_keys=True).encode()).hexdigest()[:16],
    }
    return SupervisedDataset(data, case_ids, bundles, manifest)


def dataset_from_bundles(bundles, thetas_by_case: dict) -> TargetData:
    """Rebuild targets from trajectory-CSV bundles and the manifest's type map."""
    if not bundles:
        return TargetData.empty()
    cat = np.concatenate
    th = cat([np.repeat(np.array(thetas_by_case[str(b.case_id)])[None], len(b.times), 0) for b in bundles])
    return TargetData(cat([b.states for b in bundles]), cat([b.times for b in bundles]), th.astype(int),
                      cat([b.V_tilde for b in bundles]), cat([b.lam_tilde for b in bundles]))
