"""Characteristic rollouts: forward states under the costate-net policy, backward
costates along the frozen state trajectory, and backward values by quadrature."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import game
from .game import GameGeometry
from .integrate import IntegrationError, rk45_integrate

# 4-point Gauss-Legendre on [0, 1]
_GL_X, _GL_W = np.polynomial.legendre.leggauss(4)
_GL_X = (_GL_X + 1.0) / 2.0
_GL_W = _GL_W / 2.0

CSV_COLUMNS = (["case_id", "t", "d1", "v1", "d2", "v2", "u1", "u2"]
               + [f"lam{i}_{c}" for i in (1, 2) for c in ("d1", "v1", "d2", "v2")]
               + ["V1", "V2", "in_bounds"])


@dataclass
class RolloutConfig:
    dt_grid: float = 0.1
    rk_rel_tol: float = 1e-6
    rk_abs_tol: float = 1e-8
    costate_rel_tol: float = 1e-10     # backward costate pass (cheap, linear in the costate)
    costate_abs_tol: float = 1e-10
    d_bounds: tuple = (15.0, 105.0)
    v_bounds: tuple = (15.0, 32.0)
    terminal_from_g: bool = False
    quad_refine: int = 10
    # cap on backward-costate steps so the collision zone cannot be stepped over
    max_step: float = 0.05


@dataclass
class TrajectoryBundle:
    times: np.ndarray              # (K+1,)
    states: np.ndarray             # (K+1, 4)
    controls: np.ndarray           # (K+1, 2)
    thetas: tuple
    lam_hat: np.ndarray | None = None     # (K+1, 2, 4) costate-net predictions
    lam_tilde: np.ndarray | None = None   # (K+1, 2, 4) backward costates
    V_tilde: np.ndarray | None = None     # (K+1, 2) backward values
    in_bounds: np.ndarray | None = None   # (K+1,) bool
    case_id: int = 0
    meta: dict = field(default_factory=dict)


def time_grid(t0: float, T: float, dt: float) -> np.ndarray:
    K = int(round((T - t0) / dt))
    if K < 1 or abs(K * dt - (T - t0)) > 1e-9:
        raise ValueError(f"dt={dt} does not divide [{t0}, {T}]")
    ts = t0 + dt * np.arange(K + 1)
    ts[-1] = T
    return ts


def in_box(states: np.ndarray, d_bounds, v_bounds) -> np.ndarray:
    s = np.asarray(states)
    d = s[..., [0, 2]]
    v = s[..., [1, 3]]
    ok = (d >= d_bounds[0]) & (d <= d_bounds[1]) & (v >= v_bounds[0]) & (v <= v_bounds[1])
    return ok.all(axis=-1)


class CostatePolicy:
    """Feedback controls u_i = clip(lam_hat_i,v_i / 2) with branch outputs cached."""

    def __init__(self, ens, thetas):
        self.ens = ens
        th = np.asarray(thetas, dtype=int)
        self.uniq, self.bits, self.idx = ens.group_thetas(th, len(th))
        self.n = len(th)

    def costate(self, X: np.ndarray, t) -> np.ndarray:
        ens = self.ens
        Zn = ens.trunk_inputs(X, t)
        idx = np.tile(self.idx, len(Zn) // self.n) if len(Zn) != self.n else self.idx
        return np.stack([ens._operator(ens.params, i, "costate", self.bits, idx, Zn, False, False)[0]
                         for i in (0, 1)], axis=1)

    def controls(self, X: np.ndarray, t) -> np.ndarray:
        lam = self.costate(X, t)
        return game.optimal_control(np.stack([lam[:, 0, 1], lam[:, 1, 3]], axis=1), self.ens.geom)


def forward_rollout(ens, x0, t0: float, thetas, cfg: RolloutConfig):
    """Closed-loop rollouts of N initial states that share the start time ``t0``.

    The costate net is re-queried at every integrator stage. Returns
    (list of bundles with states/controls/lam_hat, dense state interpolant,
    policy) so that backward passes can reuse the continuous trajectory.
    """
    geom = ens.geom
    x0 = np.atleast_2d(np.asarray(x0, float))
    N = len(x0)
    thetas = np.broadcast_to(np.asarray(thetas, dtype=int), (N, 2))
    if not 0.0 <= t0 < geom.T:
        raise ValueError("t0 must lie in [0, T)")
    ts = time_grid(t0, geom.T, cfg.dt_grid)
    pol = CostatePolicy(ens, thetas)

    def field_fn(t, y):
        X = y.reshape(N, 4)
        u = pol.controls(X, min(max(t, 0.0), geom.T))
        return game.dynamics(X, u[:, 0], u[:, 1]).ravel()

    sol = rk45_integrate(field_fn, x0.ravel(), (t0, geom.T), ts, cfg.rk_rel_tol, cfg.rk_abs_tol)
    S = sol.y.reshape(len(ts), N, 4)
    flat = S.reshape(-1, 4)
    tt = np.repeat(ts, N)
    idx_rep = np.tile(pol.idx, len(ts))
    Zn = ens.trunk_inputs(flat, tt)
    lam = np.stack([ens._operator(ens.params, i, "costate", pol.bits, idx_rep, Zn, False, False)[0]
                    for i in (0, 1)], axis=1).reshape(len(ts), N, 2, 4)
    U = game.optimal_control(np.stack([lam[..., 0, 1], lam[..., 1, 3]], axis=-1), geom)
    ok = in_box(S, cfg.d_bounds, cfg.v_bounds)
    bundles = [TrajectoryBundle(ts.copy(), S[:, n], U[:, n], tuple(int(v) for v in thetas[n]),
                                lam_hat=lam[:, n], in_bounds=ok[:, n], case_id=n)
               for n in range(N)]

    def dense_states(t):
        return sol.dense(t).reshape(np.size(t), N, 4)

    return bundles, dense_states, pol


def costate_field(X: np.ndarray, lam: np.ndarray, thetas: np.ndarray, geom: GameGeometry) -> np.ndarray:
    """lam_dot for both players: d-components get dc/dd, v-components get -lam_d."""
    out = np.empty_like(lam)
    for i in (0, 1):
        dc = game.penalty_state_gradient(X, thetas[:, i], i, geom)
        out[:, i, 0] = dc[:, 0]
        out[:, i, 2] = dc[:, 2]
        out[:, i, 1] = -lam[:, i, 0]
        out[:, i, 3] = -lam[:, i, 2]
    return out


def backward_costate(dense_states, times: np.ndarray, terminal: np.ndarray, thetas,
                     geom: GameGeometry, cfg: RolloutConfig):
    """Integrate the costate ODE from T back to times[0] along frozen states.

    ``dense_states(t)`` returns (len(t), N, 4); ``terminal`` is (N, 2, 4).
    Returns (lam_tilde on ``times`` with shape (K+1, N, 2, 4), solution object).
    """
    terminal = np.asarray(terminal, float)
    N = terminal.shape[0]
    thetas = np.broadcast_to(np.asarray(thetas, float), (N, 2))

    def field_fn(t, y):
        X = dense_states(np.array([t]))[0]
        return costate_field(X, y.reshape(N, 2, 4), thetas, geom).ravel()

    rev = times[::-1]
    sol = rk45_integrate(field_fn, terminal.ravel(), (times[-1], times[0]), rev,
                         cfg.costate_rel_tol, cfg.costate_abs_tol, max_step=cfg.max_step)
    lam = sol.y[::-1].reshape(len(times), N, 2, 4)
    return lam, sol


def running_cost(X: np.ndarray, U: np.ndarray, thetas: np.ndarray, geom: GameGeometry) -> np.ndarray:
    """l_i + c_i for both players; X (..., 4), U (..., 2), thetas broadcastable to (..., 2)."""
    thetas = np.asarray(thetas, float)
    th = np.broadcast_to(thetas, U.shape)
    return np.stack([U[..., i] ** 2 + game.penalty(X, th[..., i], i, geom) for i in (0, 1)], axis=-1)


def backward_value(times: np.ndarray, states: np.ndarray, controls: np.ndarray, thetas,
                   geom: GameGeometry, dense=None, refine: int = 10) -> np.ndarray:
    """Backward values -(int_t^T (l_i + c_i) ds + g_i(x(T))) on the time grid.

    ``states`` (K+1, N, 4) and ``controls`` (K+1, N, 2); a single trajectory may
    be passed as (K+1, 4)/(K+1, 2). When ``dense(t) -> (X, U)`` is supplied the
    running cost is integrated by composite 4-point Gauss-Legendre with
    ``refine`` panels per grid interval; otherwise by the trapezoid rule on the
    grid. Returns (K+1, N, 2) (or (K+1, 2)).
    """
    single = np.ndim(states) == 2
    S = np.asarray(states, float)
    Uc = np.asarray(controls, float)
    if single:
        S, Uc = S[:, None], Uc[:, None]
    K1, N = S.shape[:2]
    th = np.broadcast_to(np.asarray(thetas, float), (N, 2))
    if dense is None:
        rc = running_cost(S, Uc, th[None], geom)                    # (K+1, N, 2)
        seg = 0.5 * (rc[1:] + rc[:-1]) * np.diff(times)[:, None, None]
    else:
        h = np.diff(times)                                          # (K,)
        edges = times[:-1, None] + h[:, None] * np.arange(refine)[None, :] / refine
        nodes = edges[..., None] + (h[:, None, None] / refine) * _GL_X[None, None, :]
        Xq, Uq = dense(nodes.ravel())
        rc = running_cost(Xq, Uq, th[None], geom).reshape(len(h), refine, len(_GL_X), N, 2)
        seg = np.einsum("krgnp,g->knp", rc, _GL_W) * (h / refine)[:, None, None]
    V = np.empty((K1, N, 2))
    gT = np.stack([game.terminal_loss(S[-1], i, geom) for i in (0, 1)], axis=-1)
    V[-1] = -gT
    tail = np.cumsum(seg[::-1], axis=0)[::-1]                        # int_{t_k}^T
    V[:-1] = -(tail + gT[None])
    return V[:, 0] if single else V


def complete_bundles(bundles, dense_states, policy, geom: GameGeometry, cfg: RolloutConfig,
                     terminal=None):
    """Fill lam_tilde and V_tilde for bundles produced by one forward_rollout call."""
    times = bundles[0].times
    N = len(bundles)
    if terminal is None:
        if cfg.terminal_from_g:
            XT = np.stack([b.states[-1] for b in bundles])
            terminal = -np.stack([game.terminal_state_gradient(XT, i, geom) for i in (0, 1)], axis=1)
        else:
            terminal = np.stack([b.lam_hat[-1] for b in bundles])
    thetas = np.array([b.thetas for b in bundles], float)
    lam, _ = backward_costate(dense_states, times, terminal, thetas, geom, cfg)
    S = np.stack([b.states for b in bundles], axis=1)
    U = np.stack([b.controls for b in bundles], axis=1)

    def dense(t):
        X = dense_states(t)
        Uq = policy.controls(X.reshape(-1, 4), np.repeat(t, N)).reshape(len(t), N, 2)
        return X, Uq

    V = backward_value(times, S, U, thetas, geom, dense, cfg.quad_refine)
    for n, b in enumerate(bundles):
        b.lam_tilde = lam[:, n]
        b.V_tilde = V[:, n]
    return bundles


def rollout_bundles(ens, x0, t0s, thetas, cfg: RolloutConfig, log=None):
    """Rollouts for many initial (x, t, theta); groups by start time.

    Groups that fail to integrate are skipped and reported through ``log``.
    Returns (bundles, n_failed).
    """
    x0 = np.atleast_2d(np.asarray(x0, float))
    t0s = np.asarray(t0s, float)
    thetas = np.asarray(thetas, dtype=int)
    out, failed = [], 0
    keys = np.round(t0s / cfg.dt_grid).astype(int)
    for key in np.unique(keys):
        sel = np.flatnonzero(keys == key)
        t0 = key * cfg.dt_grid
        try:
            bundles, dense_states, pol = forward_rollout(ens, x0[sel], t0, thetas[sel], cfg)
            complete_bundles(bundles, dense_states, pol, ens.geom, cfg)
        except (IntegrationError, FloatingPointError) as exc:
            failed += len(sel)
            if log is not None:
                log(f"rollout group t0={t0:.2f} ({len(sel)} cases) failed: {exc}")
            continue
        for b, n in zip(bundles, sel):
            b.case_id = int(n)
        out.extend(bundles)
    out.sort(key=lambda b: b.case_id)
    return out, failed


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_trajectory_csv(path, bundles, header: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in sorted(header.items())) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for b in bundles:
            lam = b.lam_tilde if b.lam_tilde is not None else np.full((len(b.times), 2, 4), np.nan)
            V = b.V_tilde if b.V_tilde is not None else np.full((len(b.times), 2), np.nan)
            ok = b.in_bounds if b.in_bounds is not None else np.ones(len(b.times), bool)
            for k, t in enumerate(b.times):
                row = [b.case_id, _fmt(t), *map(_fmt, b.states[k]), *map(_fmt, b.controls[k]),
                       *map(_fmt, lam[k].ravel()), *map(_fmt, V[k]), int(ok[k])]
                w.writerow(row)


def read_trajectory_csv(path) -> list:
    rows: dict = {}
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for r in csv.DictReader(lines):
        rows.setdefault(int(r["case_id"]), []).append(r)
    out = []
    for cid, rs in rows.items():
        def col(*names):
            return np.array([[float(r[n]) for n in names] for r in rs])
        lam = col(*CSV_COLUMNS[8:16]).reshape(-1, 2, 4)
        out.append(TrajectoryBundle(col("t")[:, 0], col("d1", "v1", "d2", "v2"), col("u1", "u2"),
                                    (0, 0), lam_tilde=lam, V_tilde=col("V1", "V2"),
                                    in_bounds=col("in_bounds")[:, 0].astype(bool), case_id=cid))
    return out
