"""Losses and training loops for the costate-regularized operator and the
BVP-supervised hybrid baseline."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import game
from .game import GameGeometry
from .nets import AdamState, optimizer_step
from .operator import OperatorEnsemble
from .rollout import RolloutConfig, rollout_bundles

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["iter", "loss_total", "loss_pde", "loss_bc", "loss_C2", "loss_C3", "loss_C4",
                  "loss_C5", "mean_residual", "window_T"]

DEFAULT_THETAS = ((1, 1), (1, 5), (5, 1), (5, 5))


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str):
        super().__init__(f"non-finite loss in term {term!r}")
        self.term = term


class DivergenceError(RuntimeError):
    pass


class RolloutFailureError(RuntimeError):
    pass


@dataclass
class LossWeights:
    C1: float = 1.0
    C2: float = 1.0
    C3: float = 1.0
    C4: float = 1.0
    C5: float = 1.0

    def __post_init__(self):
        if min(self.C1, self.C2, self.C3, self.C4, self.C5) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class TrainConfig:
    pretrain_iters: int = 2000
    pretrain_batch: int = 256
    pretrain_lr: float = 1e-3
    train_iters: int = 30
    gradient_steps: int = 100
    n_rollouts: int = 64
    n_residual: int = 1000
    n_boundary: int = 500
    learning_rate: float = 1e-3
    lr_final: float = 1e-6
    lr_schedule: str = "cosine"       # or "constant"
    resample_period: int = 10
    theta_training_set: tuple = DEFAULT_THETAS
    d_bounds: tuple = (15.0, 105.0)
    v_bounds: tuple = (15.0, 32.0)
    window_mode: str = "forward"      # forward: [0, w]; backward: [T - w, T]
    probe_size: int = 512
    max_failure_fraction: float = 0.5
    hybrid_stage1_iters: int = 2000
    hybrid_stage2_iters: int = 1000
    hybrid_batch: int = 1024
    hybrid_costate_targets: bool = True
    hybrid_learning_rate: float = 1e-3
    hybrid_lr_schedule: str = "cosine"
    seed: int = 0


# -- point sets ---------------------------------------------------------------

@dataclass
class PointBatch:
    states: np.ndarray       # (B, 4)
    times: np.ndarray        # (B,)
    thetas: np.ndarray       # (B, 2) int

    def __len__(self):
        return len(self.times)

    @classmethod
    def empty(cls) -> "PointBatch":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros((0, 2), int))


@dataclass
class TargetData:
    """Points with value and costate targets (rollout bundles or BVP records)."""

    states: np.ndarray       # (M, 4)
    times: np.ndarray        # (M,)
    thetas: np.ndarray       # (M, 2)
    values: np.ndarray       # (M, 2)
    costates: np.ndarray | None   # (M, 2, 4)
    terminal_states: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    terminal_thetas: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), int))

    def __len__(self):
        return len(self.times)

    @classmethod
    def empty(cls) -> "TargetData":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros((0, 2), int), np.zeros((0, 2)),
                   np.zeros((0, 2, 4)))

    @classmethod
    def from_bundles(cls, bundles) -> "TargetData":
        if not bundles:
            return cls.empty()
        X, t, th, V, L, XT, thT = [], [], [], [], [], [], []
        for b in bundles:
            ok = b.in_bounds
            X.append(b.states[ok])
            t.append(b.times[ok])
            th.append(np.repeat(np.asarray(b.thetas)[None], ok.sum(), 0))
            V.append(b.V_tilde[ok])
            L.append(b.lam_tilde[ok])
            if ok[-1]:
                XT.append(b.states[-1:])
                thT.append(np.asarray(b.thetas)[None])
        cat = np.concatenate
        return cls(cat(X), cat(t), cat(th).astype(int), cat(V), cat(L),
                   cat(XT) if XT else np.zeros((0, 4)),
                   cat(thT).astype(int) if thT else np.zeros((0, 2), int))


def sample_box(rng, n: int, d_bounds, v_bounds) -> np.ndarray:
    lo = np.array([d_bounds[0], v_bounds[0], d_bounds[0], v_bounds[0]])
    hi = np.array([d_bounds[1], v_bounds[1], d_bounds[1], v_bounds[1]])
    return lo + (hi - lo) * rng.random((n, 4))


def sample_thetas(rng, n: int, theta_set) -> np.ndarray:
    ts = np.asarray(theta_set, dtype=int)
    return ts[rng.integers(0, len(ts), n)]


# -- HJI residual --------------------------------------------------------------

def hji_residual(G: np.ndarray, X: np.ndarray, thetas: np.ndarray, geom: GameGeometry):
    """Residuals (B, 2) of dV_i/dt + max_u {grad V_i . f - (l_i + c_i)}.

    ``G`` is (B, 2, 5) with raw-unit (grad_x, d/dt). Each player's control is
    the maximizer given its own gradient; the fellow player's control is the
    one implied by the fellow's gradient. Also returns (u, f) for adjoints.
    """
    u = game.optimal_control(np.stack([G[:, 0, 1], G[:, 1, 3]], axis=1), geom)
    f = game.dynamics(X, u[:, 0], u[:, 1])
    r = np.empty((len(X), 2))
    for i in (0, 1):
        r[:, i] = (G[:, i, 4] + np.sum(G[:, i, :4] * f, axis=1) - u[:, i] ** 2
                   - game.penalty(X, thetas[:, i], i, geom))
    return r, u, f


def hji_residual_adjoint(rbar: np.ndarray, G: np.ndarray, u: np.ndarray, f: np.ndarray,
                         geom: GameGeometry) -> np.ndarray:
    """d(sum rbar * r)/dG, shape (B, 2, 5)."""
    Gbar = np.zeros_like(G)
    free = [(u[:, j] > geom.u_min) & (u[:, j] < geom.u_max) for j in (0, 1)]
    vidx = (1, 3)
    for i in (0, 1):
        Gbar[:, i, 4] += rbar[:, i]
        # own control drops out by stationarity / clipping (envelope theorem)
        Gbar[:, i, :4] += rbar[:, i, None] * f
        j = 1 - i
        Gbar[:, j, vidx[j]] += rbar[:, i] * G[:, i, vidx[j]] * 0.5 * free[j]
    return Gbar


def pde_residual(ens: OperatorEnsemble, x, t, thetas, player: int | None = None):
    """HJI residual at the given points; (B,) for one player or (B, 2) for both."""
    X = np.atleast_2d(np.asarray(x, float))
    th = np.broadcast_to(np.asarray(thetas, dtype=int), (len(X), 2))
    _, G = ens.value_and_gradient(X, t, th)
    r, _, _ = hji_residual(G, X, th, ens.geom)
    return r if player is None else r[:, player]


def residual_magnitude(ens: OperatorEnsemble, X, t, thetas) -> np.ndarray:
    """Sum over players of |residual| in normalized value units."""
    return np.abs(pde_residual(ens, X, t, thetas)).sum(axis=1) / ens.value_scale


# -- composite loss ----------------------------------------------------------

def boundary_sign(ens: OperatorEnsemble) -> float:
    return -1.0 if ens.cfg.sign_convention == "printed" else 1.0


def pno_loss(ens: OperatorEnsemble, params: np.ndarray, residual: PointBatch,
             boundary: PointBatch, targets: TargetData, weights: LossWeights,
             need_grad: bool = True):
    """Composite L1 loss and its parameter gradient.

    Terms (means over their point sets, normalized by value/costate scales):
    HJI residual, C1 boundary, C2 value match, C3 value-gradient match,
    C4 costate match, C5 terminal costate. Returns (total, grad, terms).
    """
    geom = ens.geom
    vs, cs = ens.value_scale, ens.costate_scale
    grad = np.zeros(ens.n_params) if need_grad else None
    terms = dict(pde=0.0, bc=0.0, C2=0.0, C3=0.0, C4=0.0, C5=0.0)
    nR, nD, nM = len(residual), len(boundary), len(targets)

    X = np.concatenate([residual.states, boundary.states, targets.states])
    t = np.concatenate([residual.times, np.full(nD, geom.T), targets.times])
    th = np.concatenate([residual.thetas, boundary.thetas, targets.thetas]).astype(int)
    nV = len(X)
    if nV:
        Zn = ens.trunk_inputs(X, t)
        _, bits, idx = ens.group_thetas(th, nV)
        outs, caches = [], []
        for i in (0, 1):
            o, d, c = ens._operator(params, i, "value", bits, idx, Zn, True, need_grad)
            outs.append((o[:, 0], d[:, 0, :]))
            caches.append(c)
        V = np.stack([o[0] for o in outs], axis=1)          # (nV, 2)
        G = np.stack([o[1] for o in outs], axis=1)          # (nV, 2, 5)
        Vbar = np.zeros_like(V)
        Gbar = np.zeros_like(G)
        rs = slice(0, nR)
        ds = slice(nR, nR + nD)
        ms = slice(nR + nD, nV)
        if nR:
            r, u, f = hji_residual(G[rs], X[rs], th[rs], geom)
            terms["pde"] = float(np.abs(r).sum() / (vs * nR))
            Gbar[rs] += hji_residual_adjoint(np.sign(r) / (vs * nR), G[rs], u, f, geom)
        if nD and weights.C1:
            gT = np.stack([game.terminal_loss(X[ds], i, geom) for i in (0, 1)], axis=1)
            e = V[ds] + boundary_sign(ens) * gT
            terms["bc"] = weights.C1 * float(np.abs(e).sum() / (vs * nD))
            Vbar[ds] += weights.C1 * np.sign(e) / (vs * nD)
        if nM and weights.C2:
            e = V[ms] - targets.values
            terms["C2"] = weights.C2 * float(np.abs(e).sum() / (vs * nM))
            Vbar[ms] += weights.C2 * np.sign(e) / (vs * nM)
        if nM and weights.C3 and targets.costates is not None:
            e = G[ms, :, :4] - targets.costates
            terms["C3"] = weights.C3 * float(np.abs(e).sum() / (cs * nM))
            Gbar[ms, :, :4] += weights.C3 * np.sign(e) / (cs * nM)
        if need_grad:
            for i in (0, 1):
                ens._operator_backward(params, i, "value", caches[i], Vbar[:, i:i + 1],
                                       Gbar[:, i:i + 1, :], grad)

    if ens.cfg.with_costate and (weights.C4 or weights.C5):
        nT = len(targets.terminal_states) if weights.C5 else 0
        nC = nM if (weights.C4 and targets.costates is not None) else 0
        Xc = np.concatenate([targets.states[:nC], targets.terminal_states[:nT]])
        if len(Xc):
            tc = np.concatenate([targets.times[:nC], np.full(nT, geom.T)])
            thc = np.concatenate([targets.thetas[:nC], targets.terminal_thetas[:nT]]).astype(int)
            Zc = ens.trunk_inputs(Xc, tc)
            _, bits, idx = ens.group_thetas(thc, len(Xc))
            lbar = np.zeros((len(Xc), 2, 4))
            lam, caches = [], []
            for i in (0, 1):
                o, _, c = ens._operator(params, i, "costate", bits, idx, Zc, False, need_grad)
                lam.append(o)
                caches.append(c)
            lam = np.stack(lam, axis=1)
            if nC:
                e = lam[:nC] - targets.costates
                terms["C4"] = weights.C4 * float(np.abs(e).sum() / (cs * nC))
                lbar[:nC] = weights.C4 * np.sign(e) / (cs * nC)
            if nT:
                XT = targets.terminal_states
                gg = np.stack([game.terminal_state_gradient(XT, i, geom) for i in (0, 1)], axis=1)
                e = lam[nC:] + gg
                terms["C5"] = weights.C5 * float(np.abs(e).sum() / (cs * nT))
                lbar[nC:] = weights.C5 * np.sign(e) / (cs * nT)
            if need_grad:
                for i in (0, 1):
                    ens._operator_backward(params, i, "costate", caches[i], lbar[:, i], None, grad)

    for k, v in terms.items():
        if not math.isfinite(v):
            raise NonFiniteLossError(k)
    total = float(sum(terms.values()))
    return total, grad, terms


# -- schedules and sampling -----------------------------------------------------

def curriculum_time_window(num_epoch: int, train_iters: int, T: float) -> float:
    """Upper end of the forward time window, refreshed every 10 epochs."""
    e = 10 * (int(num_epoch) // 10)
    return min(T, (e + 10) * T / train_iters)


def time_window(num_epoch: int, train_iters: int, T: float, mode: str = "forward") -> tuple:
    w = curriculum_time_window(num_epoch, train_iters, T)
    return (0.0, w) if mode == "forward" else (T - w, T)


def learning_rate(step: int, total: int, lr0: float, lr_final: float, schedule: str) -> float:
    if schedule == "constant" or total <= 1:
        return lr0
    frac = min(1.0, step / (total - 1))
    return lr_final + 0.5 * (lr0 - lr_final) * (1.0 + math.cos(math.pi * frac))


@dataclass
class SamplePool:
    states: np.ndarray       # (N, 4)
    times: np.ndarray        # (N,)
    thetas: np.ndarray       # (N, 2)
    residuals: np.ndarray    # (N,)

    def __len__(self):
        return len(self.times)


def evolve_samples(pool: SamplePool, residual_fn, sample_fn) -> tuple:
    """Keep entries whose fresh residual is >= the pool mean, refill to capacity.

    ``residual_fn(states, times, thetas) -> (N,)`` nonnegative residuals;
    ``sample_fn(n) -> (states, times, thetas)``. Ties with the mean are kept.
    Returns (new_pool, retained_mask, pre_evolve_mean).
    """
    cap = len(pool)
    r = np.asarray(residual_fn(pool.states, pool.times, pool.thetas), float)
    # the exact mean lies in [min, max]; rounding can push it one ulp past
    # the entries of a constant pool
    mean = float(np.clip(r.mean(), r.min(), r.max())) if cap else 0.0
    keep = r >= mean
    n_new = cap - int(keep.sum())
    states, times, thetas, res = pool.states[keep], pool.times[keep], pool.thetas[keep], r[keep]
    if n_new:
        Xn, tn, thn = sample_fn(n_new)
        rn = np.asarray(residual_fn(Xn, tn, thn), float)
        states = np.concatenate([states, Xn])
        times = np.concatenate([times, tn])
        thetas = np.concatenate([thetas, thn])
        res = np.concatenate([res, rn])
    return SamplePool(states, times, thetas.astype(int), res), keep, mean


# -- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    ensemble: OperatorEnsemble
    metrics: list
    pretrain_report: dict = field(default_factory=dict)
    failures: int = 0


def boundary_errors(ens: OperatorEnsemble, X: np.ndarray, thetas: np.ndarray) -> dict:
    geom = ens.geom
    V = ens.value(X, geom.T, thetas)
    gT = np.stack([game.terminal_loss(X, i, geom) for i in (0, 1)], axis=1)
    out = {"value_error": float(np.mean(np.abs(V + boundary_sign(ens) * gT)) / ens.value_scale)}
    if ens.cfg.with_costate:
        lam = ens.costate(X, geom.T, thetas)
        target_v = np.stack([-2.0 * (X[:, 1] - geom.v_bar), -2.0 * (X[:, 3] - geom.v_bar)], axis=1)
        pred_v = np.stack([lam[:, 0, 1], lam[:, 1, 3]], axis=1)
        out["costate_sign_agreement"] = float(np.mean(np.sign(pred_v) == np.sign(target_v)))
        gg = np.stack([game.terminal_state_gradient(X, i, geom) for i in (0, 1)], axis=1)
        out["costate_error"] = float(np.mean(np.abs(lam + gg)) / ens.costate_scale)
    return out


def pretrain(ens: OperatorEnsemble, cfg: TrainConfig, rng=None, progress=None) -> tuple:
    """Fit terminal values and terminal costates on freshly drawn terminal states.

    Returns (ensemble, report). Aborts with DivergenceError if the loss grows
    tenfold over any 100-step span.
    """
    rng = np.random.default_rng(cfg.seed + 1) if rng is None else rng
    params = ens.params.copy()
    state = AdamState.zeros(ens.n_params, cfg.pretrain_lr)
    weights = LossWeights(C1=1.0, C2=0.0, C3=0.0, C4=0.0, C5=1.0)
    history = []
    for it in range(cfg.pretrain_iters):
        X = sample_box(rng, cfg.pretrain_batch, cfg.d_bounds, cfg.v_bounds)
        th = sample_thetas(rng, cfg.pretrain_batch, cfg.theta_training_set)
        tgt = TargetData(np.zeros((0, 4)), np.zeros(0), np.zeros((0, 2), int), np.zeros((0, 2)),
                         None, X if ens.cfg.with_costate else np.zeros((0, 4)), th)
        loss, grad, _ = pno_loss(ens, params, PointBatch.empty(), PointBatch(X, np.full(len(X), ens.geom.T), th),
                                 tgt, weights)
        history.append(loss)
        if it >= 100 and loss > 10.0 * history[it - 100]:
            raise DivergenceError(f"pretraining diverged at step {it}: loss {loss:.4g} "
                                  f"vs {history[it - 100]:.4g} 100 steps earlier")
        lr = learning_rate(it, cfg.pretrain_iters, cfg.pretrain_lr, cfg.lr_final, cfg.lr_schedule)
        params, state = optimizer_step(params, grad, state, lr)
        if progress and it % 200 == 0:
            progress(f"pretrain {it}: loss {loss:.4g}")
    ens = ens.with_params(params)
    hold = np.random.default_rng(cfg.seed + 7)
    Xh = sample_box(hold, 1000, cfg.d_bounds, cfg.v_bounds)
    thh = sample_thetas(hold, 1000, cfg.theta_training_set)
    report = boundary_errors(ens, Xh, thh)
    report["final_loss"] = history[-1] if history else float("nan")
    return ens, report


def _pool_sampler(rng, cfg: TrainConfig, window: tuple, dt_grid: float):
    """Uniform states, start times on the rollout grid inside ``window``."""
    lo_k = int(math.ceil(window[0] / dt_grid - 1e-9))
    hi_k = max(lo_k, int(math.floor(window[1] / dt_grid + 1e-9)))

    def sample(n):
        X = sample_box(rng, n, cfg.d_bounds, cfg.v_bounds)
        ks = rng.integers(lo_k, hi_k + 1, n)
        return X, ks * dt_grid, sample_thetas(rng, n, cfg.theta_training_set)
    return sample


def train_pno(ens: OperatorEnsemble, cfg: TrainConfig, weights: LossWeights,
              rcfg: RolloutConfig | None = None, progress=None, do_pretrain: bool = True) -> TrainResult:
    """Pretraining followed by the rollout-regularized training loop."""
    geom = ens.geom
    rcfg = rcfg or RolloutConfig(d_bounds=cfg.d_bounds, v_bounds=cfg.v_bounds)
    rng = np.random.default_rng(cfg.seed)
    report = {}
    if do_pretrain and cfg.pretrain_iters > 0:
        ens, report = pretrain(ens, cfg, np.random.default_rng(cfg.seed + 1), progress)
        if progress:
            progress(f"pretrain report: {report}")

    probe_rng = np.random.default_rng(cfg.seed + 99)
    probe = PointBatch(sample_box(probe_rng, cfg.probe_size, cfg.d_bounds, cfg.v_bounds),
                       probe_rng.random(cfg.probe_size) * geom.T,
                       sample_thetas(probe_rng, cfg.probe_size, cfg.theta_training_set))

    params = ens.params.copy()
    state = AdamState.zeros(ens.n_params, cfg.learning_rate)
    total_steps = cfg.train_iters * cfg.gradient_steps
    gstep = 0
    metrics = []
    num_epoch = 0
    pool = None
    targets = TargetData.empty()
    failures = 0
    last_T = geom.T - rcfg.dt_grid
    for it in range(cfg.train_iters):
        lo, hi = time_window(num_epoch, cfg.train_iters, geom.T, cfg.window_mode)
        Xr = sample_box(rng, cfg.n_residual, cfg.d_bounds, cfg.v_bounds)
        tr = lo + (hi - lo) * rng.random(cfg.n_residual)
        residual = PointBatch(Xr, tr, sample_thetas(rng, cfg.n_residual, cfg.theta_training_set))
        Xb = sample_box(rng, cfg.n_boundary, cfg.d_bounds, cfg.v_bounds)
        boundary = PointBatch(Xb, np.full(cfg.n_boundary, geom.T),
                              sample_thetas(rng, cfg.n_boundary, cfg.theta_training_set))
        if num_epoch % cfg.resample_period == 0:
            cur = ens.with_params(params)
            sampler = _pool_sampler(rng, cfg, (lo, min(hi, last_T)), rcfg.dt_grid)
            resid_fn = lambda X, t, th: residual_magnitude(cur, X, t, th)  # noqa: E731
            if pool is None:
                X0, t0, th0 = sampler(cfg.n_rollouts)
                pool = SamplePool(X0, t0, th0, resid_fn(X0, t0, th0))
            else:
                pool, _, _ = evolve_samples(pool, resid_fn, sampler)
            bundles, n_fail = rollout_bundles(cur, pool.states, pool.times, pool.thetas, rcfg,
                                              log=log.warning)
            failures += n_fail
            if n_fail > cfg.max_failure_fraction * len(pool):
                raise RolloutFailureError(f"{n_fail}/{len(pool)} rollouts failed at iteration {it}")
            targets = TargetData.from_bundles(bundles)
        num_epoch += 1
        first = None
        for _ in range(cfg.gradient_steps):
            loss, grad, terms = pno_loss(ens, params, residual, boundary, targets, weights)
            if first is None:
                first = (loss, terms)
            lr = learning_rate(gstep, total_steps, cfg.learning_rate, cfg.lr_final, cfg.lr_schedule)
            params, state = optimizer_step(params, grad, state, lr)
            gstep += 1
        loss0, terms0 = first if first else (float("nan"), dict.fromkeys(("pde", "bc", "C2", "C3", "C4", "C5"), 0.0))
        cur = ens.with_params(params)
        mean_res = float(np.mean(residual_magnitude(cur, probe.states, probe.times, probe.thetas)))
        row = {"iter": it + 1, "loss_total": loss0, "loss_pde": terms0["pde"], "loss_bc": terms0["bc"],
               "loss_C2": terms0["C2"], "loss_C3": terms0["C3"], "loss_C4": terms0["C4"],
               "loss_C5": terms0["C5"], "mean_residual": mean_res, "window_T": hi}
        metrics.append(row)
        if progress:
            progress(f"iter {it + 1}: loss {loss0:.4g} resid {mean_res:.4g} window {hi:.2f}")
    return TrainResult(ens.with_params(params), metrics, report, failures)


# -- hybrid baseline ------------------------------------------------------------

def train_hybrid(ens: OperatorEnsemble, cfg: TrainConfig, data: TargetData, weights: LossWeights,
                 progress=None) -> TrainResult:
    """Supervised regression on BVP data, then supervised + HJI residual refinement
    with a time window growing backward from T. Uses no costate networks."""
    if len(data) == 0:
        raise ValueError("hybrid training needs a nonempty dataset")
    geom = ens.geom
    rng = np.random.default_rng(cfg.seed)
    sup_w = LossWeights(C1=weights.C1, C2=weights.C2 or 1.0,
                        C3=weights.C3 if cfg.hybrid_costate_targets else 0.0, C4=0.0, C5=0.0)
    costates = data.costates if cfg.hybrid_costate_targets else None
    params = ens.params.copy()
    state = AdamState.zeros(ens.n_params, cfg.hybrid_learning_rate)
    n1, n2 = cfg.hybrid_stage1_iters, cfg.hybrid_stage2_iters
    total = n1 + n2
    probe_rng = np.random.default_rng(cfg.seed + 99)
    probe = PointBatch(sample_box(probe_rng, cfg.probe_size, cfg.d_bounds, cfg.v_bounds),
                       probe_rng.random(cfg.probe_size) * geom.T,
                       sample_thetas(probe_rng, cfg.probe_size, cfg.theta_training_set))
    metrics = []
    order = rng.permutation(len(data))
    pos = 0
    bs = min(cfg.hybrid_batch, len(data))
    for step in range(total):
        if pos + bs > len(order):
            order = rng.permutation(len(data))
            pos = 0
        sel = order[pos:pos + bs]
        pos += bs
        batch = TargetData(data.states[sel], data.times[sel], data.thetas[sel], data.values[sel],
                           None if costates is None else costates[sel])
        if step < n1:
            residual = boundary = PointBatch.empty()
            hi = float("nan")
        else:
            epoch = (step - n1) * cfg.train_iters // max(n2, 1)
            lo, hi = time_window(epoch, cfg.train_iters, geom.T, "backward")
            Xr = sample_box(rng, cfg.n_residual, cfg.d_bounds, cfg.v_bounds)
            residual = PointBatch(Xr, lo + (hi - lo) * rng.random(cfg.n_residual),
                                  sample_thetas(rng, cfg.n_residual, cfg.theta_training_set))
            Xb = sample_box(rng, cfg.n_boundary, cfg.d_bounds, cfg.v_bounds)
            boundary = PointBatch(Xb, np.full(len(Xb), geom.T),
                                  sample_thetas(rng, len(Xb), cfg.theta_training_set))
            hi = hi - lo
        loss, grad, terms = pno_loss(ens, params, residual, boundary, batch, sup_w)
        lr = learning_rate(step, total, cfg.hybrid_learning_rate, cfg.lr_final, cfg.hybrid_lr_schedule)
        params, state = optimizer_step(params, grad, state, lr)
        if step % max(1, cfg.gradient_steps) == 0 or step == total - 1:
            cur = ens.with_params(params)
            mean_res = float(np.mean(residual_magnitude(cur, probe.states, probe.times, probe.thetas)))
            metrics.append({"iter": step + 1, "loss_total": loss, "loss_pde": terms["pde"],
                            "loss_bc": terms["bc"], "loss_C2": terms["C2"], "loss_C3": terms["C3"],
                            "loss_C4": 0.0, "loss_C5": 0.0, "mean_residual": mean_res,
                            "window_T": hi})
            if progress:
                progress(f"hybrid step {step + 1}: loss {loss:.4g} resid {mean_res:.4g}")
    return TrainResult(ens.with_params(params), metrics)
