"""Closed-loop simulation, collision accounting, safety tables and grid exports."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import game
from .bvp import X_GT, BvpConfig, BvpSolution, control_function, solve_bvp
from .game import GameGeometry
from .integrate import DenseSolution, IntegrationError, rk45_integrate
from .operator import HorizonError, OperatorEnsemble
from .rollout import TrajectoryBundle, time_grid

log = logging.getLogger(__name__)

SOURCES = ("pno-value-gradient", "pno-costate", "hybrid", "bvp-openloop", "zero")
SAFETY_COLUMNS = ["theta1", "theta2", "method", "variant", "n_cases", "n_collisions", "pct", "n_failures"]
VARIANTS = ("with-inevitable", "without-inevitable")


class CompatibilityError(ValueError):
    """Checkpoint was trained for a different game geometry."""


@dataclass
class SimCase:
    x0: np.ndarray
    thetas: tuple = (1, 1)
    sources: tuple = ("pno-value-gradient", "pno-value-gradient")
    dt: float = 0.1
    case_id: int = 0
    reference: BvpSolution | None = None   # needed by the bvp-openloop source

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, float)
        for s in self.sources:
            if s not in SOURCES:
                raise ValueError(f"unknown policy source {s!r}")
        if "bvp-openloop" in self.sources and self.reference is None:
            raise ValueError("bvp-openloop source needs a reference BVP solution")


def _check_compatible(ens: OperatorEnsemble, geom: GameGeometry):
    if ens.geom != geom:
        raise CompatibilityError("checkpoint geometry does not match the evaluation geometry")


def _check_dt(dt: float, T: float):
    n = T / dt
    if dt <= 0 or abs(n - round(n)) > 1e-9:
        raise ValueError(f"dt={dt} must divide the horizon T={T}")


class PiecewiseDense:
    """Dense joint states over a grid of per-interval solutions; t -> (len(t), B, 4)."""

    def __init__(self, times: np.ndarray, pieces: list, B: int):
        self.times, self.pieces, self.B = times, pieces, B

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, float))
        k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.pieces) - 1)
        out = np.empty((len(t), self.B, 4))
        for j in np.unique(k):
            m = k == j
            out[m] = self.pieces[j](t[m]).reshape(m.sum(), self.B, 4)
        return out

    def column(self, i: int):
        """Dense states of batch member ``i`` alone; t -> (len(t), 4)."""
        sl = slice(4 * i, 4 * i + 4)
        pieces = [DenseSolution(p.t0, p.t1, p.t_nodes, p.hs, [r[:, sl] for r in p.rconts],
                                None if p.y_end is None else p.y_end[sl]) for p in self.pieces]
        return PiecewiseDense(self.times, pieces, 1).squeeze

    def squeeze(self, t) -> np.ndarray:
        return self(t)[:, 0]


def closed_loop_sim(cases: list, geom: GameGeometry, ensembles: dict | None = None,
                    rtol: float = 1e-10, atol: float = 1e-10) -> list:
    """Simulate cases sharing (dt, t0 = 0) as one batch.

    Feedback sources are sampled at each grid time and held over the interval;
    the bvp-openloop source applies the reference's continuous open-loop
    control. Each interval is integrated with RK45. Returns one
    TrajectoryBundle per case (``meta['dense']`` maps t -> (len(t), 4)).
    """
    if not cases:
        return []
    ensembles = ensembles or {}
    dt = cases[0].dt
    _check_dt(dt, geom.T)
    if any(c.dt != dt for c in cases):
        raise ValueError("cases in one batch must share dt")
    for ens in ensembles.values():
        _check_compatible(ens, geom)
    B = len(cases)
    ts = time_grid(0.0, geom.T, dt)
    th = np.array([c.thetas for c in cases], float)
    X = np.array([c.x0 for c in cases])
    open_loop = {}
    for i, c in enumerate(cases):
        if "bvp-openloop" in c.sources:
            open_loop[i] = control_function(c.reference, geom)
    states = np.empty((len(ts), B, 4))
    controls = np.empty((len(ts), B, 2))
    states[0] = X
    pieces = []

    def feedback(X, t):
        U = np.zeros((B, 2))
        for p in (0, 1):
            for src in {c.sources[p] for c in cases}:
                rows = np.array([i for i, c in enumerate(cases) if c.sources[p] == src])
                if src in ("zero", "bvp-openloop"):
                    continue
                ens = ensembles.get(src) or ensembles.get("pno" if src.startswith("pno") else src)
                if ens is None:
                    raise KeyError(f"no ensemble supplied for source {src!r}")
                U[rows, p] = ens.policy(src, X[rows], np.full(len(rows), t), th[rows])[:, p]
        return U

    for k in range(len(ts) - 1):
        t0, t1 = ts[k], ts[k + 1]
        Uk = feedback(states[k], t0)
        hold = np.ones((B, 2), bool)
        for i, fn in open_loop.items():
            for p in (0, 1):
                if cases[i].sources[p] == "bvp-openloop":
                    hold[i, p] = False
                    Uk[i, p] = fn(t0)[0, p]
        controls[k] = Uk

        def field_fn(t, y, Uk=Uk, hold=hold):
            Y = y.reshape(B, 4)
            U = Uk.copy()
            for i, fn in open_loop.items():
                u = fn(t)[0]
                U[i] = np.where(hold[i], U[i], u)
            return game.dynamics(Y, U[:, 0], U[:, 1]).ravel()

        sol = rk45_integrate(field_fn, states[k].ravel(), (t0, t1), None, rtol, atol)
        states[k + 1] = sol.y[-1].reshape(B, 4)
        pieces.append(sol.dense)
    # control at the final grid time, for completeness of the record
    Ulast = feedback(states[-1], ts[-1])
    for i, fn in open_loop.items():
        for p in (0, 1):
            if cases[i].sources[p] == "bvp-openloop":
                Ulast[i, p] = fn(ts[-1])[0, p]
    controls[-1] = Ulast
    dense = PiecewiseDense(ts, pieces, B)
    out = []
    for i, c in enumerate(cases):
        out.append(TrajectoryBundle(ts, states[:, i].copy(), controls[:, i].copy(), tuple(c.thetas),
                                    in_bounds=np.ones(len(ts), bool), case_id=c.case_id,
                                    meta={"dense": dense.column(i), "sources": c.sources}))
    return out


# -- collisions ------------------------------------------------------------------

def _first_crossing(pos, level, t_lo, t_hi, tol):
    """Earliest t in [t_lo, t_hi] with pos(t) >= level for nondecreasing pos."""
    if pos(np.array([t_lo]))[0] >= level:
        return t_lo
    if pos(np.array([t_hi]))[0] < level:
        return None
    a, b = t_lo, t_hi
    while b - a > tol:
        m = 0.5 * (a + b)
        if pos(np.array([m]))[0] >= level:
            b = m
        else:
            a = m
    return b


def _last_inside(pos, level, t_lo, t_hi, tol):
    """Latest t in [t_lo, t_hi] with pos(t) <= level for nondecreasing pos (assumes pos(t_lo) <= level)."""
    if pos(np.array([t_hi]))[0] <= level:
        return t_hi
    a, b = t_lo, t_hi
    while b - a > tol:
        m = 0.5 * (a + b)
        if pos(np.array([m]))[0] <= level:
            a = m
        else:
            b = m
    return a


def detect_collision(bundle: TrajectoryBundle, thetas, geom: GameGeometry, dense=None,
                     tol: float = 1e-6, fallback_sub: int = 200) -> tuple:
    """(collided, first collision time or None) for one trajectory.

    Collision means both vehicles lie in their type-scaled zones at the same
    instant. With nondecreasing positions (velocities >= 0), each vehicle's
    zone occupancy is one time interval, located by bisection on the dense
    output; the first collision is where the two intervals begin to overlap.
    Otherwise the dense output is scanned at dt/``fallback_sub`` and the first
    hit refined by bisection.
    """
    dense = dense or bundle.meta.get("dense")
    times = bundle.times
    thetas = np.asarray(thetas, float)
    if dense is None:
        hit = np.flatnonzero(game.collision_indicator(bundle.states, thetas, geom))
        return (True, float(times[hit[0]])) if len(hit) else (False, None)
    lo1, hi = geom.zone(thetas[0])
    lo2, _ = geom.zone(thetas[1])
    probe = np.linspace(times[0], times[-1], 10 * (len(times) - 1) + 1)
    S = dense(probe)
    if np.all(S[:, 1] >= 0) and np.all(S[:, 3] >= 0) and np.all(np.diff(S[:, 0]) >= 0) \
            and np.all(np.diff(S[:, 2]) >= 0):
        spans = []
        for j, lo in ((0, lo1), (2, lo2)):
            pos = lambda t, j=j: dense(t)[:, j]  # noqa: E731
            enter = _first_crossing(pos, lo, times[0], times[-1], tol)
            # never reaches the zone, or starts beyond it
            if enter is None or pos(np.array([enter]))[0] > hi:
                return False, None
            leave = _last_inside(pos, hi, enter, times[-1], tol)
            spans.append((enter, leave))
        start = max(spans[0][0], spans[1][0])
        end = min(spans[0][1], spans[1][1])
        if start <= end + tol:
            return True, float(start)
        return False, None
    fine = np.linspace(times[0], times[-1], fallback_sub * (len(times) - 1) + 1)
    ind = game.collision_indicator(dense(fine), thetas, geom)
    hit = np.flatnonzero(ind)
    if not len(hit):
        return False, None
    if hit[0] == 0:
        return True, float(fine[0])
    a, b = fine[hit[0] - 1], fine[hit[0]]
    while b - a > tol:
        m = 0.5 * (a + b)
        if game.collision_indicator(dense(np.array([m]))[0], thetas, geom):
            b = m
        else:
            a = m
    return True, float(b)


def brute_force_collision(bundle: TrajectoryBundle, thetas, geom: GameGeometry, dense=None,
                          sub: int = 100) -> tuple:
    """Reference detector: indicator scan of the dense output at dt/``sub``."""
    dense = dense or bundle.meta["dense"]
    times = bundle.times
    fine = np.linspace(times[0], times[-1], sub * (len(times) - 1) + 1)
    hit = np.flatnonzero(game.collision_indicator(dense(fine), np.asarray(thetas, float), geom))
    return (True, float(fine[hit[0]])) if len(hit) else (False, None)


def bvp_dense_states(sol: BvpSolution):
    return lambda t: np.asarray(sol.dense(np.atleast_1d(t))).reshape(-1, 12)[:, :4]


# -- test sets and filtering ------------------------------------------------------

def sample_test_states(seed: int, count: int, box=X_GT) -> np.ndarray:
    rng = np.random.default_rng(seed)
    (dlo, dhi), (vlo, vhi) = box
    lo = np.array([dlo, vlo, dlo, vlo])
    hi = np.array([dhi, vhi, dhi, vhi])
    return lo + (hi - lo) * rng.random((count, 4))


@dataclass
class FilterResult:
    kept: np.ndarray                      # (n, 4) initial states
    kept_index: np.ndarray
    n_colliding: int
    n_failed: int
    references: dict = field(default_factory=dict)   # index -> BvpSolution at theta=(1,1)


def filter_inevitable(x0s, geom: GameGeometry, cfg: BvpConfig | None = None, solver=None) -> FilterResult:
    """Drop initial states whose equilibrium trajectory at theta=(1,1) collides.

    BVP failures are excluded and counted in ``n_failed``.
    """
    x0s = np.asarray(x0s, float).reshape(-1, 4)
    solver = solver or (lambda x: solve_bvp(x, 0.0, (1, 1), geom, cfg))
    keep, refs = [], {}
    n_col = n_fail = 0
    for n, x in enumerate(x0s):
        try:
            sol = solver(x)
        except IntegrationError:
            sol = None
        if sol is None or not sol.converged:
            n_fail += 1
            continue
        refs[n] = sol
        hit, _ = detect_collision(sol.bundle, (1, 1), geom, bvp_dense_states(sol))
        if hit:
            n_col += 1
        else:
            keep.append(n)
    keep = np.array(keep, int)
    return FilterResult(x0s[keep] if len(keep) else np.zeros((0, 4)), keep, n_col, n_fail, refs)


# -- safety table -----------------------------------------------------------------

@dataclass
class SafetyRow:
    theta1: int
    theta2: int
    method: str
    variant: str
    n_cases: int
    n_collisions: int
    n_failures: int

    @property
    def pct(self) -> float:
        return 100.0 * self.n_collisions / self.n_cases if self.n_cases else 0.0

    def as_list(self) -> list:
        return [self.theta1, self.theta2, self.method, self.variant, self.n_cases,
                self.n_collisions, f"{self.pct:.2f}", self.n_failures]


def collision_count(x0s, thetas, sources, geom: GameGeometry, ensembles: dict | None = None,
                    references: dict | None = None, dt: float = 0.1) -> tuple:
    """(n_collisions, n_failures, flags) for one method on one type pair.

    ``references`` maps case index -> BvpSolution (required for bvp-openloop);
    cases without a converged reference are counted as failures.
    """
    x0s = np.asarray(x0s, float).reshape(-1, 4)
    cases, fails = [], 0
    for n, x in enumerate(x0s):
        ref = None
        if "bvp-openloop" in sources:
            ref = (references or {}).get(n)
            if ref is None or not ref.converged:
                fails += 1
                continue
        cases.append(SimCase(x, tuple(thetas), tuple(sources), dt, n, ref))
    flags = {}
    if cases:
        try:
            bundles = closed_loop_sim(cases, geom, ensembles)
        except (IntegrationError, HorizonError) as exc:
            log.warning("simulation failed for theta=%s: %s", thetas, exc)
            return 0, len(x0s), flags
        for c, b in zip(cases, bundles):
            flags[c.case_id] = detect_collision(b, thetas, geom)[0]
    return int(sum(flags.values())), fails, flags


def safety_table(test_sets: dict, methods: dict, variant: str, geom: GameGeometry,
                 ensembles: dict | None = None, references: dict | None = None,
                 path=None) -> list:
    """Collision statistics per type pair and method.

    ``test_sets`` maps (theta1, theta2) -> initial states; ``methods`` maps a
    method name to its (source1, source2), or to ((source1, source2), ensembles)
    when the method brings its own networks. ``references`` maps a type pair to
    {case index -> BvpSolution} for open-loop ground-truth replays.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    rows = []
    for pair in sorted(test_sets):
        x0s = test_sets[pair]
        if len(x0s) == 0:
            raise ValueError(f"no test cases for theta pair {pair}")
        for name, spec in methods.items():
            if len(spec) == 2 and isinstance(spec[1], dict):
                sources, nets = spec
            else:
                sources, nets = spec, ensembles
            n_col, n_fail, _ = collision_count(x0s, pair, sources, geom, nets,
                                               (references or {}).get(pair))
            rows.append(SafetyRow(int(pair[0]), int(pair[1]), name, variant,
                                  len(x0s) - n_fail, n_col, n_fail))
    if path is not None:
        write_safety_csv(path, rows)
    return rows


def write_safety_csv(path, rows, header: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in sorted(header.items())) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAFETY_COLUMNS)
        for r in rows:
            w.writerow(r.as_list())


# -- grid exports -----------------------------------------------------------------

def slice_states(d1s, d2s, v: float = 18.0) -> np.ndarray:
    D1, D2 = np.meshgrid(d1s, d2s, indexing="ij")
    n = D1.size
    return np.stack([D1.ravel(), np.full(n, v), D2.ravel(), np.full(n, v)], axis=1)


def value_grid(ens: OperatorEnsemble, thetas, player: int = 0, d1s=None, d2s=None,
               v: float = 18.0, t: float = 0.0, with_basis: bool = True) -> dict:
    """Operator values (and trunk basis fields) on a (d1, d2) slice at fixed speed and time."""
    d1s = np.linspace(*ens.cfg.d_bounds, 91) if d1s is None else np.asarray(d1s, float)
    d2s = d1s if d2s is None else np.asarray(d2s, float)
    S = slice_states(d1s, d2s, v)
    vals = ens.value(S, np.full(len(S), t), np.repeat(np.asarray(thetas, float)[None], len(S), 0))[:, player]
    out = {"states": S, "value": vals}
    if with_basis:
        out["basis"] = ens.trunk_basis(S, np.full(len(S), t), player)
    return out


def bvp_value_grid(thetas, geom: GameGeometry, d1s, d2s, v: float = 18.0, player: int = 0,
                   cfg: BvpConfig | None = None) -> dict:
    """Equilibrium values at t = 0 on a (d1, d2) slice; NaN where the solver fails."""
    S = slice_states(d1s, d2s, v)
    vals = np.full(len(S), np.nan)
    for n, x in enumerate(S):
        try:
            sol = solve_bvp(x, 0.0, thetas, geom, cfg)
        except IntegrationError:
            continue
        if sol.converged:
            vals[n] = sol.bundle.V_tilde[0, player]
    return {"states": S, "value": vals}


def write_value_grid(path, grid: dict, header: dict | None = None) -> None:
    S = grid["states"]
    basis = grid.get("basis")
    with open(path, "w", newline="") as fh:
        if header:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in sorted(header.items())) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        head = ["d1", "d2", "value"]
        if basis is not None:
            head += [f"basis_{k}" for k in range(basis.shape[1])]
        w.writerow(head)
        for n in range(len(S)):
            row = [repr(float(S[n, 0])), repr(float(S[n, 2])), repr(float(grid["value"][n]))]
            if basis is not None:
                row += [repr(float(x)) for x in basis[n]]
            w.writerow(row)


def difference_grid(a: dict, b: dict) -> dict:
    """Pointwise |a - b| of two exports on the same slice."""
    if not np.array_equal(a["states"], b["states"]):
        raise ValueError("grids are on different slices")
    return {"states": a["states"], "value": np.abs(a["value"] - b["value"])}


def basis_ranking(ens: OperatorEnsemble, theta_sweep, player: int = 0, kind: str = "value") -> dict:
    """Basis indices ranked by the sample mean of |b_k| over a sweep of type pairs.

    Returns rank (1-based basis ids, most important first), mean and std in that order.
    """
    coeffs = np.stack([np.abs(ens.branch_coefficients(th, player, kind)) for th in theta_sweep])
    mean, std = coeffs.mean(axis=0), coeffs.std(axis=0)
    order = np.argsort(-mean, kind="stable")
    return {"rank": order + 1, "mean": mean[order], "std": std[order]}


def write_ranking(path, ranking: dict, header: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in sorted(header.items())) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["position", "basis", "mean_abs_coeff", "std_abs_coeff"])
        for n, (k, m, s) in enumerate(zip(ranking["rank"], ranking["mean"], ranking["std"]), 1):
            w.writerow([n, int(k), repr(float(m)), repr(float(s))])


# -- SVG --------------------------------------------------------------------------

def _ramp(x: float) -> str:
    """Blue-to-yellow colour ramp for x in [0, 1]."""
    stops = np.array([[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]], float)
    x = float(np.clip(x, 0.0, 1.0)) * (len(stops) - 1)
    k = min(int(x), len(stops) - 2)
    c = stops[k] + (x - k) * (stops[k + 1] - stops[k])
    return "#%02x%02x%02x" % tuple(int(round(v)) for v in c)


def heatmap_svg(path, grid: dict, title: str = "", size: int = 400) -> None:
    """Cell heatmap of a (d1, d2) slice export; NaN cells are left blank."""
    S, z = grid["states"], np.asarray(grid["value"], float)
    d1s, d2s = np.unique(S[:, 0]), np.unique(S[:, 2])
    Z = z.reshape(len(d1s), len(d2s))
    finite = Z[np.isfinite(Z)]
    lo, hi = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0
    cw, ch = size / len(d1s), size / len(d2s)
    pad = 40
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 2 * pad}" height="{size + 2 * pad}">',
             f'<text x="{pad}" y="{pad - 12}" font-size="12">{title} [{lo:.4g}, {hi:.4g}]</text>']
    for i in range(len(d1s)):
        for j in range(len(d2s)):
            if not np.isfinite(Z[i, j]):
                continue
            x = pad + i * cw
            y = pad + size - (j + 1) * ch
            parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{cw + 0.05:.2f}" height="{ch + 0.05:.2f}" '
                         f'fill="{_ramp((Z[i, j] - lo) / span)}"/>')
    parts.append(f'<text x="{pad + size / 2}" y="{size + 2 * pad - 8}" font-size="12">d1 [{d1s[0]:g}, {d1s[-1]:g}]</text>')
    parts.append(f'<text x="4" y="{pad + size / 2}" font-size="12">d2</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def polyline_svg(path, series: dict, title: str = "", width: int = 480, height: int = 300,
                 log_y: bool = False) -> None:
    """Line chart of named (x, y) series."""
    pad = 40
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    if log_y:
        ys = np.log10(np.maximum(ys, 1e-300))
    ok = np.isfinite(ys)
    x0, x1 = xs.min(), xs.max()
    y0, y1 = (ys[ok].min(), ys[ok].max()) if ok.any() else (0.0, 1.0)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{pad}" y="16" font-size="12">{title}</text>',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
             'fill="none" stroke="#999"/>']
    for n, (name, (x, y)) in enumerate(series.items()):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        if log_y:
            y = np.log10(np.maximum(y, 1e-300))
        px = pad + (x - x0) / (x1 - x0) * (width - 2 * pad)
        py = height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py) if np.isfinite(b))
        c = colours[n % len(colours)]
        parts.append(f'<polyline fill="none" stroke="{c}" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 120}" y="{pad + 14 * (n + 1)}" font-size="11" fill="{c}">{name}</text>')
    axis = "log10 " if log_y else ""
    parts.append(f'<text x="{pad}" y="{height - 8}" font-size="11">x [{x0:.4g}, {x1:.4g}], {axis}y [{y0:.4g}, {y1:.4g}]</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
