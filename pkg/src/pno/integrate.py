"""Adaptive Dormand-Prince 5(4) integrator with continuous (dense) output.

Coefficients and the 4th-order dense-output formula follow Hairer, Norsett &
Wanner, Solving ODEs I, sec. II.5/II.6 (routine DOPRI5). The error test uses
the max norm, so every component meets ``atol + rtol * |y|`` per step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B5 = np.array(A[6] + [0.0])
# difference between 5th and embedded 4th order weights
E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
D = np.array([-12715105075 / 11282082432, 0.0, 87487479700 / 32700410799,
              -10690763975 / 1880347072, 701980252875 / 199316789632,
              -1453857185 / 822651844, 69997945 / 29380423])


class IntegrationError(RuntimeError):
    def __init__(self, t: float, msg: str = "step size underflow"):
        super().__init__(f"{msg} at t={t:.9g}")
        self.t = t


@dataclass
class DenseSolution:
    """Piecewise-quartic interpolant over the accepted steps."""

    t0: float
    t1: float
    t_nodes: list = field(default_factory=list)   # step start times
    hs: list = field(default_factory=list)
    rconts: list = field(default_factory=list)    # (5, n) per step
    y_end: np.ndarray | None = None

    def _arrays(self):
        cache = getattr(self, "_cache", None)
        if cache is None or cache[0] != len(self.t_nodes):
            cache = (len(self.t_nodes), np.asarray(self.t_nodes), np.asarray(self.hs),
                     np.asarray(self.rconts))          # rconts: (nsteps, 5, n)
            self._cache = cache
        return cache[1:]

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        scalar = t.ndim == 0
        ts = np.atleast_1d(t)
        nodes, hs, R = self._arrays()
        direction = np.sign(self.t1 - self.t0) or 1.0
        # locate step index for each query (nodes are monotone in `direction`)
        key = direction * nodes
        idx = np.searchsorted(key, direction * ts, side="right") - 1
        idx = np.clip(idx, 0, len(nodes) - 1)
        h = hs[idx]
        th = (ts - nodes[idx]) / h
        r = R[idx]
        th = th[:, None]
        th1 = 1.0 - th
        out = r[:, 0] + th * (r[:, 1] + th1 * (r[:, 2] + th * (r[:, 3] + th1 * r[:, 4])))
        at_end = ts == self.t1
        if np.any(at_end) and self.y_end is not None:
            out[at_end] = self.y_end
        return out[0] if scalar else out


@dataclass
class Solution:
    t: np.ndarray
    y: np.ndarray          # (len(t), n)
    dense: DenseSolution
    n_steps: int
    n_rejected: int
    n_evals: int


def _initial_step(fun, t0, y0, f0, direction, rtol, atol):
    scale = atol + np.abs(y0) * rtol
    d0 = np.max(np.abs(y0) / scale)
    d1 = np.max(np.abs(f0) / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + h0 * direction * f0
    f1 = fun(t0 + h0 * direction, y1)
    d2 = np.max(np.abs(f1 - f0) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100 * h0, h1)


def rk45_integrate(fun, y0, t_span, t_eval=None, rtol: float = 1e-6, atol: float = 1e-8,
                   max_step: float = np.inf, first_step: float | None = None,
                   max_steps: int = 200000) -> Solution:
    """Integrate y' = fun(t, y) over ``t_span`` (which may run backward in time).

    ``fun`` maps (float, 1-D array) -> 1-D array. Samples at ``t_eval`` come from
    the dense output; the final sample is the last accepted step exactly.
    Raises IntegrationError on step-size underflow or step budget exhaustion.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    y = np.array(y0, dtype=float).ravel()
    if not np.all(np.isfinite(y)):
        raise IntegrationError(t0, "non-finite initial state")
    dense = DenseSolution(t0, t1)
    if t_eval is None:
        t_eval = np.array([t0, t1])
    t_eval = np.asarray(t_eval, float)
    if t1 == t0:
        dense.t_nodes.append(t0)
        dense.hs.append(1.0)
        dense.rconts.append(np.stack([y, 0 * y, 0 * y, 0 * y, 0 * y]))
        dense.y_end = y.copy()
        return Solution(t_eval, np.repeat(y[None], len(t_eval), 0), dense, 0, 0, 0)

    direction = 1.0 if t1 > t0 else -1.0
    f = np.asarray(fun(t0, y), float)
    nfev = 1
    h = first_step if first_step is not None else _initial_step(fun, t0, y, f, direction, rtol, atol)
    nfev += 1
    h = min(h, max_step, abs(t1 - t0))
    t = t0
    n_acc = n_rej = 0
    K = np.empty((7, y.size))
    rejected_last = False
    while direction * (t1 - t) > 0:
        if n_acc + n_rej > max_steps:
            raise IntegrationError(t, "step budget exhausted")
        min_h = 16 * np.spacing(abs(t) + 1.0)
        if h < min_h:
            raise IntegrationError(t)
        if direction * (t + direction * h - t1) > 0 or abs(t1 - (t + direction * h)) < min_h:
            h = abs(t1 - t)
        hs = direction * h
        K[0] = f
        for i in range(1, 7):
            dy = np.dot(A[i], K[:i])
            K[i] = fun(t + C[i] * hs, y + hs * dy)
        nfev += 6
        y_new = y + hs * np.dot(B5[:6], K[:6])
        err = hs * np.dot(E, K)
        sc = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = np.max(np.abs(err) / sc) if y.size else 0.0
        if not np.isfinite(err_norm):
            h *= 0.2
            n_rej += 1
            rejected_last = True
            continue
        if err_norm <= 1.0:
            t_new = t + hs if abs(t1 - (t + hs)) >= min_h else t1
            ydiff = y_new - y
            bspl = hs * K[0] - ydiff
            rc = np.stack([y, ydiff, bspl, ydiff - hs * K[6] - bspl, hs * np.dot(D, K)])
            dense.t_nodes.append(t)
            dense.hs.append(t_new - t)
            dense.rconts.append(rc)
            t, y, f = t_new, y_new, K[6].copy()
            n_acc += 1
            fac = 10.0 if err_norm == 0 else min(10.0, 0.9 * err_norm ** -0.2)
            if rejected_last:
                fac = min(fac, 1.0)
            h = min(h * fac, max_step)
            rejected_last = False
        else:
            h *= max(0.2, 0.9 * err_norm ** -0.2)
            n_rej += 1
            rejected_last = True
    dense.y_end = y.copy()
    ys = dense(t_eval)
    return Solution(t_eval, ys, dense, n_acc, n_rej, nfev)
