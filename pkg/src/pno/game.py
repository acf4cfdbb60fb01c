"""Two-vehicle uncontrolled-intersection game.

Joint state order is ``(d1, v1, d2, v2)`` everywhere. A player's costate is a
4-vector in that same joint order, so for player 2 the "own" components sit at
indices 2 and 3. Player indices are 0 and 1.

Sign convention: values are *maximized* (value = -cost). Hence the optimal
terminal value is -g, the terminal costate is -grad g, and the optimal control
is argmax_u {lam . f - (l + c)}.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

THETAS = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class GameGeometry:
    R: float = 70.0       # road length [m]
    L: float = 3.0        # vehicle length [m]
    W: float = 1.5        # vehicle width [m]
    gamma: float = 5.0    # sigmoid shape
    b: float = 1e4        # collision penalty magnitude
    u_min: float = -5.0
    u_max: float = 10.0
    v_bar: float = 18.0   # nominal speed [m/s]
    mu: float = 1e-6      # terminal position weight
    T: float = 3.0        # horizon [s]

    def __post_init__(self):
        if not self.u_min < self.u_max:
            raise ValueError("u_min must be < u_max")
        if self.gamma <= 0 or self.b < 0 or self.T <= 0:
            raise ValueError("gamma, T must be positive and b nonnegative")
        if not self.R > self.L + self.W:
            raise ValueError("R must exceed L + W")

    def zone(self, theta) -> tuple:
        """Closed collision interval [lo, hi] seen by a player of type ``theta``."""
        lo = self.R / 2.0 - np.asarray(theta, float) * self.W / 2.0
        hi = (self.R + self.W) / 2.0 + self.L
        return lo, hi

    def replace(self, **kw) -> "GameGeometry":
        return GameGeometry(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        return asdict(self)


def own(player: int) -> tuple:
    """(position index, velocity index) of ``player`` in the joint state."""
    return (0, 1) if player == 0 else (2, 3)


def other(player: int) -> int:
    return 1 - player


def dynamics(s: np.ndarray, u1, u2) -> np.ndarray:
    """Time derivative (v1, u1, v2, u2) of the joint state; broadcasts over rows."""
    s = np.asarray(s, float)
    out = np.empty(np.broadcast_shapes(s.shape, np.shape(u1) + (4,), np.shape(u2) + (4,)))
    out[..., 0] = s[..., 1]
    out[..., 1] = u1
    out[..., 2] = s[..., 3]
    out[..., 3] = u2
    return out


def _sig_parts(d, theta, g: GameGeometry):
    """(s1, s2, 1 - s2); the complement is evaluated directly so it keeps
    relative precision past the zone instead of rounding to zero."""
    a1 = g.gamma * (d - g.R / 2.0 + np.asarray(theta, float) * g.W / 2.0)
    a2 = g.gamma * (d - (g.R + g.W) / 2.0 - g.L)
    return expit(a1), expit(a2), expit(-a2)


def sigma(d, theta, g: GameGeometry):
    s1, _, c2 = _sig_parts(d, theta, g)
    return s1 * c2


def dsigma(d, theta, g: GameGeometry):
    s1, s2, c2 = _sig_parts(d, theta, g)
    return g.gamma * s1 * c2 * (1.0 - s1 - s2)


def penalty(s: np.ndarray, theta_i, player: int, g: GameGeometry):
    """Collision penalty c_i = b sigma(d_i, theta_i) sigma(d_-i, 1)."""
    s = np.asarray(s, float)
    di, dj = s[..., own(player)[0]], s[..., own(other(player))[0]]
    return g.b * sigma(di, theta_i, g) * sigma(dj, 1.0, g)


def penalty_gradient(s: np.ndarray, theta_i, player: int, g: GameGeometry):
    """(dc/dd_own, dc/dd_other). The penalty does not depend on velocities."""
    s = np.asarray(s, float)
    di, dj = s[..., own(player)[0]], s[..., own(other(player))[0]]
    si, sj = sigma(di, theta_i, g), sigma(dj, 1.0, g)
    return g.b * dsigma(di, theta_i, g) * sj, g.b * si * dsigma(dj, 1.0, g)


def penalty_state_gradient(s: np.ndarray, theta_i, player: int, g: GameGeometry) -> np.ndarray:
    """Full gradient of c_i with respect to the joint state, shape (..., 4)."""
    s = np.asarray(s, float)
    dco, dcx = penalty_gradient(s, theta_i, player, g)
    out = np.zeros(s.shape)
    out[..., own(player)[0]] = dco
    out[..., own(other(player))[0]] = dcx
    return out


def terminal_loss_and_gradient(x_own: np.ndarray, g: GameGeometry):
    """g = -mu d + (v - v_bar)^2 and its gradient (-mu, 2 (v - v_bar))."""
    x_own = np.asarray(x_own, float)
    d, v = x_own[..., 0], x_own[..., 1]
    val = -g.mu * d + (v - g.v_bar) ** 2
    grad = np.stack([np.full(np.shape(d), -g.mu), 2.0 * (v - g.v_bar)], axis=-1)
    return val, grad


def terminal_loss(s: np.ndarray, player: int, g: GameGeometry):
    return terminal_loss_and_gradient(np.asarray(s)[..., list(own(player))], g)[0]


def terminal_state_gradient(s: np.ndarray, player: int, g: GameGeometry) -> np.ndarray:
    """Gradient of g_i with respect to the joint state (zeros on the other player)."""
    s = np.asarray(s, float)
    _, gr = terminal_loss_and_gradient(s[..., list(own(player))], g)
    out = np.zeros(s.shape)
    out[..., list(own(player))] = gr
    return out


def optimal_control(lam_v_own, g: GameGeometry):
    """argmax_u {lam_v u - u^2} over [u_min, u_max]."""
    return np.clip(np.asarray(lam_v_own, float) / 2.0, g.u_min, g.u_max)


def hamiltonian(lam: np.ndarray, s: np.ndarray, u_i, u_other, theta_i, player: int,
                g: GameGeometry):
    """lam . f - (l_i + c_i) with l_i = u_i^2."""
    lam = np.asarray(lam, float)
    s = np.asarray(s, float)
    u1, u2 = (u_i, u_other) if player == 0 else (u_other, u_i)
    # lam . f written out so no (..., 4) dynamics array is materialized
    lam_f = lam[..., 0] * s[..., 1] + lam[..., 1] * u1 + lam[..., 2] * s[..., 3] + lam[..., 3] * u2
    return lam_f - (np.asarray(u_i) ** 2 + penalty(s, theta_i, player, g))


def maximize_hamiltonian(lam: np.ndarray, s: np.ndarray, theta_i, player: int,
                         g: GameGeometry, u_other=0.0):
    """Pointwise maximizer over the player's own control, other control held fixed.

    Returns (u_star, H_star).
    """
    lam = np.asarray(lam, float)
    u = optimal_control(lam[..., own(player)[1]], g)
    return u, hamiltonian(lam, s, u, u_other, theta_i, player, g)


def collision_indicator(s: np.ndarray, thetas, g: GameGeometry):
    """1 where both vehicles sit inside their theta-scaled zones (closed intervals)."""
    s = np.asarray(s, float)
    thetas = np.asarray(thetas, float)
    lo1, hi = g.zone(thetas[..., 0])
    lo2, _ = g.zone(thetas[..., 1])
    d1, d2 = s[..., 0], s[..., 2]
    return ((d1 >= lo1) & (d1 <= hi) & (d2 >= lo2) & (d2 <= hi)).astype(np.int8)
