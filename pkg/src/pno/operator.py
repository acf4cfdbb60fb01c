"""Branch/trunk value and costate operators for both players.

For player i and type pair theta::

    value_i(x, t, theta)   = value_scale   * sum_k B_i(a(X, theta))_k T_i(x, t)_k
    costate_i(x, t, theta)_c = costate_scale * sum_k Bc_i(a)_k Tc_i(x, t)_{c*q + k}

``a(X, theta)`` is the collision indicator evaluated on a position lattice.
Trunk inputs (d1, v1, d2, v2, t) are mapped affinely to [-1, 1].
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import game
from .game import GameGeometry
from .nets import MLP, Activation, NetworkShape

CKPT_MAGIC = "PNO-CKPT v1"


class HorizonError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LatticeSpec:
    d1_bounds: tuple = (15.0, 105.0)
    d2_bounds: tuple = (15.0, 105.0)
    resolution: tuple = (31, 31)

    @property
    def size(self) -> int:
        return int(self.resolution[0] * self.resolution[1])

    def nodes(self) -> np.ndarray:
        """(N, 2) array of (d1, d2); d1 is the slow index (node n = i * n2 + j)."""
        a = np.linspace(*self.d1_bounds, self.resolution[0])
        b = np.linspace(*self.d2_bounds, self.resolution[1])
        A, B = np.meshgrid(a, b, indexing="ij")
        return np.stack([A.ravel(), B.ravel()], axis=1)


def encode_theta(lattice: LatticeSpec, thetas, geom: GameGeometry) -> np.ndarray:
    """Collision indicator of every lattice node for the type pair ``thetas``."""
    nodes = lattice.nodes()
    s = np.zeros((len(nodes), 4))
    s[:, 0], s[:, 2] = nodes[:, 0], nodes[:, 1]
    return game.collision_indicator(s, np.asarray(thetas, float), geom)


@dataclass(frozen=True)
class Normalization:
    """Affine map of raw (d1, v1, d2, v2, t) onto [-1, 1]."""

    lo: tuple
    hi: tuple

    @classmethod
    def from_box(cls, d_bounds, v_bounds, T: float) -> "Normalization":
        lo = (d_bounds[0], v_bounds[0], d_bounds[0], v_bounds[0], 0.0)
        hi = (d_bounds[1], v_bounds[1], d_bounds[1], v_bounds[1], T)
        return cls(tuple(map(float, lo)), tuple(map(float, hi)))

    @property
    def center(self):
        return (np.asarray(self.lo) + np.asarray(self.hi)) / 2.0

    @property
    def half(self):
        return (np.asarray(self.hi) - np.asarray(self.lo)) / 2.0

    def normalize(self, z):
        return (np.asarray(z, float) - self.center) / self.half

    def denormalize(self, zn):
        return np.asarray(zn, float) * self.half + self.center


@dataclass
class OperatorConfig:
    hidden_widths: tuple = (64, 64, 64)
    q: int = 64
    activation: str = "tanh"
    adaptive: bool = True
    omega0: float = 30.0
    lattice: LatticeSpec = field(default_factory=LatticeSpec)
    d_bounds: tuple = (15.0, 105.0)
    v_bounds: tuple = (15.0, 32.0)
    sign_convention: str = "maximizing"   # or "printed"
    with_costate: bool = True


NET_ROLES = ("value_branch", "value_trunk", "costate_branch", "costate_trunk")


class OperatorEnsemble:
    """Per-player value operators plus (optionally) per-player costate operators.

    All trainable parameters sit in ``self.params`` in the order
    player 1 (value branch, value trunk, costate branch, costate trunk), then
    player 2. Hybrid ensembles omit the costate blocks.
    """

    def __init__(self, geom: GameGeometry, cfg: OperatorConfig, params: np.ndarray | None = None,
                 seed: int = 0, value_scale: float | None = None,
                 costate_scale: float | None = None):
        self.geom = geom
        self.cfg = cfg
        self.seed = int(seed)
        self.norm = Normalization.from_box(cfg.d_bounds, cfg.v_bounds, geom.T)
        act = Activation(cfg.activation, cfg.adaptive, cfg.omega0)
        self.act = act
        q = int(cfg.q)
        self.q = q
        n_bits = cfg.lattice.size
        h = tuple(cfg.hidden_widths)
        self.nets = {
            "value_branch": MLP(NetworkShape(n_bits, q, h), act),
            "value_trunk": MLP(NetworkShape(5, q, h), act),
            "costate_branch": MLP(NetworkShape(n_bits, q, h), act),
            "costate_trunk": MLP(NetworkShape(5, 4 * q, h), act),
        }
        roles = NET_ROLES if cfg.with_costate else NET_ROLES[:2]
        self.blocks: list[tuple[int, str, slice]] = []
        pos = 0
        for player in (0, 1):
            for role in roles:
                n = self.nets[role].n_params
                self.blocks.append((player, role, slice(pos, pos + n)))
                pos += n
        self.n_params = pos
        if value_scale is None:
            value_scale, costate_scale = default_scales(geom, cfg.d_bounds, cfg.v_bounds)
        self.value_scale = float(value_scale)
        self.costate_scale = float(costate_scale)
        if params is None:
            params = self.init_params(self.seed)
        self.params = np.asarray(params, float)
        if self.params.shape != (self.n_params,):
            raise CheckpointError(f"expected {self.n_params} parameters, got {self.params.shape}")
        self._bits_cache: dict = {}

    # -- parameter bookkeeping ------------------------------------------------

    def init_params(self, seed: int) -> np.ndarray:
        p = np.zeros(self.n_params)
        for n, (player, role, sl) in enumerate(self.blocks):
            p[sl] = self.nets[role].init(seed * 1000 + n)
        return p

    def block(self, player: int, role: str) -> slice:
        for pl, r, sl in self.blocks:
            if pl == player and r == role:
                return sl
        raise KeyError((player, role))

    def view(self, params: np.ndarray, player: int, role: str) -> np.ndarray:
        return params[self.block(player, role)]

    def with_params(self, params: np.ndarray) -> "OperatorEnsemble":
        ens = OperatorEnsemble(self.geom, self.cfg, params.copy(), self.seed,
                               self.value_scale, self.costate_scale)
        ens._bits_cache = self._bits_cache
        return ens

    # -- encodings ----------------------------------------------------------

    def bits(self, thetas) -> np.ndarray:
        key = tuple(int(t) for t in thetas)
        if key not in self._bits_cache:
            self._bits_cache[key] = encode_theta(self.cfg.lattice, key, self.geom).astype(float)
        return self._bits_cache[key]

    def group_thetas(self, thetas, n: int):
        """Unique encodings (U, N_bits) and the row index of each sample."""
        th = np.asarray(thetas, dtype=int)
        if th.ndim == 1:
            th = np.broadcast_to(th, (n, 2))
        uniq, idx = np.unique(th, axis=0, return_inverse=True)
        bits = np.stack([self.bits(u) for u in uniq])
        return uniq, bits, np.asarray(idx).ravel()

    # -- core evaluation ----------------------------------------------------

    def _check_time(self, t):
        t = np.asarray(t, float)
        if np.any(t < -1e-12) or np.any(t > self.geom.T + 1e-12):
            raise HorizonError(f"time outside [0, {self.geom.T}]")

    def trunk_inputs(self, s, t) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, float))
        t = np.broadcast_to(np.asarray(t, float), (s.shape[0],))
        return self.norm.normalize(np.column_stack([s, t]))

    def _operator(self, params, player, kind, bits_u, idx, Zn, grad, keep):
        """Evaluate one branch/trunk pair; returns (out, dout, cache)."""
        bnet, tnet = self.nets[f"{kind}_branch"], self.nets[f"{kind}_trunk"]
        pb = self.view(params, player, f"{kind}_branch")
        pt = self.view(params, player, f"{kind}_trunk")
        Bu, _, bcache = bnet.run(pb, bits_u, keep=keep)
        tang = np.eye(5) if grad else None
        Tr, dTr, tcache = tnet.run(pt, Zn, tang, keep=keep)
        n_out = 1 if kind == "value" else 4
        scale = self.value_scale if kind == "value" else self.costate_scale
        q = self.q
        Bi = Bu[idx]                                   # (B, q)
        Tr3 = Tr.reshape(len(Zn), n_out, q)
        out = scale * np.einsum("bk,bck->bc", Bi, Tr3)
        dout = None
        inv_half = 1.0 / self.norm.half
        if grad:
            dTr4 = dTr.reshape(len(Zn), 5, n_out, q)
            dout = scale * np.einsum("bk,bjck->bcj", Bi, dTr4) * inv_half
        cache = None
        if keep:
            cache = dict(Bu=Bu, idx=idx, Tr3=Tr3, dTr=dTr, bcache=bcache, tcache=tcache,
                         n_out=n_out, scale=scale)
        return out, dout, cache

    def _operator_backward(self, params, player, kind, cache, obar, dobar, grad_out):
        bnet, tnet = self.nets[f"{kind}_branch"], self.nets[f"{kind}_trunk"]
        pb = self.view(params, player, f"{kind}_branch")
        pt = self.view(params, player, f"{kind}_trunk")
        scale, n_out, q = cache["scale"], cache["n_out"], self.q
        Bu, idx, Tr3 = cache["Bu"], cache["idx"], cache["Tr3"]
        Bi = Bu[idx]
        nB = len(idx)
        Tbar = scale * Bi[:, None, :] * obar[:, :, None]            # (B, n_out, q)
        Bi_bar = scale * np.einsum("bck,bc->bk", Tr3, obar)
        dTbar = None
        if dobar is not None:
            inv_half = 1.0 / self.norm.half
            dob = dobar * inv_half                                  # (B, n_out, 5)
            dTr4 = cache["dTr"].reshape(nB, 5, n_out, q)
            dTbar = scale * Bi[:, None, None, :] * np.transpose(dob, (0, 2, 1))[:, :, :, None]
            Bi_bar += scale * np.einsum("bjck,bcj->bk", dTr4, dob)
            dTbar = dTbar.reshape(nB, 5, n_out * q)
        onehot = np.zeros((len(Bu), nB))
        onehot[idx, np.arange(nB)] = 1.0
        Bu_bar = onehot @ Bi_bar
        grad_out[self.block(player, f"{kind}_branch")] += bnet.backward(pb, cache["bcache"], Bu_bar)
        grad_out[self.block(player, f"{kind}_trunk")] += tnet.backward(
            pt, cache["tcache"], Tbar.reshape(nB, n_out * q), dTbar)

    # -- public queries -----------------------------------------------------

    def value(self, s, t, thetas, params=None) -> np.ndarray:
        """Values of both players, shape (B, 2)."""
        p = self.params if params is None else params
        self._check_time(t)
        Zn = self.trunk_inputs(s, t)
        _, bits, idx = self.group_thetas(thetas, len(Zn))
        cols = [self._operator(p, i, "value", bits, idx, Zn, False, False)[0][:, 0] for i in (0, 1)]
        return np.stack(cols, axis=1)

    def value_and_gradient(self, s, t, thetas, params=None):
        """Values (B, 2) and raw-unit gradients (B, 2, 5); last entry is d/dt."""
        p = self.params if params is None else params
        self._check_time(t)
        Zn = self.trunk_inputs(s, t)
        _, bits, idx = self.group_thetas(thetas, len(Zn))
        V, G = [], []
        for i in (0, 1):
            o, d, _ = self._operator(p, i, "value", bits, idx, Zn, True, False)
            V.append(o[:, 0])
            G.append(d[:, 0, :])
        return np.stack(V, axis=1), np.stack(G, axis=1)

    def value_gradient(self, s, t, thetas, player: int):
        """(grad_x value_i (B, 4), d/dt value_i (B,))."""
        _, G = self.value_and_gradient(s, t, thetas)
        return G[:, player, :4], G[:, player, 4]

    def costate(self, s, t, thetas, params=None) -> np.ndarray:
        """Costate predictions of both players, shape (B, 2, 4)."""
        if not self.cfg.with_costate:
            raise CheckpointError("ensemble has no costate networks")
        p = self.params if params is None else params
        self._check_time(t)
        Zn = self.trunk_inputs(s, t)
        _, bits, idx = self.group_thetas(thetas, len(Zn))
        return np.stack([self._operator(p, i, "costate", bits, idx, Zn, False, False)[0]
                         for i in (0, 1)], axis=1)

    def branch_coefficients(self, thetas, player: int, kind: str = "value") -> np.ndarray:
        return self.nets[f"{kind}_branch"].run(
            self.view(self.params, player, f"{kind}_branch"), self.bits(thetas)[None])[0][0]

    def trunk_basis(self, s, t, player: int) -> np.ndarray:
        Zn = self.trunk_inputs(s, t)
        return self.nets["value_trunk"].run(self.view(self.params, player, "value_trunk"), Zn)[0]

    def policy(self, source: str, s, t, thetas) -> np.ndarray:
        """Controls (B, 2) from value gradients or from the costate networks."""
        if source in ("value-gradient", "pno-value-gradient", "hybrid"):
            _, G = self.value_and_gradient(s, t, thetas)
            lam_v = np.stack([G[:, 0, 1], G[:, 1, 3]], axis=1)
        elif source in ("costate-net", "pno-costate"):
            lam = self.costate(s, t, thetas)
            lam_v = np.stack([lam[:, 0, 1], lam[:, 1, 3]], axis=1)
        else:
            raise ValueError(f"unknown policy source {source!r}")
        return game.optimal_control(lam_v, self.geom)

    # -- serialization ------------------------------------------------------

    def descriptor(self, extra: dict | None = None) -> dict:
        cfg = asdict(self.cfg)
        d = {
            "operator": cfg,
            "geometry": self.geom.to_dict(),
            "normalization": {"lo": list(self.norm.lo), "hi": list(self.norm.hi)},
            "value_scale": self.value_scale,
            "costate_scale": self.costate_scale,
            "seed": self.seed,
            "blocks": [[pl + 1, role, sl.stop - sl.start] for pl, role, sl in self.blocks],
            "geometry_hash": geometry_hash(self.geom),
        }
        if extra:
            d["meta"] = extra
        return d


def default_scales(geom: GameGeometry, d_bounds, v_bounds) -> tuple:
    """Largest terminal loss and terminal-costate magnitude over the state box."""
    dv = max(abs(v_bounds[0] - geom.v_bar), abs(v_bounds[1] - geom.v_bar))
    value_scale = dv ** 2 + geom.mu * max(abs(d_bounds[0]), abs(d_bounds[1]))
    costate_scale = 2.0 * dv
    return value_scale, costate_scale


def geometry_hash(geom: GameGeometry) -> str:
    blob = json.dumps(geom.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, ens: OperatorEnsemble, meta: dict | None = None) -> None:
    desc = json.dumps(ens.descriptor(meta), sort_keys=True, separators=(",", ":"))
    buf = io.BytesIO()
    buf.write((CKPT_MAGIC + "\n").encode())
    buf.write((desc + "\n").encode())
    buf.write(np.ascontiguousarray(ens.params, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple:
    """Returns (ensemble, meta)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    nl1 = raw.find(b"\n")
    if raw[:nl1].decode(errors="replace") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a {CKPT_MAGIC} file")
    nl2 = raw.find(b"\n", nl1 + 1)
    desc = json.loads(raw[nl1 + 1:nl2].decode())
    params = np.frombuffer(raw[nl2 + 1:], dtype="<f8").astype(float)
    ocfg = dict(desc["operator"])
    ocfg["lattice"] = LatticeSpec(**{k: tuple(v) for k, v in ocfg["lattice"].items()})
    for k in ("hidden_widths", "d_bounds", "v_bounds"):
        ocfg[k] = tuple(ocfg[k])
    geom = GameGeometry(**desc["geometry"])
    ens = OperatorEnsemble(geom, OperatorConfig(**ocfg), params, desc["seed"],
                           desc["value_scale"], desc["costate_scale"])
    return ens, desc.get("meta", {})
